"""Datasets, synthetic scenes, initialization, checkpoints, and run configuration."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .core import COLOR_COEFF_RANGE, SH_C0, Camera, GaussianSet, logit
from .render import render_images


class DatasetError(ValueError):
    """A dataset or checkpoint file is missing or malformed."""


@dataclass
class SceneDataset:
    cameras: list
    images: list
    split: str = "train"

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        shapes = {np.shape(img) for img in self.images}
        if len(shapes) > 1:
            raise ValueError(f"images of split {self.split!r} differ in size: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.cameras)


# -- nerf_synthetic ------------------------------------------------------------

_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


def focal_from_fov(camera_angle_x: float, width: int) -> float:
    return 0.5 * width / np.tan(0.5 * camera_angle_x)


def camera_from_c2w(c2w, fov_x: float, width: int, height: int, near_clip: float = 0.2) -> Camera:
    """Camera from an OpenGL-style camera-to-world matrix (looking down -z)."""
    c2w = np.asarray(c2w, dtype=np.float64).reshape(4, 4) @ _GL_TO_CV
    w2c = np.linalg.inv(c2w)
    f = focal_from_fov(fov_x, width)
    return Camera(w2c[:3, :3], w2c[:3, 3], f, f, width / 2.0, height / 2.0, width, height, near_clip)


def camera_to_c2w(cam: Camera) -> np.ndarray:
    w2c = np.eye(4)
    w2c[:3, :3] = cam.rotation
    w2c[:3, 3] = cam.translation
    return np.linalg.inv(w2c) @ _GL_TO_CV


def load_image(path) -> np.ndarray:
    """Float64 RGB image in [0, 1]; RGBA is composited over black."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr[..., :3] * arr[..., 3:4]


def write_png(path, image) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def load_nerf_synthetic(directory, split: str = "train") -> SceneDataset:
    root = Path(directory)
    meta_path = root / f"transforms_{split}.json"
    try:
        meta = json.loads(meta_path.read_text())
        fov = float(meta["camera_angle_x"])
        frames = meta["frames"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"cannot parse {meta_path}: {exc}") from exc
    cams, images = [], []
    for frame in frames:
        rel = frame["file_path"]
        path = root / rel
        if not path.suffix:
            path = path.with_suffix(".png")
        img = load_image(path)
        h, w = img.shape[:2]
        try:
            cams.append(camera_from_c2w(frame["transform_matrix"], fov, w, h))
        except (ValueError, KeyError) as exc:
            raise DatasetError(f"bad transform for {path} in {meta_path}: {exc}") from exc
        images.append(img)
    try:
        return SceneDataset(cams, images, split)
    except ValueError as exc:
        raise DatasetError(f"{meta_path}: {exc}") from exc


def save_nerf_synthetic(directory, dataset: SceneDataset) -> None:
    """Write a dataset in the nerf_synthetic layout (assumes fx == fy, centered principal point)."""
    root = Path(directory)
    (root / dataset.split).mkdir(parents=True, exist_ok=True)
    cam0 = dataset.cameras[0]
    fov = 2.0 * np.arctan(0.5 * cam0.width / cam0.fx)
    frames = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        name = f"./{dataset.split}/r_{i}"
        write_png(root / f"{name}.png", img)
        frames.append({"file_path": name, "transform_matrix": camera_to_c2w(cam).tolist()})
    (root / f"transforms_{dataset.split}.json").write_text(json.dumps({"camera_angle_x": fov, "frames": frames}, indent=1))


# -- initialization ------------------------------------------------------------

def random_init(count: int, cube=(-1.0, 1.0), rng=None) -> GaussianSet:
    """``count`` isotropic Gaussians with uniform random means and colors inside a cube."""
    if count < 1:
        raise ValueError(f"need at least one Gaussian, got {count}")
    rng = rng if rng is not None else np.random.default_rng()
    lo, hi = (float(c) for c in cube)
    edge = hi - lo
    return GaussianSet(
        means=rng.uniform(lo, hi, size=(count, 3)),
        log_scales=np.full((count, 3), np.log(edge * count ** (-1.0 / 3.0) * 0.5)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (count, 1)),
        opacity_logits=np.full((count, 1), logit(0.1)),
        colors=rng.uniform(-COLOR_COEFF_RANGE, COLOR_COEFF_RANGE, size=(count, 3)),
    )


def load_points(path):
    """Read ``x y z r g b`` lines; colors in [0, 255] are rescaled to [0, 1]."""
    try:
        data = np.loadtxt(path, ndmin=2, comments="#")
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read point list {path}: {exc}") from exc
    if data.shape[1] != 6:
        raise DatasetError(f"{path}: expected 6 columns (x y z r g b), got {data.shape[1]}")
    xyz, rgb = data[:, :3], data[:, 3:]
    if rgb.max(initial=0.0) > 1.0:
        rgb = rgb / 255.0
    return xyz, rgb


def init_from_points(xyz, rgb) -> GaussianSet:
    """Isotropic Gaussians on points, sized by the mean distance to three neighbors."""
    xyz = np.asarray(xyz, dtype=np.float64)
    n = len(xyz)
    if n == 0:
        raise ValueError("empty point list")
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(xyz).query(xyz, k=k)
        scale = np.sqrt(np.mean(dist[:, 1:] ** 2, axis=1))
        scale = np.maximum(scale, 1e-7)
    else:
        scale = np.ones(1)
    return GaussianSet(
        means=xyz,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full((n, 1), logit(0.1)),
        colors=(np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0,
    )


# -- synthetic scene -----------------------------------------------------------

TOY_RADIUS = 4.0
TOY_FOCAL_RATIO = 1.6  # focal length / image width


def ring_cameras(count: int, width: int = 64, height: int = 64, radius: float = TOY_RADIUS,
                 phase: float = 0.0, elevation: float = 0.35) -> list[Camera]:
    """Cameras on a horizontal ring around the origin, alternating in height."""
    cams = []
    f = TOY_FOCAL_RATIO * width
    for i in range(count):
        angle = phase + 2.0 * np.pi * i / count
        z = radius * elevation * (1.0 if i % 2 == 0 else -0.5)
        eye = np.array([radius * np.cos(angle), radius * np.sin(angle), z])
        cams.append(Camera.look_at(eye, np.zeros(3), [0.0, 0.0, 1.0], f, f, width, height))
    return cams


def toy_gaussians(count: int, rng) -> GaussianSet:
    """Well-conditioned random Gaussians inside [-0.8, 0.8]^3."""
    q = rng.normal(size=(count, 4))
    return GaussianSet(
        means=rng.uniform(-0.8, 0.8, size=(count, 3)),
        log_scales=np.log(rng.uniform(0.12, 0.3, size=(count, 3))),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        opacity_logits=logit(rng.uniform(0.6, 0.95, size=(count, 1))),
        colors=rng.uniform(-0.8 * COLOR_COEFF_RANGE, 0.8 * COLOR_COEFF_RANGE, size=(count, 3)),
    )


def render_dataset(gaussians: GaussianSet, cams, split: str = "train") -> SceneDataset:
    return SceneDataset(list(cams), render_images(gaussians, cams), split)


def generate_toy_scene(count: int, cams=8, image_size=(64, 64), rng=None):
    """Random ground-truth Gaussians and the dataset they render to.

    ``cams`` is either a camera list or a number of ring cameras to create.
    """
    if count < 1:
        raise ValueError(f"toy scene needs at least one Gaussian, got {count}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if isinstance(cams, (int, np.integer)):
        cams = ring_cameras(int(cams), *image_size)
    gt = toy_gaussians(count, rng)
    return gt, render_dataset(gt, cams, "train")


@dataclass
class ToyScene:
    gt: GaussianSet
    train: SceneDataset
    test: SceneDataset


def toy_scene(count: int = 20, num_train: int = 8, num_test: int = 4, size: int = 64, seed: int = 0) -> ToyScene:
    """The standard toy benchmark: ring training views plus rotated, raised test views."""
    gt, train = generate_toy_scene(count, num_train, (size, size), np.random.default_rng(seed))
    test_cams = ring_cameras(num_test, size, size, phase=np.pi / max(num_train, 1), elevation=0.2)
    return ToyScene(gt, train, render_dataset(gt, test_cams, "test"))


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPLATLM\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def save_checkpoint(path, gaussians: GaussianSet, metadata: dict | None = None) -> None:
    """Binary header (magic, version, G) plus little-endian float64 parameters, and a JSON sidecar."""
    path = Path(path)
    values = gaussians.to_vector().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, gaussians.count))
        fh.write(values.tobytes())
    side = {
        "format": "splatlm-checkpoint",
        "version": CHECKPOINT_VERSION,
        "count": gaussians.count,
        "layout": ["mean[3]", "log_scale[3]", "rotation_wxyz[4]", "opacity_logit[1]", "color_sh0[3]"],
        "dtype": "float64 little-endian",
        **(metadata or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True))


def load_checkpoint(path) -> GaussianSet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated checkpoint header")
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise DatasetError(f"{path}: not a splatlm checkpoint")
    if version != CHECKPOINT_VERSION:
        raise DatasetError(f"{path}: unsupported checkpoint version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * 14 * count:
        raise DatasetError(f"{path}: expected {14 * count} parameters, found {len(body) // 8}")
    return GaussianSet.from_vector(np.frombuffer(body, dtype="<f8").astype(np.float64))


# -- run configuration ---------------------------------------------------------

ENV_PREFIX = "SPLATLM_"


@dataclass
class RunConfig:
    scene: str = "toy"
    optimizer: str = "lm"
    iters: int = 200
    seed: int = 0
    out: str = "runs/default"
    samples_per_tile: int = 32
    damping: float = 0.1
    batch_size: int = 8
    pcg_iters: str = "3,8"
    residual_dist: str = "uniform"
    loss: str = "mse"
    deterministic: bool = False
    eval_every: int = 50
    num_gaussians: int = 0  # 0: 40 for the toy scene, 10000 otherwise
    scene_seed: int = 0

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError(f"iteration budget must be >= 1, got {self.iters}")

    def pcg_schedule(self) -> tuple:
        parts = [int(p) for p in str(self.pcg_iters).split(",") if p.strip()]
        if not 1 <= len(parts) <= 2:
            raise ValueError(f"--pcg-iters expects N or N,M, got {self.pcg_iters!r}")
        return (parts[0], parts[-1])

    @classmethod
    def env_defaults(cls, environ=None) -> dict:
        """Field overrides read from SPLATLM_<FIELD> environment variables."""
        environ = os.environ if environ is None else environ
        out = {}
        for f in fields(cls):
            key = ENV_PREFIX + f.name.upper()
            if key not in environ:
                continue
            raw = environ[key]
            if f.type in ("bool", bool):
                out[f.name] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif f.type in ("int", int):
                out[f.name] = int(raw)
            elif f.type in ("float", float):
                out[f.name] = float(raw)
            else:
                out[f.name] = raw
        return out
