"""Gaussian parameter containers, activations, and camera geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SH_C0 = 0.28209479177387814
PARAMS_PER_GAUSSIAN = 14

# offsets of each parameter group inside one Gaussian's block
MEAN = slice(0, 3)
LOG_SCALE = slice(3, 6)
ROTATION = slice(6, 10)
OPACITY = slice(10, 11)
COLOR = slice(11, 14)

PARAM_GROUPS = {
    "mean": MEAN,
    "scale": LOG_SCALE,
    "rotation": ROTATION,
    "opacity": OPACITY,
    "color": COLOR,
}

# largest |coefficient| whose rendered channel stays inside [0, 1]
COLOR_COEFF_RANGE = 0.5 / SH_C0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


def color_from_coeff(coeff):
    """Rendered channel value for a level-0 SH coefficient (clamped at 0)."""
    return np.maximum(0.5 + SH_C0 * np.asarray(coeff), 0.0)


@dataclass(frozen=True)
class GaussianSet:
    """Raw (pre-activation) parameters of G Gaussians.

    Activations: scale = exp(log_scale), opacity = sigmoid(opacity_logit),
    channel = max(0, 0.5 + SH_C0 * color). Rotations are (w, x, y, z)
    quaternions and are normalized when an optimizer step is applied.
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        g = len(self.means)
        shapes = {
            "means": (g, 3),
            "log_scales": (g, 3),
            "rotations": (g, 4),
            "opacity_logits": (g, 1),
            "colors": (g, 3),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            object.__setattr__(self, name, arr)

    @property
    def count(self) -> int:
        return len(self.means)

    @property
    def num_params(self) -> int:
        return PARAMS_PER_GAUSSIAN * self.count

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits[:, 0])

    def to_matrix(self) -> np.ndarray:
        """(G, 14) array, one row per Gaussian in the documented layout."""
        return np.concatenate(
            [self.means, self.log_scales, self.rotations, self.opacity_logits, self.colors], axis=1
        )

    def to_vector(self) -> np.ndarray:
        return self.to_matrix().reshape(-1)

    @classmethod
    def from_matrix(cls, rows: np.ndarray) -> "GaussianSet":
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, PARAMS_PER_GAUSSIAN)
        return cls(
            means=rows[:, MEAN].copy(),
            log_scales=rows[:, LOG_SCALE].copy(),
            rotations=rows[:, ROTATION].copy(),
            opacity_logits=rows[:, OPACITY].copy(),
            colors=rows[:, COLOR].copy(),
        )

    @classmethod
    def from_vector(cls, values: np.ndarray) -> "GaussianSet":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size % PARAMS_PER_GAUSSIAN:
            raise ValueError(f"parameter vector length {values.size} is not a multiple of 14")
        return cls.from_matrix(values)

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls.from_matrix(np.zeros((0, PARAMS_PER_GAUSSIAN)))

    def normalized(self) -> "GaussianSet":
        """Copy with unit-length rotation quaternions."""
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-norm quaternion")
        rows = self.to_matrix()
        rows[:, ROTATION] = self.rotations / norms
        return GaussianSet.from_matrix(rows)

    def permuted(self, order) -> "GaussianSet":
        return GaussianSet.from_matrix(self.to_matrix()[np.asarray(order)])


def pack(gaussians: GaussianSet) -> np.ndarray:
    return gaussians.to_vector()


def unpack(values: np.ndarray) -> GaussianSet:
    return GaussianSet.from_vector(values)


def group_mask(count: int, group: str) -> np.ndarray:
    """Boolean mask over the flat parameter vector selecting one group."""
    mask = np.zeros((count, PARAMS_PER_GAUSSIAN), dtype=bool)
    mask[:, PARAM_GROUPS[group]] = True
    return mask.reshape(-1)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; x_cam = rotation @ x_world + translation, looking down +z."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near_clip: float = 0.2

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6 or np.linalg.det(rot) < 0:
            raise ValueError("world_to_cam rotation is not orthonormal")

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Unit viewing direction in world coordinates."""
        return self.rotation[2].copy()

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, near_clip=0.2) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        # image y points down, so the camera's y axis is -up and x = y cross z
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(rot, -rot @ eye, fx, fy, width / 2.0, height / 2.0, width, height, near_clip)

    def translated(self, offset) -> "Camera":
        """The same camera after moving it (in world space) by ``offset``."""
        offset = np.asarray(offset, dtype=np.float64)
        return Camera(
            self.rotation, self.translation - self.rotation @ offset,
            self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near_clip,
        )


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of the (w, x, y, z) quaternion ``q / |q|``."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero-norm quaternion has no rotation")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def covariance_3d(log_scale, q) -> np.ndarray:
    """World-space covariance R S S^T R^T with S = diag(exp(log_scale))."""
    rs = quat_to_rotation(q) * np.exp(np.asarray(log_scale, dtype=np.float64))
    return rs @ rs.T


# low-pass added to every projected covariance (anti-aliasing)
DILATION = 0.3
# ellipse extent, in standard deviations, used for culling and tile binning
EXTENT_SIGMAS = 3.0


@dataclass(frozen=True)
class Projection:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


def project_gaussian(mean, cov, cam: Camera) -> Projection | None:
    """EWA projection of one Gaussian; ``None`` when it is culled."""
    t = cam.rotation @ np.asarray(mean, dtype=np.float64) + cam.translation
    depth = float(t[2])
    if depth <= cam.near_clip:
        return None
    tx, ty, tz = t
    jac = np.array([
        [cam.fx / tz, 0.0, -cam.fx * tx / tz**2],
        [0.0, cam.fy / tz, -cam.fy * ty / tz**2],
    ])
    tw = jac @ cam.rotation
    cov2d = tw @ np.asarray(cov, dtype=np.float64) @ tw.T + DILATION * np.eye(2)
    mean2d = np.array([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy])
    ext = EXTENT_SIGMAS * np.sqrt(np.diag(cov2d))
    lo, hi = mean2d - ext, mean2d + ext
    if hi[0] < 0 or hi[1] < 0 or lo[0] > cam.width or lo[1] > cam.height:
        return None
    return Projection(mean2d, cov2d, depth)
