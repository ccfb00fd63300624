import json

import numpy as np
import pytest
from PIL import Image

from splatlm.cli import CSV_HEADER, run_cli
from splatlm.core import COLOR_COEFF_RANGE, GaussianSet
from splatlm.io import (
    DatasetError,
    RunConfig,
    SceneDataset,
    focal_from_fov,
    generate_toy_scene,
    init_from_points,
    load_checkpoint,
    load_nerf_synthetic,
    load_points,
    random_init,
    ring_cameras,
    save_checkpoint,
    save_nerf_synthetic,
    toy_scene,
)
from splatlm.render import render_images


def write_dataset(root, frames, size=(4, 3), fov=0.6911112070083618, split="train"):
    (root / split).mkdir(parents=True, exist_ok=True)
    out = []
    for i, (mat, shape) in enumerate(frames):
        w, h = shape or size
        Image.fromarray(np.full((h, w, 4), 255, dtype=np.uint8)).save(root / split / f"r_{i}.png")
        out.append({"file_path": f"./{split}/r_{i}", "transform_matrix": mat})
    (root / f"transforms_{split}.json").write_text(json.dumps({"camera_angle_x": fov, "frames": out}))


def test_blender_focal_length():
    assert focal_from_fov(0.6911112070083618, 800) == pytest.approx(1111.1110311937682, rel=1e-12)


def test_identity_pose_and_cardinality(tmp_path):
    write_dataset(tmp_path, [(np.eye(4).tolist(), None)] * 100)
    data = load_nerf_synthetic(tmp_path)
    assert len(data) == 100
    cam = data.cameras[0]
    assert np.allclose(cam.center, 0) and np.allclose(cam.forward, [0, 0, -1])
    assert cam.fx == pytest.approx(0.5 * 4 / np.tan(0.5 * 0.6911112070083618))
    assert (cam.cx, cam.cy) == (2.0, 1.5)


def test_rgba_composited_over_black(tmp_path):
    (tmp_path / "train").mkdir()
    rgba = np.zeros((2, 2, 4), dtype=np.uint8)
    rgba[..., 0] = 255
    rgba[..., 3] = [[255, 0], [51, 102]]
    Image.fromarray(rgba).save(tmp_path / "train" / "a.png")
    frames = [{"file_path": "./train/a.png", "transform_matrix": np.eye(4).tolist()}]
    (tmp_path / "transforms_train.json").write_text(json.dumps({"camera_angle_x": 0.5, "frames": frames}))
    img = load_nerf_synthetic(tmp_path).images[0]
    assert np.allclose(img[..., 0], [[1.0, 0.0], [0.2, 0.4]])
    assert not img[..., 1:].any()


def test_loader_errors(tmp_path):
    with pytest.raises(DatasetError, match="transforms_train.json"):
        load_nerf_synthetic(tmp_path)
    write_dataset(tmp_path, [(np.eye(4).tolist(), (4, 3)), (np.eye(4).tolist(), (5, 3))])
    with pytest.raises(DatasetError, match="differ in size"):
        load_nerf_synthetic(tmp_path)
    (tmp_path / "transforms_train.json").write_text("{not json")
    with pytest.raises(DatasetError):
        load_nerf_synthetic(tmp_path)


def test_dataset_round_trip(tmp_path):
    scene = toy_scene(count=5, num_train=3, num_test=1, size=16)
    save_nerf_synthetic(tmp_path, scene.train)
    back = load_nerf_synthetic(tmp_path, "train")
    for a, b in zip(scene.train.cameras, back.cameras):
        assert np.allclose(a.rotation, b.rotation) and np.allclose(a.translation, b.translation)
        assert a.fx == pytest.approx(b.fx)
    assert np.abs(back.images[0] - scene.train.images[0]).max() <= 0.5 / 255 + 1e-12


def test_random_init_properties():
    rng = np.random.default_rng(0)
    one = random_init(1, (-1, 1), rng)
    assert one.count == 1 and np.all(np.abs(one.means) <= 1)
    big = random_init(100_000, (-2.0, 3.0), np.random.default_rng(1))
    assert big.means.min() >= -2.0 and big.means.max() <= 3.0
    assert np.all(np.abs(big.colors) <= COLOR_COEFF_RANGE)
    assert np.allclose(big.opacities, 0.1)
    assert np.allclose(big.scales, 5.0 * 100_000 ** (-1 / 3) * 0.5)
    assert np.all(big.rotations == [1, 0, 0, 0])
    a = random_init(50, (-1, 1), np.random.default_rng(7))
    b = random_init(50, (-1, 1), np.random.default_rng(7))
    assert a.to_vector().tobytes() == b.to_vector().tobytes()
    with pytest.raises(ValueError):
        random_init(0)


def test_toy_scene_self_consistent():
    gt, data = generate_toy_scene(20, 8, (64, 64), np.random.default_rng(0))
    again = render_images(gt, data.cameras)
    assert all(np.array_equal(a, b) for a, b in zip(again, data.images))
    for img in data.images:
        assert np.mean(img.sum(axis=-1) > 0) >= 0.05
    with pytest.raises(ValueError):
        generate_toy_scene(0)


def test_toy_scene_with_explicit_cameras():
    cams = ring_cameras(3, 16, 16)
    gt, data = generate_toy_scene(4, cams, rng=np.random.default_rng(1))
    assert data.cameras == cams and gt.count == 4


def test_dataset_validation():
    with pytest.raises(ValueError):
        SceneDataset([ring_cameras(1)[0]], [])


def test_checkpoint_round_trip(tmp_path):
    gs = random_init(7, (-1, 1), np.random.default_rng(2))
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, gs, {"note": "t"})
    back = load_checkpoint(path)
    assert back.to_vector().tobytes() == gs.to_vector().tobytes()
    save_checkpoint(tmp_path / "y.ckpt", back)
    assert (tmp_path / "y.ckpt").read_bytes() == path.read_bytes()
    meta = json.loads((tmp_path / "x.ckpt.json").read_text())
    assert meta["count"] == 7 and meta["note"] == "t"


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(12))
    with pytest.raises(DatasetError, match="not a splatlm checkpoint"):
        load_checkpoint(bad)
    save_checkpoint(tmp_path / "t.ckpt", random_init(2, (-1, 1), np.random.default_rng(0)))
    data = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-8])
    with pytest.raises(DatasetError):
        load_checkpoint(tmp_path / "t.ckpt")
    with pytest.raises(DatasetError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_points_init(tmp_path):
    path = tmp_path / "pts.txt"
    path.write_text("0 0 0 255 0 0\n1 0 0 0 255 0\n0 1 0 0 0 255\n0 0 1 128 128 128\n")
    xyz, rgb = load_points(path)
    assert xyz.shape == (4, 3) and rgb.max() == 1.0
    gs = init_from_points(xyz, rgb)
    assert gs.count == 4
    assert np.allclose(0.5 + 0.28209479177387814 * gs.colors, rgb)
    assert np.all(np.isfinite(gs.log_scales))
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(DatasetError):
        load_points(tmp_path / "bad.txt")


def test_run_config_env_overrides():
    env = {"SPLATLM_ITERS": "7", "SPLATLM_DAMPING": "0.5", "SPLATLM_DETERMINISTIC": "yes", "SPLATLM_LOSS": "mse+ssim"}
    cfg = RunConfig(**RunConfig.env_defaults(env))
    assert (cfg.iters, cfg.damping, cfg.deterministic, cfg.loss) == (7, 0.5, True, "mse+ssim")
    assert RunConfig(pcg_iters="5").pcg_schedule() == (5, 5)
    with pytest.raises(ValueError):
        RunConfig(iters=0)


def read(path):
    return path.read_bytes()


def test_cli_train_deterministic(tmp_path):
    args = ["train", "--scene", "toy", "--optimizer", "lm", "--iters", "12", "--seed", "1", "--deterministic",
            "--eval-every", "5"]
    assert run_cli(args + ["--out", str(tmp_path / "a")], environ={}) == 0
    assert run_cli(args + ["--out", str(tmp_path / "b")], environ={}) == 0
    assert read(tmp_path / "a" / "metrics.csv") == read(tmp_path / "b" / "metrics.csv")
    assert read(tmp_path / "a" / "final.ckpt") == read(tmp_path / "b" / "final.ckpt")
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 13
    assert list((tmp_path / "a" / "renders").glob("*.png"))


def test_cli_adam_same_schema(tmp_path):
    assert run_cli(["train", "--optimizer", "adam", "--iters", "3", "--out", str(tmp_path)], environ={}) == 0
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1].split(",")[5:] == ["", "", ""]


def test_cli_eval_ground_truth_and_render(tmp_path):
    assert run_cli(["datagen", "--out", str(tmp_path / "data")]) == 0
    assert (tmp_path / "data" / "transforms_train.json").exists()
    ckpt = str(tmp_path / "data" / "ground_truth.ckpt")
    assert run_cli(["eval", "--scene", "toy", "--checkpoint", ckpt, "--out", str(tmp_path / "ev")], environ={}) == 0
    report = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert report["psnr"] == 100.0
    assert run_cli(["render", "--checkpoint", ckpt, "--out", str(tmp_path / "r")], environ={}) == 0
    assert len(list((tmp_path / "r").glob("*.png"))) == 4


def test_cli_bad_flags():
    assert run_cli(["train", "--optimizer", "newton"]) != 0
    assert run_cli(["frobnicate"]) != 0
    assert run_cli(["train", "--iters", "0"], environ={}) != 0


def test_cli_loads_dataset_directory(tmp_path):
    assert run_cli(["datagen", "--out", str(tmp_path / "data")]) == 0
    out = tmp_path / "run"
    code = run_cli(["train", "--scene", str(tmp_path / "data"), "--iters", "2", "--num-gaussians", "30",
                    "--out", str(out)], environ={})
    assert code == 0 and (out / "summary.json").exists()
