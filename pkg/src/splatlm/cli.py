"""Command-line entry point: train, eval, datagen, render."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .baselines import FirstOrderConfig, FirstOrderOptimizer, scene_extent
from .io import (
    DatasetError,
    RunConfig,
    SceneDataset,
    load_checkpoint,
    load_nerf_synthetic,
    random_init,
    save_checkpoint,
    save_nerf_synthetic,
    toy_scene,
    write_png,
)
from .metrics import evaluate
from .render import render_images
from .solver import LmConfig, LmOptimizer, batch_loss

CSV_HEADER = ["iter", "wall_ms", "train_loss", "test_psnr", "test_ssim", "eta", "pcg_iters", "breakdown"]
TOY_GAUSSIANS = 40
DEFAULT_GAUSSIANS = 10000


def load_scene(cfg: RunConfig):
    """(train, test, bounding cube) for ``--scene``: ``toy`` or a nerf_synthetic directory."""
    if cfg.scene == "toy":
        scene = toy_scene(seed=cfg.scene_seed)
        return scene.train, scene.test, (-1.0, 1.0)
    train = load_nerf_synthetic(cfg.scene, "train")
    try:
        test = load_nerf_synthetic(cfg.scene, "test")
    except DatasetError:
        test = SceneDataset([], [], "test")
    return train, test, (-1.5, 1.5)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _make_optimizer(cfg: RunConfig, init, train):
    if cfg.optimizer == "lm":
        lm_cfg = LmConfig(
            damping=cfg.damping,
            pcg_iters=cfg.pcg_schedule(),
            batch_sizes=(cfg.batch_size, cfg.batch_size),
            samples_per_tile=cfg.samples_per_tile,
            residual_dist=cfg.residual_dist,
            loss=cfg.loss,
        )
        return LmOptimizer(init, train.cameras, train.images, lm_cfg, seed=cfg.seed)
    fo_cfg = FirstOrderConfig(
        optimizer=cfg.optimizer,
        total_iters=cfg.iters,
        scene_extent=scene_extent(train.cameras),
        loss=cfg.loss,
    )
    return FirstOrderOptimizer(init, train.cameras, train.images, fo_cfg, seed=cfg.seed)


def train(cfg: RunConfig) -> dict:
    """Run an optimizer; writes metrics.csv, final.ckpt, test renders, and summary.json."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set, cube = load_scene(cfg)
    count = cfg.num_gaussians or (TOY_GAUSSIANS if cfg.scene == "toy" else DEFAULT_GAUSSIANS)
    init = random_init(count, cube, np.random.default_rng(cfg.seed))
    opt = _make_optimizer(cfg, init, train_set)
    eval_set = test_set if len(test_set) else train_set

    def test_metrics(it):
        rendered = render_images(opt.gaussians, eval_set.cameras)
        renders = out / "renders"
        renders.mkdir(exist_ok=True)
        for i, img in enumerate(rendered):
            write_png(renders / f"iter{it:05d}_view{i:02d}.png", img)
        return evaluate(rendered, eval_set.images)

    report = None
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for it in range(cfg.iters):
            start = time.perf_counter()
            step = opt.step()
            wall = None if cfg.deterministic else round(1000.0 * (time.perf_counter() - start), 3)
            last = it == cfg.iters - 1
            if last or (cfg.eval_every > 0 and (it + 1) % cfg.eval_every == 0):
                report = test_metrics(it + 1)
                psnr_v, ssim_v = report.psnr, report.ssim
            else:
                psnr_v = ssim_v = None
            lm = cfg.optimizer == "lm"
            writer.writerow([_fmt(v) for v in (
                it, wall, step.loss_before, psnr_v, ssim_v,
                step.eta if lm else None, step.pcg_iters if lm else None, step.breakdown if lm else None,
            )])

    final = opt.gaussians
    save_checkpoint(out / "final.ckpt", final, {"optimizer": cfg.optimizer, "iters": cfg.iters, "seed": cfg.seed})
    summary = {
        "config": asdict(cfg),
        "train_loss": batch_loss(render_images(final, train_set.cameras), train_set.images),
        "test": report.as_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def _eval_images(cfg: RunConfig, checkpoint):
    train_set, test_set, _ = load_scene(cfg)
    data = test_set if len(test_set) else train_set
    gaussians = load_checkpoint(checkpoint)
    return data, render_images(gaussians, data.cameras)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatlm", description="Levenberg-Marquardt Gaussian splatting")
    sub = parser.add_subparsers(dest="command", required=True)

    def scene_args(p):
        p.add_argument("--scene", default=argparse.SUPPRESS, help="'toy' or a nerf_synthetic directory")
        p.add_argument("--scene-seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--out", default=argparse.SUPPRESS)

    t = sub.add_parser("train", help="optimize a scene and write metrics.csv plus a checkpoint")
    scene_args(t)
    t.add_argument("--optimizer", choices=["lm", "adam", "rmsprop", "sgd"], default=argparse.SUPPRESS)
    t.add_argument("--iters", type=int, default=argparse.SUPPRESS)
    t.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    t.add_argument("--samples-per-tile", type=int, default=argparse.SUPPRESS)
    t.add_argument("--damping", type=float, default=argparse.SUPPRESS)
    t.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    t.add_argument("--pcg-iters", default=argparse.SUPPRESS, help="N or N,M (M used after iteration 50)")
    t.add_argument("--residual-dist", choices=["uniform", "residual", "gaussian"], default=argparse.SUPPRESS)
    t.add_argument("--loss", choices=["mse", "mse+ssim"], default=argparse.SUPPRESS)
    t.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS)
    t.add_argument("--eval-every", type=int, default=argparse.SUPPRESS)
    t.add_argument("--num-gaussians", type=int, default=argparse.SUPPRESS)

    e = sub.add_parser("eval", help="score a checkpoint on the test split")
    scene_args(e)
    e.add_argument("--checkpoint", required=True)

    d = sub.add_parser("datagen", help="write the toy scene as a nerf_synthetic directory")
    d.add_argument("--out", required=True)
    d.add_argument("--scene-seed", type=int, default=0)

    r = sub.add_parser("render", help="render a checkpoint from the test cameras")
    scene_args(r)
    r.add_argument("--checkpoint", required=True)
    return parser


def run_cli(argv=None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    opts = vars(args)
    command = opts.pop("command")
    checkpoint = opts.pop("checkpoint", None)
    try:
        if command == "datagen":
            scene = toy_scene(seed=opts["scene_seed"])
            out = Path(opts["out"])
            save_nerf_synthetic(out, scene.train)
            save_nerf_synthetic(out, scene.test)
            save_checkpoint(out / "ground_truth.ckpt", scene.gt, {"scene_seed": opts["scene_seed"]})
            return 0
        cfg = RunConfig(**{**RunConfig.env_defaults(environ), **opts})
        if command == "train":
            summary = train(cfg)
            print(json.dumps(summary["test"]))
        elif command == "eval":
            data, rendered = _eval_images(cfg, checkpoint)
            report = evaluate(rendered, data.images)
            Path(cfg.out).mkdir(parents=True, exist_ok=True)
            (Path(cfg.out) / "metrics.json").write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True))
            print(json.dumps(report.as_dict()))
        elif command == "render":
            _, rendered = _eval_images(cfg, checkpoint)
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(rendered):
                write_png(out / f"view{i:02d}.png", img)
    except (DatasetError, ValueError, FloatingPointError) as exc:
        print(f"splatlm {command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
