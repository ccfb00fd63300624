"""Levenberg-Marquardt with a matrix-free, Jacobi-preconditioned CG inner solve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Linearization
from .core import GaussianSet, group_mask
from .metrics import SSIM_LOSS_WEIGHT, ssim_diag_residuals
from .render import render_full
from .sampling import build_sample_plan, camera_features, kmeans_cameras, sample_view_batch

LOSSES = ("mse", "mse+ssim")


@dataclass
class LmConfig:
    damping: float = 0.1
    pcg_iters: tuple = (3, 8)  # (initial, after schedule_switch)
    batch_sizes: tuple = (8, 8)  # (initial, after schedule_switch)
    schedule_switch: int = 50
    samples_per_tile: int = 32
    residual_dist: str = "uniform"
    lane_width: int = 32
    lr_cap: float = 0.2
    warmup_lr: float = 0.05
    warmup_iters: int = 10
    loss: str = "mse"
    ssim_weight: float = SSIM_LOSS_WEIGHT
    kmeans_seed: int = 0

    def __post_init__(self):
        self.pcg_iters = tuple(int(x) for x in np.broadcast_to(self.pcg_iters, 2))
        self.batch_sizes = tuple(int(x) for x in np.broadcast_to(self.batch_sizes, 2))
        if not self.damping > 0:
            raise ValueError(f"damping must be > 0, got {self.damping}")
        if min(self.pcg_iters) < 1:
            raise ValueError("pcg_iters must be >= 1")
        if min(self.batch_sizes) < 1:
            raise ValueError("batch size must be >= 1")
        if not self.lr_cap > 0:
            raise ValueError("lr_cap must be > 0")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")

    def pcg_iters_at(self, iteration: int) -> int:
        return self.pcg_iters[0] if iteration < self.schedule_switch else self.pcg_iters[1]

    def batch_size_at(self, iteration: int) -> int:
        return self.batch_sizes[0] if iteration < self.schedule_switch else self.batch_sizes[1]


@dataclass
class PcgWorkspace:
    """The solver vectors of one PCG solve."""

    x: np.ndarray
    r: np.ndarray
    z: np.ndarray
    p: np.ndarray
    u: np.ndarray
    minv: np.ndarray
    rz: float

    @classmethod
    def start(cls, b: np.ndarray, minv: np.ndarray) -> "PcgWorkspace":
        r = b.copy()
        z = minv * r
        return cls(np.zeros_like(b), r, z, z.copy(), np.zeros_like(b), minv, float(r @ z))


@dataclass
class PcgResult:
    x: np.ndarray
    iterations: int
    breakdown: bool
    residual_norm: float
    # quadratic model 0.5 x^T A x - b^T x after each iteration (index 0: x = 0)
    model_values: list = field(default_factory=list)


def pcg_solve(apply, b, minv, iters: int, record: bool = False) -> PcgResult:
    """Preconditioned CG on A x = b from x = 0 for at most ``iters`` iterations."""
    b = np.asarray(b, dtype=np.float64)
    minv = np.asarray(minv, dtype=np.float64)
    if not np.all(np.isfinite(minv)) or np.any(minv <= 0):
        raise ValueError("preconditioner entries must be finite and > 0")
    ws = PcgWorkspace.start(b, minv)
    b_norm = float(np.linalg.norm(b))
    models = [0.0] if record else []
    done, breakdown = 0, False
    for _ in range(iters):
        if np.linalg.norm(ws.r) <= 1e-12 * b_norm or b_norm == 0:
            break
        ws.u = apply(ws.p)
        pu = float(ws.p @ ws.u)
        if not pu > 0:
            breakdown = True
            break
        step = ws.rz / pu
        ws.x = ws.x + step * ws.p
        ws.r = ws.r - step * ws.u
        ws.z = ws.minv * ws.r
        rz_new = float(ws.r @ ws.z)
        ws.p = ws.z + (rz_new / ws.rz) * ws.p
        ws.rz = rz_new
        done += 1
        if record:
            # b - A x = r, so 0.5 x^T A x - b^T x = -0.5 x^T (b + r)
            models.append(float(-0.5 * ws.x @ (b + ws.r)))
    return PcgResult(ws.x, done, breakdown, float(np.linalg.norm(ws.r)), models)


def learning_rate(delta, iteration: int, cfg: LmConfig) -> float:
    """Step size from the largest color-coefficient change of the update."""
    if iteration < cfg.warmup_iters:
        return cfg.warmup_lr
    delta = np.asarray(delta, dtype=np.float64)
    mask = group_mask(delta.size // 14, "color")
    m = float(np.max(np.abs(delta[mask]), initial=0.0))
    if m == 0:
        return cfg.lr_cap
    if m > 1:
        return min(cfg.lr_cap, 1.0 / m)
    return min(cfg.lr_cap, 1.0)


@dataclass
class StepReport:
    iteration: int
    loss_before: float
    loss_after: float
    eta: float
    pcg_iters: int
    breakdown: bool
    cameras: np.ndarray


def batch_loss(images, gt_images, loss: str = "mse", ssim_weight: float = SSIM_LOSS_WEIGHT) -> float:
    """Mean squared residual over images, plus the weighted SSIM residual term."""
    total, count = 0.0, 0
    for img, gt in zip(images, gt_images):
        r = img - gt
        sq = np.sum(r**2)
        if loss == "mse+ssim":
            s, _ = ssim_diag_residuals(img, gt)
            sq += ssim_weight * np.sum(s**2)
        total += float(sq)
        count += r.size
    return total / count


def _build_plan(cfg, cams, renders, gt, rng):
    residual_maps = contrib_maps = None
    if cfg.residual_dist == "residual":
        residual_maps = [out.image - g for out, g in zip(renders, gt)]
    elif cfg.residual_dist in ("gaussian", "gaussian_count"):
        contrib_maps = [out.contrib_count for out in renders]
    dist = "gaussian_count" if cfg.residual_dist == "gaussian" else cfg.residual_dist
    return build_sample_plan(cams, cfg.samples_per_tile, dist, rng, residual_maps, contrib_maps, cfg.lane_width)


def lm_step(gaussians: GaussianSet, cams, images, cfg: LmConfig, iteration: int,
            rng: np.random.Generator, clusters=None, report_after: bool = True):
    """One damped Gauss-Newton step on a sampled view batch.

    Returns (updated GaussianSet, StepReport). ``clusters`` defaults to a
    k-means partition of ``cams`` with k = the scheduled batch size.
    """
    if clusters is None:
        k = min(cfg.batch_size_at(iteration), len(cams))
        clusters = kmeans_cameras(camera_features(cams), k, seed=cfg.kmeans_seed)
    batch = sample_view_batch(clusters, rng)
    bcams = [cams[i] for i in batch]
    bgt = [np.asarray(images[i], dtype=np.float64) for i in batch]

    renders = [render_full(gaussians, cam) for cam in bcams]
    loss_before = batch_loss([o.image for o in renders], bgt, cfg.loss, cfg.ssim_weight)
    if not np.isfinite(loss_before):
        raise FloatingPointError(f"non-finite loss {loss_before} at iteration {iteration}")

    plan = _build_plan(cfg, bcams, renders, bgt, rng)
    lin = Linearization(gaussians, bcams, plan)
    r = lin.residuals(bgt).reshape(-1, 3)
    scale = None
    if cfg.loss == "mse+ssim":
        s, ds = zip(*(ssim_diag_residuals(o.image, g) for o, g in zip(renders, bgt)))
        s, ds = lin.gather(s), lin.gather(ds)
        # stacked residuals [r; sqrt(w) s] with Jacobian [J; sqrt(w) diag(ds) J]
        r = r + cfg.ssim_weight * ds * s
        scale = 1.0 + cfg.ssim_weight * ds**2

    w = lin.weights[:, None] * (1.0 if scale is None else scale)
    b = -lin.vjp(lin.weights[:, None] * r)
    minv = 1.0 / (lin.jtj_diag(scale) + cfg.damping)
    result = pcg_solve(
        lambda p: lin.vjp(w * lin.jvp(p).reshape(-1, 3)) + cfg.damping * p,
        b, minv, cfg.pcg_iters_at(iteration),
    )
    delta = result.x
    eta = learning_rate(delta, iteration, cfg)
    if result.breakdown:
        eta *= 0.5

    updated = GaussianSet.from_vector(gaussians.to_vector() + eta * delta).normalized()
    loss_after = float("nan")
    if report_after:
        loss_after = batch_loss([render_full(updated, c).image for c in bcams], bgt, cfg.loss, cfg.ssim_weight)
    report = StepReport(iteration, loss_before, loss_after, eta, result.iterations, result.breakdown, batch)
    return updated, report


class LmOptimizer:
    """Stateful LM loop; caches the camera clustering per batch size."""

    def __init__(self, gaussians: GaussianSet, cams, images, cfg: LmConfig | None = None, seed: int = 0):
        self.gaussians = gaussians
        self.cams = list(cams)
        self.images = list(images)
        self.cfg = cfg or LmConfig()
        self.rng = np.random.default_rng(seed)
        self.iteration = 0
        self._clusters = {}
        self._features = camera_features(self.cams)

    def clusters(self, k: int):
        k = min(k, len(self.cams))
        if k not in self._clusters:
            self._clusters[k] = kmeans_cameras(self._features, k, seed=self.cfg.kmeans_seed)
        return self._clusters[k]

    def step(self, report_after: bool = False) -> StepReport:
        clusters = self.clusters(self.cfg.batch_size_at(self.iteration))
        self.gaussians, report = lm_step(
            self.gaussians, self.cams, self.images, self.cfg, self.iteration, self.rng,
            clusters=clusters, report_after=report_after,
        )
        self.iteration += 1
        return report
