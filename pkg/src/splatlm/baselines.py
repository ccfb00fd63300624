"""First-order reference optimizers sharing one full-image gradient path."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Linearization
from .core import PARAM_GROUPS, GaussianSet, group_mask
from .metrics import SSIM_LOSS_WEIGHT, ssim_diag_residuals
from .render import render_images
from .sampling import full_plan
from .solver import batch_loss

OPTIMIZERS = ("adam", "rmsprop", "sgd")

# per-group learning rates; Adam values follow common 3DGS defaults
ADAM_LRS = {"mean": 1.6e-4, "scale": 5e-3, "rotation": 1e-3, "opacity": 0.05, "color": 2.5e-3}
RMSPROP_LRS = dict(ADAM_LRS)
SGD_LRS = {"mean": 0.16, "scale": 0.1, "rotation": 0.1, "opacity": 0.1, "color": 0.2}
DEFAULT_LRS = {"adam": ADAM_LRS, "rmsprop": RMSPROP_LRS, "sgd": SGD_LRS}


def lr_vector(count: int, lrs: dict) -> np.ndarray:
    """Expand per-group learning rates onto the flat parameter layout."""
    out = np.zeros(14 * count)
    for group in PARAM_GROUPS:
        out[group_mask(count, group)] = lrs[group]
    return out


def mean_lr_factor(step: int, total: int, final_ratio: float = 0.01) -> float:
    """Log-linear decay of the mean learning rate from 1 to ``final_ratio`` over ``total`` steps."""
    if total <= 1:
        return 1.0
    t = min(max(step / (total - 1), 0.0), 1.0)
    return float(final_ratio**t)


@dataclass
class FirstOrderState:
    """Accumulators of one first-order run; ``m``/``v`` are unused by some rules."""

    params: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    decay: float = 0.99
    momentum: float = 0.99

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).copy()
        if self.m is None:
            self.m = np.zeros_like(self.params)
        if self.v is None:
            self.v = np.zeros_like(self.params)


def adam_step(state: FirstOrderState, grad, lrs) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    state.params = state.params - lrs * m_hat / (np.sqrt(v_hat) + state.eps)
    return state.params


def rmsprop_step(state: FirstOrderState, grad, lrs) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    state.step += 1
    state.v = state.decay * state.v + (1 - state.decay) * grad * grad
    state.params = state.params - lrs * grad / (np.sqrt(state.v) + state.eps)
    return state.params


def sgd_momentum_step(state: FirstOrderState, grad, lrs) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    state.step += 1
    state.m = state.momentum * state.m - lrs * grad
    state.params = state.params + state.m
    return state.params


STEP_RULES = {"adam": adam_step, "rmsprop": rmsprop_step, "sgd": sgd_momentum_step}


def loss_and_gradient(gaussians: GaussianSet, cams, images, loss: str = "mse",
                      ssim_weight: float = SSIM_LOSS_WEIGHT):
    """Exact loss over every pixel of ``cams`` and its gradient (vjp with weights 2/M)."""
    gt = [np.asarray(img, dtype=np.float64) for img in images]
    lin = Linearization(gaussians, cams, full_plan(cams))
    r = lin.residuals(gt).reshape(-1, 3)
    total = lin.num_residuals
    value = float(np.sum(r**2))
    u = r
    if loss == "mse+ssim":
        sizes = np.cumsum([c.width * c.height for c in cams])[:-1]
        rendered = [img.reshape(c.height, c.width, 3) for img, c in zip(np.split(lin.rendered, sizes), cams)]
        s, ds = zip(*(ssim_diag_residuals(img, g) for img, g in zip(rendered, gt)))
        s, ds = lin.gather(s), lin.gather(ds)
        value += ssim_weight * float(np.sum(s**2))
        u = r + ssim_weight * s * ds
    return value / total, lin.vjp(2.0 * u / total)


def full_gradient(gaussians: GaussianSet, cams, images, loss: str = "mse",
                  ssim_weight: float = SSIM_LOSS_WEIGHT) -> np.ndarray:
    return loss_and_gradient(gaussians, cams, images, loss, ssim_weight)[1]


@dataclass
class FirstOrderConfig:
    optimizer: str = "adam"
    lrs: dict = field(default_factory=dict)
    batch_size: int = 1
    total_iters: int = 2000
    mean_decay_ratio: float = 0.01
    scene_extent: float = 1.0
    loss: str = "mse"
    ssim_weight: float = SSIM_LOSS_WEIGHT

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        self.lrs = {**DEFAULT_LRS[self.optimizer], **self.lrs}


@dataclass
class FirstOrderReport:
    iteration: int
    loss_before: float
    cameras: np.ndarray


def scene_extent(cams) -> float:
    """1.1 times the largest camera distance from the camera centroid."""
    centers = np.array([c.center for c in cams])
    return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))


class FirstOrderOptimizer:
    """Stochastic first-order loop drawing ``batch_size`` random cameras per step."""

    def __init__(self, gaussians: GaussianSet, cams, images, cfg: FirstOrderConfig | None = None, seed: int = 0):
        self.cams = list(cams)
        self.images = list(images)
        self.cfg = cfg or FirstOrderConfig()
        self.rng = np.random.default_rng(seed)
        self.state = FirstOrderState(gaussians.to_vector())
        self.count = gaussians.count
        self.iteration = 0
        self._base_lrs = lr_vector(self.count, self.cfg.lrs)
        self._mean_mask = group_mask(self.count, "mean")
        if self.cfg.optimizer != "sgd":
            self._base_lrs[self._mean_mask] *= self.cfg.scene_extent

    @property
    def gaussians(self) -> GaussianSet:
        return GaussianSet.from_vector(self.state.params)

    def current_lrs(self) -> np.ndarray:
        lrs = self._base_lrs.copy()
        lrs[self._mean_mask] *= mean_lr_factor(self.iteration, self.cfg.total_iters, self.cfg.mean_decay_ratio)
        return lrs

    def step(self) -> FirstOrderReport:
        k = min(self.cfg.batch_size, len(self.cams))
        batch = self.rng.choice(len(self.cams), size=k, replace=False)
        loss, grad = loss_and_gradient(
            self.gaussians, [self.cams[i] for i in batch], [self.images[i] for i in batch],
            self.cfg.loss, self.cfg.ssim_weight,
        )
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at iteration {self.iteration}")
        STEP_RULES[self.cfg.optimizer](self.state, grad, self.current_lrs())
        self.state.params = self.gaussians.normalized().to_vector()
        self.iteration += 1
        return FirstOrderReport(self.iteration - 1, loss, batch)


def train_loss(gaussians: GaussianSet, cams, images, loss: str = "mse") -> float:
    """Exact loss over all pixels of all given cameras."""
    return batch_loss(render_images(gaussians, cams), [np.asarray(i, dtype=np.float64) for i in images], loss)
