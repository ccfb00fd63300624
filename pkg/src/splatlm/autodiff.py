"""Matrix-free Jacobian products restricted to the pixels of a sample plan.

J is the Jacobian of the sampled residuals (rendered - ground truth, one row
per pixel channel, pixel-major) with respect to the raw parameter vector.

* ``jvp``  - forward mode: the renderer is re-run on dual numbers.
* ``vjp``  - reverse mode: hand-written backward pass through blending
             and then through projection/covariance construction.
* ``jtj_diag`` - importance-weighted column sums of squared derivatives.

Per-sample weights are never folded into J; they enter as a diagonal W
between the two products (``gn_apply`` = J^T W J p + lambda p).
"""

from __future__ import annotations

import numpy as np

from . import dual as dl
from .core import PARAMS_PER_GAUSSIAN, SH_C0, GaussianSet
from .render import (
    BlendGates,
    SplatTable,
    bin_splats,
    blend,
    pixel_tiles,
    preprocess,
)
from .sampling import SamplePlan

GEOMETRY_PARAMS = 11  # mean, log_scale, rotation, opacity
_PAIRS = [(a, b) for a in range(6) for b in range(a, 6)]


def _rotations(qh: np.ndarray) -> np.ndarray:
    w, x, y, z = qh.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def preprocess_vjp(rows: np.ndarray, cam, grad_geometry: np.ndarray, grad_color: np.ndarray,
                   color_mask: np.ndarray) -> np.ndarray:
    """Pull screen-space gradients back to the (G, 14) raw parameters.

    ``grad_geometry`` columns are d/d(mean_x, mean_y, conic_a, conic_b,
    conic_c, opacity); ``grad_color`` is d/d(rendered channel).
    """
    g_mx, g_my, g_a, g_b, g_c, g_o = grad_geometry.T
    q = rows[:, 6:10]
    qn = np.linalg.norm(q, axis=1)
    qh = q / qn[:, None]
    rot = _rotations(qh)
    s = np.exp(rows[:, 3:6])
    m = rot * s[:, None, :]
    sigma = m @ m.transpose(0, 2, 1)
    w = cam.rotation
    t = rows[:, 0:3] @ w.T + cam.translation
    tx, ty, tz = t.T
    tz = np.where(tz > cam.near_clip, tz, 1.0)
    fx, fy = cam.fx, cam.fy
    zero = np.zeros_like(tz)
    jac = np.stack([
        np.stack([fx / tz, zero, -fx * tx / tz**2], -1),
        np.stack([zero, fy / tz, -fy * ty / tz**2], -1),
    ], axis=1)
    v = w @ sigma @ w.T
    cov = jac @ v @ jac.transpose(0, 2, 1) + 0.3 * np.eye(2)
    conic = np.linalg.inv(cov)

    g_conic = np.stack([np.stack([g_a, 0.5 * g_b], -1), np.stack([0.5 * g_b, g_c], -1)], axis=1)
    g_cov = -conic @ g_conic @ conic
    g_v = jac.transpose(0, 2, 1) @ g_cov @ jac
    g_jac = 2.0 * g_cov @ jac @ v
    g_sigma = w.T @ g_v @ w

    g_tx = -fx / tz**2 * g_jac[:, 0, 2] + fx / tz * g_mx
    g_ty = -fy / tz**2 * g_jac[:, 1, 2] + fy / tz * g_my
    g_tz = (
        -fx / tz**2 * g_jac[:, 0, 0] + 2 * fx * tx / tz**3 * g_jac[:, 0, 2]
        - fy / tz**2 * g_jac[:, 1, 1] + 2 * fy * ty / tz**3 * g_jac[:, 1, 2]
        - fx * tx / tz**2 * g_mx - fy * ty / tz**2 * g_my
    )
    g_mean = np.stack([g_tx, g_ty, g_tz], -1) @ w

    g_m = 2.0 * g_sigma @ m
    g_scale = np.einsum("gij,gij->gj", g_m, rot) * s
    gr = g_m * s[:, None, :]
    qw, qx, qy, qz = qh.T
    g_qh = 2.0 * np.stack([
        -qz * gr[:, 0, 1] + qy * gr[:, 0, 2] + qz * gr[:, 1, 0] - qx * gr[:, 1, 2] - qy * gr[:, 2, 0] + qx * gr[:, 2, 1],
        qy * gr[:, 0, 1] + qz * gr[:, 0, 2] + qy * gr[:, 1, 0] - 2 * qx * gr[:, 1, 1] - qw * gr[:, 1, 2]
        + qz * gr[:, 2, 0] + qw * gr[:, 2, 1] - 2 * qx * gr[:, 2, 2],
        -2 * qy * gr[:, 0, 0] + qx * gr[:, 0, 1] + qw * gr[:, 0, 2] + qx * gr[:, 1, 0] + qz * gr[:, 1, 2]
        - qw * gr[:, 2, 0] + qz * gr[:, 2, 1] - 2 * qy * gr[:, 2, 2],
        -2 * qz * gr[:, 0, 0] - qw * gr[:, 0, 1] + qx * gr[:, 0, 2] + qw * gr[:, 1, 0] - 2 * qz * gr[:, 1, 1]
        + qy * gr[:, 1, 2] + qx * gr[:, 2, 0] + qy * gr[:, 2, 1],
    ], -1)
    g_q = (g_qh - qh * np.sum(qh * g_qh, axis=1, keepdims=True)) / qn[:, None]

    op = 1.0 / (1.0 + np.exp(-rows[:, 10]))
    out = np.zeros((len(rows), PARAMS_PER_GAUSSIAN))
    out[:, 0:3] = g_mean
    out[:, 3:6] = g_scale
    out[:, 6:10] = g_q
    out[:, 10] = g_o * op * (1.0 - op)
    out[:, 11:14] = grad_color * SH_C0 * color_mask
    return out


def geometry_jacobian(rows: np.ndarray, cam, frozen) -> np.ndarray:
    """(G, 6, 11) derivatives of (mean2d, conic, opacity) w.r.t. geometry params, by dual probes."""
    g = len(rows)
    out = np.zeros((g, 6, GEOMETRY_PARAMS))
    for k in range(GEOMETRY_PARAMS):
        tangent = np.zeros_like(rows)
        tangent[:, k] = 1.0
        sp = preprocess(dl.Dual(rows, tangent), cam, frozen=frozen)
        for a, val in enumerate(sp.geometry()):
            out[:, a, k] = dl.tangent(val)
    return out


class Linearization:
    """Frozen forward state of the sampled residuals at one parameter point.

    Depth order, culling, and alpha gates are fixed here; every product
    evaluated through this object differentiates the same gated function.
    """

    def __init__(self, gaussians: GaussianSet, cams, plan: SamplePlan):
        self.gaussians = gaussians
        self.rows = gaussians.to_matrix()
        self.count = gaussians.count
        self.plan = plan
        self.cams = [cams[v.camera_index] for v in plan.views]
        self.splats = []
        gidx_parts, px, py = [], [], []
        for vi, (view, cam) in enumerate(zip(plan.views, self.cams)):
            sp = preprocess(self.rows, cam)
            self.splats.append(sp)
            table = bin_splats(sp, cam).padded()
            xs, ys = view.pixels[:, 0], view.pixels[:, 1]
            lists = table[pixel_tiles(xs, ys, cam)]
            gidx_parts.append(np.where(lists >= 0, lists + vi * self.count, -1))
            px.append(xs + 0.5)
            py.append(ys + 0.5)
        width = max((p.shape[1] for p in gidx_parts), default=0)
        self.gidx = (
            np.concatenate([np.pad(p, ((0, 0), (0, width - p.shape[1])), constant_values=-1) for p in gidx_parts])
            if gidx_parts else np.zeros((0, 0), dtype=np.int64)
        )
        self.px = np.concatenate(px) if px else np.zeros(0)
        self.py = np.concatenate(py) if py else np.zeros(0)
        self.weights = plan.weights
        self.num_entries = len(self.splats) * self.count
        if self.splats:
            self.result = blend(SplatTable.concat(self.splats), self.gidx, self.px, self.py)
        else:
            empty = np.zeros((0, 0), dtype=bool)
            self.result = None
            self._gates = BlendGates(empty, empty)
        self._geo_jac = None

    @property
    def num_samples(self) -> int:
        return len(self.px)

    @property
    def num_residuals(self) -> int:
        return 3 * self.num_samples

    @property
    def num_params(self) -> int:
        return PARAMS_PER_GAUSSIAN * self.count

    @property
    def rendered(self) -> np.ndarray:
        if self.result is None:
            return np.zeros((0, 3))
        return self.result.rgb

    def gather(self, images) -> np.ndarray:
        """(n, 3) values of per-camera images (indexed like the plan) at the samples."""
        parts = []
        for view in self.plan.views:
            img = np.asarray(images[view.camera_index])
            parts.append(img[view.pixels[:, 1], view.pixels[:, 0]])
        return np.concatenate(parts) if parts else np.zeros((0, 3))

    def residuals(self, gt_images) -> np.ndarray:
        """Sampled residual vector (length 3n), rendered - ground truth."""
        return (self.rendered - self.gather(gt_images)).reshape(-1)

    # -- forward mode -----------------------------------------------------

    def jvp(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.num_params,):
            raise ValueError(f"expected tangent of length {self.num_params}, got {v.shape}")
        if self.result is None:
            return np.zeros(0)
        rows = dl.Dual(self.rows, v.reshape(self.count, PARAMS_PER_GAUSSIAN))
        splats = [preprocess(rows, cam, frozen=sp) for cam, sp in zip(self.cams, self.splats)]
        res = blend(SplatTable.concat(splats), self.gidx, self.px, self.py, gates=self.result.gates)
        return np.stack([dl.tangent(c) for c in res.rgb], axis=1).reshape(-1)

    # -- reverse mode -----------------------------------------------------

    def _pixel_partials(self):
        """Per (pixel, slot): d rgb / d alpha (P, L, 3) and d alpha / d geometry (P, L, 6)."""
        if hasattr(self, "_partials"):
            return self._partials
        c = self.result.cache
        gates = self.result.gates
        alpha, t_before, weight = c["alpha"], c["t_before"], c["weight"]
        colors = c["colors"]
        contrib = weight[..., None] * colors
        later = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1]
        later = np.concatenate([later[:, 1:], np.zeros_like(later[:, :1])], axis=1)
        d_alpha = t_before[..., None] * colors - later / (1.0 - alpha)[..., None]
        d_alpha = np.where(gates.active[..., None], d_alpha, 0.0)

        free = gates.active & ~gates.clamped
        ca, cb, cc = c["conic"]
        dx, dy = c["dx"], c["dy"]
        da_dp = np.where(free, alpha, 0.0)
        h = np.stack([
            -da_dp * (ca * dx + cb * dy),
            -da_dp * (cb * dx + cc * dy),
            -0.5 * da_dp * dx * dx,
            -da_dp * dx * dy,
            -0.5 * da_dp * dy * dy,
            np.where(free, c["falloff"], 0.0),
        ], axis=-1)
        self._partials = (d_alpha, h)
        return self._partials

    def _scatter(self, values: np.ndarray) -> np.ndarray:
        """Sum (P, L, k) per-slot values into (entries, k) by table index."""
        gi = self.result.cache["gi"].ravel()
        flat = values.reshape(len(gi), -1)
        return np.stack(
            [np.bincount(gi, weights=flat[:, j], minlength=self.num_entries) for j in range(flat.shape[1])],
            axis=1,
        )

    def _pull_back(self, grad_geo: np.ndarray, grad_color: np.ndarray) -> np.ndarray:
        out = np.zeros((self.count, PARAMS_PER_GAUSSIAN))
        g = self.count
        for vi, (cam, sp) in enumerate(zip(self.cams, self.splats)):
            sl = slice(vi * g, (vi + 1) * g)
            out += preprocess_vjp(self.rows, cam, grad_geo[sl], grad_color[sl], sp.color_mask)
        return out.reshape(-1)

    def vjp(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.size != self.num_residuals:
            raise ValueError(f"expected {self.num_residuals} residual weights, got {u.size}")
        if self.result is None or self.gidx.shape[1] == 0:
            return np.zeros(self.num_params)
        u = u.reshape(-1, 3)
        d_alpha, h = self._pixel_partials()
        g_alpha = np.einsum("plc,pc->pl", d_alpha, u)
        weight = self.result.cache["weight"]
        grad_geo = self._scatter(g_alpha[..., None] * h)
        grad_color = self._scatter(weight[..., None] * u[:, None, :])
        return self._pull_back(grad_geo, grad_color)

    # -- Gauss-Newton quantities -------------------------------------------

    def geometry_jacobians(self) -> np.ndarray:
        if self._geo_jac is None:
            self._geo_jac = np.concatenate(
                [geometry_jacobian(self.rows, cam, sp) for cam, sp in zip(self.cams, self.splats)]
            ) if self.splats else np.zeros((0, 6, GEOMETRY_PARAMS))
        return self._geo_jac

    def jtj_diag(self, residual_scale=None) -> np.ndarray:
        """diag(J^T W J) with W the plan's importance weights (times ``residual_scale``)."""
        if self.result is None or self.gidx.shape[1] == 0:
            return np.zeros(self.num_params)
        d_alpha, h = self._pixel_partials()
        w = np.broadcast_to(self.weights[:, None], (self.num_samples, 3))
        if residual_scale is not None:
            w = w * np.asarray(residual_scale).reshape(-1, 3)
        s_alpha = np.einsum("plc,pc->pl", d_alpha**2, w)
        pairs = np.stack([s_alpha * h[..., a] * h[..., b] for a, b in _PAIRS], axis=-1)
        packed = self._scatter(pairs)
        hess = np.zeros((self.num_entries, 6, 6))
        for k, (a, b) in enumerate(_PAIRS):
            hess[:, a, b] = packed[:, k]
            hess[:, b, a] = packed[:, k]
        jac = self.geometry_jacobians()
        geo = np.einsum("eaj,eab,ebj->ej", jac, hess, jac)
        weight = self.result.cache["weight"]
        color = self._scatter(weight[..., None] ** 2 * w[:, None, :])

        out = np.zeros((self.count, PARAMS_PER_GAUSSIAN))
        g = self.count
        for vi, sp in enumerate(self.splats):
            sl = slice(vi * g, (vi + 1) * g)
            out[:, :GEOMETRY_PARAMS] += geo[sl]
            out[:, 11:14] += color[sl] * (SH_C0 * sp.color_mask) ** 2
        return out.reshape(-1)

    def gn_apply(self, p: np.ndarray, damping: float, residual_scale=None) -> np.ndarray:
        """(J^T W J + damping I) p; ``residual_scale`` multiplies W per residual."""
        jp = self.jvp(p).reshape(-1, 3) * self.weights[:, None]
        if residual_scale is not None:
            jp = jp * np.asarray(residual_scale).reshape(-1, 3)
        return self.vjp(jp) + damping * p


def jvp(gaussians: GaussianSet, cams, plan: SamplePlan, v) -> np.ndarray:
    return Linearization(gaussians, cams, plan).jvp(v)


def vjp(gaussians: GaussianSet, cams, plan: SamplePlan, u) -> np.ndarray:
    return Linearization(gaussians, cams, plan).vjp(u)


def jtj_diag(gaussians: GaussianSet, cams, plan: SamplePlan) -> np.ndarray:
    return Linearization(gaussians, cams, plan).jtj_diag()


def gn_apply(gaussians: GaussianSet, cams, plan: SamplePlan, damping: float, p) -> np.ndarray:
    if damping < 0:
        raise ValueError("damping must be non-negative")
    return Linearization(gaussians, cams, plan).gn_apply(np.asarray(p, dtype=np.float64), damping)
