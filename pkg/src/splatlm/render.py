"""Tile-based forward rasterizer.

The same preprocessing and blending code runs on plain float arrays and on
:class:`~splatlm.dual.Dual` arrays, which is how Jacobian-vector products are
computed in :mod:`splatlm.autodiff`. All discrete decisions (culling, depth
order, alpha gates) are taken on real parts only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dual as dl
from .core import DILATION, EXTENT_SIGMAS, SH_C0, Camera, GaussianSet

TILE_SIZE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
# power below which a pixel lies outside the 3-sigma ellipse
MIN_POWER = -0.5 * EXTENT_SIGMAS**2


@dataclass
class Splats:
    """Per-Gaussian screen-space quantities for one camera.

    ``mean_x`` .. ``color`` may be plain arrays or duals of shape (G,);
    the bookkeeping fields are always plain arrays.
    """

    mean_x: object
    mean_y: object
    conic_a: object
    conic_b: object
    conic_c: object
    opacity: object
    color: tuple
    depth: np.ndarray
    extent: np.ndarray  # (G, 2) half-size of the 3-sigma bounding box
    visible: np.ndarray
    color_mask: np.ndarray  # (G, 3) True where the channel is not clamped

    @property
    def count(self) -> int:
        return len(self.depth)

    def geometry(self):
        return (self.mean_x, self.mean_y, self.conic_a, self.conic_b, self.conic_c, self.opacity)


def _rotation_entries(w, x, y, z):
    return [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]


def preprocess(rows, cam: Camera, frozen: Splats | None = None) -> Splats:
    """Project every Gaussian of a (G, 14) parameter array into ``cam``.

    ``rows`` may be a dual array; pass ``frozen`` (the plain-array result at
    the same point) to reuse its visibility and clamp decisions.
    """
    col = [rows[:, k] for k in range(14)]
    qw, qx, qy, qz = col[6:10]
    qn = dl.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    rot = _rotation_entries(qw / qn, qx / qn, qy / qn, qz / qn)
    scale = [dl.exp(col[3]), dl.exp(col[4]), dl.exp(col[5])]
    m = [[rot[i][j] * scale[j] for j in range(3)] for i in range(3)]
    sigma = [[None] * 3 for _ in range(3)]
    for i in range(3):
        for j in range(i, 3):
            sigma[i][j] = m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2]
            sigma[j][i] = sigma[i][j]

    w = cam.rotation
    t = [w[i, 0] * col[0] + w[i, 1] * col[1] + w[i, 2] * col[2] + cam.translation[i] for i in range(3)]
    # camera-space covariance W sigma W^T
    ws = [[w[i, 0] * sigma[0][j] + w[i, 1] * sigma[1][j] + w[i, 2] * sigma[2][j] for j in range(3)] for i in range(3)]
    v = [[None] * 3 for _ in range(3)]
    for i in range(3):
        for j in range(i, 3):
            v[i][j] = ws[i][0] * w[j, 0] + ws[i][1] * w[j, 1] + ws[i][2] * w[j, 2]
            v[j][i] = v[i][j]

    tz_real = dl.real(t[2])
    in_front = tz_real > cam.near_clip if frozen is None else frozen.visible
    tz = dl.where(in_front, t[2], 1.0)
    tx, ty = t[0], t[1]
    j00 = cam.fx / tz
    j02 = -cam.fx * tx / (tz * tz)
    j11 = cam.fy / tz
    j12 = -cam.fy * ty / (tz * tz)
    cov_a = j00 * j00 * v[0][0] + 2.0 * j00 * j02 * v[0][2] + j02 * j02 * v[2][2] + DILATION
    cov_b = j00 * j11 * v[0][1] + j00 * j12 * v[0][2] + j02 * j11 * v[1][2] + j02 * j12 * v[2][2]
    cov_c = j11 * j11 * v[1][1] + 2.0 * j11 * j12 * v[1][2] + j12 * j12 * v[2][2] + DILATION
    det = cov_a * cov_c - cov_b * cov_b
    mean_x = cam.fx * tx / tz + cam.cx
    mean_y = cam.fy * ty / tz + cam.cy

    if frozen is None:
        ext = EXTENT_SIGMAS * np.sqrt(np.abs(np.stack([dl.real(cov_a), dl.real(cov_c)], axis=1)))
        mx, my = dl.real(mean_x), dl.real(mean_y)
        on_image = (
            (mx + ext[:, 0] >= 0) & (my + ext[:, 1] >= 0)
            & (mx - ext[:, 0] <= cam.width) & (my - ext[:, 1] <= cam.height)
        )
        visible = in_front & on_image & (dl.real(det) > 0)
        ext[~visible] = 0.0
    else:
        ext, visible = frozen.extent, frozen.visible
    det = dl.where(visible, det, 1.0)

    opacity = 1.0 / (1.0 + dl.exp(-col[10]))
    raw = [0.5 + SH_C0 * col[11 + k] for k in range(3)]
    if frozen is None:
        color_mask = np.stack([dl.real(r) > 0 for r in raw], axis=1)
    else:
        color_mask = frozen.color_mask
    color = tuple(dl.where(color_mask[:, k], raw[k], 0.0) for k in range(3))

    return Splats(
        mean_x=mean_x,
        mean_y=mean_y,
        conic_a=cov_c / det,
        conic_b=-cov_b / det,
        conic_c=cov_a / det,
        opacity=opacity,
        color=color,
        depth=np.asarray(tz_real, dtype=np.float64),
        extent=ext,
        visible=np.asarray(visible, dtype=bool),
        color_mask=color_mask,
    )


@dataclass
class TileGrid:
    """Depth-sorted Gaussian index lists per 16x16 tile (row-major tiles)."""

    tiles_x: int
    tiles_y: int
    lists: list
    depths: list
    tile_size: int = TILE_SIZE

    @property
    def num_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def padded(self) -> np.ndarray:
        """(num_tiles, L) index table, -1 padded."""
        width = max((len(x) for x in self.lists), default=0)
        table = np.full((self.num_tiles, width), -1, dtype=np.int64)
        for i, items in enumerate(self.lists):
            table[i, : len(items)] = items
        return table


def tile_counts(width: int, height: int, tile_size: int = TILE_SIZE) -> tuple[int, int]:
    return -(-width // tile_size), -(-height // tile_size)


def depth_order(splats: Splats) -> np.ndarray:
    """Visible Gaussian indices by ascending depth, ties broken by index."""
    idx = np.flatnonzero(splats.visible)
    return idx[np.lexsort((idx, splats.depth[idx]))]


def bin_splats(splats: Splats, cam: Camera, tile_size: int = TILE_SIZE) -> TileGrid:
    tx, ty = tile_counts(cam.width, cam.height, tile_size)
    lists = [[] for _ in range(tx * ty)]
    mx, my = dl.real(splats.mean_x), dl.real(splats.mean_y)
    for g in depth_order(splats):
        ex, ey = splats.extent[g]
        x0 = max(int(np.floor((mx[g] - ex) / tile_size)), 0)
        x1 = min(int(np.floor((mx[g] + ex) / tile_size)), tx - 1)
        y0 = max(int(np.floor((my[g] - ey) / tile_size)), 0)
        y1 = min(int(np.floor((my[g] + ey) / tile_size)), ty - 1)
        for row in range(y0, y1 + 1):
            for c in range(x0, x1 + 1):
                lists[row * tx + c].append(g)
    lists = [np.asarray(x, dtype=np.int64) for x in lists]
    return TileGrid(tx, ty, lists, [splats.depth[x] for x in lists], tile_size)


def bin_and_sort(gaussians: GaussianSet, cam: Camera) -> TileGrid:
    return bin_splats(preprocess(gaussians.to_matrix(), cam), cam)


def pixel_tiles(xs: np.ndarray, ys: np.ndarray, cam: Camera, tile_size: int = TILE_SIZE) -> np.ndarray:
    tx, _ = tile_counts(cam.width, cam.height, tile_size)
    return (ys // tile_size) * tx + xs // tile_size


@dataclass
class SplatTable:
    """Screen-space quantities of many (camera, Gaussian) entries, flattened."""

    mean_x: object
    mean_y: object
    conic_a: object
    conic_b: object
    conic_c: object
    opacity: object
    color: tuple

    @classmethod
    def concat(cls, splats: list[Splats]) -> "SplatTable":
        def cat(items):
            if any(isinstance(it, dl.Dual) for it in items):
                return dl.Dual(
                    np.concatenate([dl.real(it) for it in items]),
                    np.concatenate([dl.tangent(it) for it in items]),
                )
            return np.concatenate(items)

        names = ("mean_x", "mean_y", "conic_a", "conic_b", "conic_c", "opacity")
        fields = {n: cat([getattr(s, n) for s in splats]) for n in names}
        fields["color"] = tuple(cat([s.color[k] for s in splats]) for k in range(3))
        return cls(**fields)


@dataclass
class BlendGates:
    active: np.ndarray  # (P, L) entries that were blended
    clamped: np.ndarray  # (P, L) entries whose alpha hit ALPHA_MAX


@dataclass
class BlendResult:
    rgb: object  # (P, 3) array, or a tuple of three (P,) duals
    transmittance: object
    contrib: np.ndarray
    gates: BlendGates
    cache: dict = field(default_factory=dict)


def _exclusive_cumprod(f):
    if isinstance(f, dl.Dual):
        pr = np.cumprod(f.real, axis=1)
        ex = np.concatenate([np.ones_like(pr[:, :1]), pr[:, :-1]], axis=1)
        log_d = np.cumsum(f.prime / f.real, axis=1)
        log_d = np.concatenate([np.zeros_like(log_d[:, :1]), log_d[:, :-1]], axis=1)
        return dl.Dual(ex, ex * log_d)
    pr = np.cumprod(f, axis=1)
    return np.concatenate([np.ones_like(pr[:, :1]), pr[:, :-1]], axis=1)


def _row_sum(x):
    if isinstance(x, dl.Dual):
        return dl.Dual(np.cumsum(x.real, axis=1)[:, -1], x.prime.sum(axis=1))
    # sequential accumulation keeps results independent of zero padding
    return np.cumsum(x, axis=1)[:, -1]


def blend(table: SplatTable, gidx: np.ndarray, px: np.ndarray, py: np.ndarray,
          gates: BlendGates | None = None) -> BlendResult:
    """Front-to-back alpha blending of per-pixel depth-sorted lists.

    ``gidx`` is (P, L): for each pixel, indices into ``table`` in depth order,
    padded with -1. Pixel centers are (px, py). With ``gates`` given the
    gating decisions are replayed instead of re-derived.
    """
    npix, width = gidx.shape
    if width == 0:
        zeros = np.zeros(npix)
        empty = np.zeros((npix, 0), dtype=bool)
        rgb = np.zeros((npix, 3)) if not isinstance(table.opacity, dl.Dual) else tuple(
            dl.Dual(zeros.copy(), zeros.copy()) for _ in range(3))
        return BlendResult(rgb, np.ones(npix), np.zeros(npix, dtype=np.int64), BlendGates(empty, empty))

    valid = gidx >= 0
    gi = np.where(valid, gidx, 0)
    dx = table.mean_x[gi] - px[:, None]
    dy = table.mean_y[gi] - py[:, None]
    ca, cb, cc = table.conic_a[gi], table.conic_b[gi], table.conic_c[gi]
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    falloff = dl.exp(power)
    raw_alpha = table.opacity[gi] * falloff

    if gates is None:
        ra = dl.real(raw_alpha)
        clamped = ra > ALPHA_MAX
        alpha_r = np.where(clamped, ALPHA_MAX, ra)
        candidate = valid & (dl.real(power) >= MIN_POWER) & (alpha_r >= ALPHA_MIN)
        t_incl = np.cumprod(np.where(candidate, 1.0 - alpha_r, 1.0), axis=1)
        stop = candidate & (t_incl < T_MIN)
        first = np.where(stop.any(axis=1), stop.argmax(axis=1), width)
        active = candidate & (np.arange(width)[None, :] < first[:, None])
        gates = BlendGates(active, clamped)

    alpha = dl.where(gates.clamped, ALPHA_MAX, raw_alpha)
    factor = dl.where(gates.active, 1.0 - alpha, 1.0)
    t_before = _exclusive_cumprod(factor)
    weight = dl.where(gates.active, alpha * t_before, 0.0)
    channels = [table.color[k][gi] for k in range(3)]
    rgb = tuple(_row_sum(weight * channels[k]) for k in range(3))
    transmittance = t_before[:, -1] * factor[:, -1]
    contrib = gates.active.sum(axis=1)

    if isinstance(rgb[0], dl.Dual):
        return BlendResult(rgb, transmittance, contrib, gates)
    cache = dict(
        gi=gi, dx=dx, dy=dy, conic=(ca, cb, cc), alpha=alpha, falloff=falloff,
        t_before=t_before, weight=weight, colors=np.stack(channels, axis=-1),
    )
    return BlendResult(np.stack(rgb, axis=1), transmittance, contrib, gates, cache)


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    contrib_count: np.ndarray  # (H, W) int


def _image_pixels(cam: Camera):
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    return xs.ravel(), ys.ravel()


def _blend_image(splats: Splats, gidx: np.ndarray, cam: Camera) -> RenderOutput:
    xs, ys = _image_pixels(cam)
    res = blend(SplatTable.concat([splats]), gidx, xs + 0.5, ys + 0.5)
    h, w = cam.height, cam.width
    return RenderOutput(
        res.rgb.reshape(h, w, 3),
        res.transmittance.reshape(h, w),
        res.contrib.reshape(h, w),
    )


def render_full(gaussians: GaussianSet, cam: Camera) -> RenderOutput:
    """Render through the tile grid (each pixel blends its tile's list)."""
    splats = preprocess(gaussians.to_matrix(), cam)
    grid = bin_splats(splats, cam)
    xs, ys = _image_pixels(cam)
    gidx = grid.padded()[pixel_tiles(xs, ys, cam)]
    return _blend_image(splats, gidx, cam)


def render_naive(gaussians: GaussianSet, cam: Camera) -> RenderOutput:
    """Reference renderer without tiling: every pixel sees every visible Gaussian."""
    splats = preprocess(gaussians.to_matrix(), cam)
    order = depth_order(splats)
    gidx = np.broadcast_to(order, (cam.width * cam.height, len(order)))
    return _blend_image(splats, np.ascontiguousarray(gidx), cam)


def render_images(gaussians: GaussianSet, cams) -> list[np.ndarray]:
    return [render_full(gaussians, cam).image for cam in cams]


@dataclass(frozen=True)
class Splat2D:
    """One projected Gaussian as seen by a single pixel."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    opacity: float
    color: np.ndarray


def render_pixel(sorted_splats, pixel_center) -> tuple[np.ndarray, float, int]:
    """Blend a depth-sorted list at one pixel center; returns (rgb, T, contrib)."""
    rgb = np.zeros(3)
    trans = 1.0
    contrib = 0
    pixel_center = np.asarray(pixel_center, dtype=np.float64)
    for s in sorted_splats:
        cov = np.asarray(s.cov2d, dtype=np.float64)
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
        if det <= 0:
            continue
        conic = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
        d = np.asarray(s.mean2d, dtype=np.float64) - pixel_center
        power = -0.5 * d @ conic @ d
        if power < MIN_POWER:
            continue
        alpha = min(ALPHA_MAX, s.opacity * np.exp(power))
        if alpha < ALPHA_MIN:
            continue
        test = trans * (1.0 - alpha)
        if test < T_MIN:
            break
        rgb += alpha * trans * np.asarray(s.color, dtype=np.float64)
        trans = test
        contrib += 1
    return rgb, trans, contrib


def visible_splats(gaussians: GaussianSet, cam: Camera) -> list[Splat2D]:
    """Projected Gaussians of ``cam`` in blending order."""
    splats = preprocess(gaussians.to_matrix(), cam)
    out = []
    for g in depth_order(splats):
        a, b, c = splats.conic_a[g], splats.conic_b[g], splats.conic_c[g]
        det = a * c - b * b
        out.append(Splat2D(
            np.array([splats.mean_x[g], splats.mean_y[g]]),
            np.array([[c, -b], [-b, a]]) / det,
            float(splats.opacity[g]),
            np.array([splats.color[k][g] for k in range(3)]),
        ))
    return out


def residuals(rendered: np.ndarray, ground_truth: np.ndarray) -> np.ndarray:
    """Per-channel residual field rendered - ground_truth."""
    rendered = np.asarray(rendered, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if rendered.shape != ground_truth.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {ground_truth.shape}")
    return rendered - ground_truth
