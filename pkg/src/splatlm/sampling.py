"""View batching by camera clustering, and stratified per-tile pixel sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import TILE_SIZE, tile_counts

DISTRIBUTIONS = ("uniform", "residual", "gaussian_count")
Q_FLOOR = 1e-12


def camera_features(cams) -> np.ndarray:
    """(n, 6) rows [x, y, z, dx, dy, dz]: bbox-normalized position, unit view direction."""
    centers = np.array([c.center for c in cams], dtype=np.float64).reshape(-1, 3)
    dirs = np.array([c.forward for c in cams], dtype=np.float64).reshape(-1, 3)
    lo, hi = centers.min(axis=0), centers.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pos = (centers - lo) / span
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.concatenate([pos, dirs], axis=1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def kmeans_cameras(features, k: int, seed=0, max_iter: int = 100) -> list[np.ndarray]:
    """Partition camera indices into ``k`` non-empty clusters (Lloyd + k-means++)."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n} cameras, got k={k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        # re-seed empty clusters from the point farthest from its center
        for j in range(k):
            if not np.any(new == j):
                dist = d2[np.arange(n), new]
                donors = np.bincount(new, minlength=k) > 1
                dist = np.where(donors[new], dist, -1.0)
                far = int(dist.argmax())
                new[far] = j
                centers[j] = x[far]
                d2[far, j] = 0.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([x[labels == j].mean(axis=0) for j in range(k)])
    return [np.flatnonzero(labels == j) for j in range(k)]


def sample_view_batch(clusters, rng: np.random.Generator) -> np.ndarray:
    """One uniformly chosen camera index from every cluster."""
    if not clusters or any(len(c) == 0 for c in clusters):
        raise ValueError("clusters must be non-empty")
    return np.array([c[rng.integers(len(c))] for c in clusters], dtype=np.int64)


@dataclass
class SampleView:
    """Sampled pixels of one batch camera.

    ``weights`` are importance weights 1 / (n_tile * q(pixel | tile)), so that
    sum(weights * r^2) is an unbiased estimate of the image's sum of r^2.
    """

    camera_index: int
    pixels: np.ndarray  # (n, 2) integer (x, y)
    weights: np.ndarray  # (n,)
    tiles: np.ndarray  # (n,)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.tiles = np.asarray(self.tiles, dtype=np.int64)
        if len(self.weights) != len(self.pixels) or len(self.tiles) != len(self.pixels):
            raise ValueError("one weight and one tile per pixel required")

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass
class SamplePlan:
    views: list
    samples_per_tile: int
    distribution: str

    def __len__(self) -> int:
        return sum(len(v) for v in self.views)

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([v.weights for v in self.views]) if self.views else np.zeros(0)


def full_plan(cams) -> SamplePlan:
    """Every pixel of every camera once, with unit weight."""
    views = []
    for i, cam in enumerate(cams):
        ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
        xs, ys = xs.ravel(), ys.ravel()
        tx, _ = tile_counts(cam.width, cam.height)
        views.append(SampleView(i, np.stack([xs, ys], 1), np.ones(len(xs)), (ys // TILE_SIZE) * tx + xs // TILE_SIZE))
    return SamplePlan(views, TILE_SIZE * TILE_SIZE, "uniform")


def _tile_pixels(cam, tx: int, ty: int):
    x0, y0 = tx * TILE_SIZE, ty * TILE_SIZE
    ys, xs = np.mgrid[y0 : min(y0 + TILE_SIZE, cam.height), x0 : min(x0 + TILE_SIZE, cam.width)]
    return xs.ravel(), ys.ravel()


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def tile_distribution(dist: str, xs, ys, residual_map=None, contrib_map=None) -> np.ndarray:
    """Within-tile sampling probabilities for the pixels (xs, ys)."""
    if dist == "uniform":
        return np.full(len(xs), 1.0 / len(xs))
    if dist == "residual":
        mag = np.abs(residual_map[ys, xs]).reshape(len(xs), -1).mean(axis=1)
        return _softmax(mag)
    if dist == "gaussian_count":
        # +1 keeps q > 0 on pixels no Gaussian covers
        counts = contrib_map[ys, xs].astype(np.float64) + 1.0
        return counts / counts.sum()
    raise ValueError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")


def build_sample_plan(cams, samples_per_tile: int, dist: str, rng: np.random.Generator,
                      residual_maps=None, contrib_maps=None, lane_width: int = 32) -> SamplePlan:
    """Draw ``samples_per_tile`` pixels from every 16x16 tile of every camera.

    Uniform sampling is without replacement; the importance distributions draw
    independently (with replacement) so that 1/q weighting stays unbiased.
    """
    if dist not in DISTRIBUTIONS:
        raise ValueError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")
    if samples_per_tile < 1 or samples_per_tile > TILE_SIZE * TILE_SIZE:
        raise ValueError(f"samples_per_tile must be in [1, {TILE_SIZE * TILE_SIZE}], got {samples_per_tile}")
    if lane_width and samples_per_tile % lane_width:
        raise ValueError(f"samples_per_tile={samples_per_tile} is not a multiple of lane width {lane_width}")
    if dist == "residual" and residual_maps is None:
        raise ValueError("residual sampling needs residual maps from a forward pass")
    if dist == "gaussian_count" and contrib_maps is None:
        raise ValueError("gaussian_count sampling needs contribution counts from a forward pass")

    views = []
    for i, cam in enumerate(cams):
        tiles_x, tiles_y = tile_counts(cam.width, cam.height)
        pix, wts, tids = [], [], []
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                xs, ys = _tile_pixels(cam, tx, ty)
                n = min(samples_per_tile, len(xs))
                q = tile_distribution(
                    dist, xs, ys,
                    None if residual_maps is None else residual_maps[i],
                    None if contrib_maps is None else contrib_maps[i],
                )
                if dist == "uniform":
                    pick = rng.choice(len(xs), size=n, replace=False)
                else:
                    pick = rng.choice(len(xs), size=n, replace=True, p=q)
                pix.append(np.stack([xs[pick], ys[pick]], axis=1))
                wts.append(1.0 / (n * np.maximum(q[pick], Q_FLOOR)))
                tids.append(np.full(n, ty * tiles_x + tx))
        views.append(SampleView(i, np.concatenate(pix), np.concatenate(wts), np.concatenate(tids)))
    return SamplePlan(views, samples_per_tile, dist)


def estimate_mse(plan: SamplePlan, residual_maps) -> float:
    """Importance-weighted estimate of the mean squared residual over all images."""
    total, count = 0.0, 0
    for view in plan.views:
        r = np.asarray(residual_maps[view.camera_index])
        xs, ys = view.pixels[:, 0], view.pixels[:, 1]
        total += float(np.sum(view.weights * np.sum(r[ys, xs] ** 2, axis=-1)))
        count += r.size
    return total / count
