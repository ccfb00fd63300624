"""Small random scenes shared by the tests."""

import numpy as np

from splatlm.core import Camera, GaussianSet, logit


def random_gaussians(count, rng, spread=0.5, scale=(0.1, 0.3), opacity=(0.3, 0.9)):
    q = rng.normal(size=(count, 4))
    return GaussianSet(
        means=rng.uniform(-spread, spread, size=(count, 3)),
        log_scales=np.log(rng.uniform(*scale, size=(count, 3))),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        opacity_logits=logit(rng.uniform(*opacity, size=(count, 1))),
        colors=rng.uniform(-1.5, 1.5, size=(count, 3)),
    )


def front_camera(width=32, height=None, distance=3.0, focal_ratio=1.2):
    """Camera on the -z axis looking at the origin."""
    height = width if height is None else height
    f = focal_ratio * width
    return Camera.look_at([0.0, 0.0, -distance], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], f, f, width, height)


def orbit_cameras(count, width=32, distance=3.0, focal_ratio=1.2):
    cams = []
    for i in range(count):
        a = 2 * np.pi * i / count
        eye = [distance * np.sin(a), 0.4 * np.cos(3 * a), -distance * np.cos(a)]
        f = focal_ratio * width
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], f, f, width, width))
    return cams
