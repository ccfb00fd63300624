"""Levenberg-Marquardt optimization of 3D Gaussian splatting scenes on the CPU."""

from .core import Camera, GaussianSet, covariance_3d, project_gaussian, quat_to_rotation
from .dual import Dual, DualScalar
from .render import RenderOutput, TileGrid, bin_and_sort, render_full, render_naive, render_pixel, residuals
from .autodiff import Linearization, gn_apply, jtj_diag, jvp, vjp
from .sampling import SamplePlan, SampleView, build_sample_plan, kmeans_cameras, sample_view_batch
from .solver import LmConfig, LmOptimizer, learning_rate, lm_step, pcg_solve
from .baselines import FirstOrderOptimizer, adam_step, full_gradient, rmsprop_step, sgd_momentum_step
from .metrics import MetricReport, psnr, ssim, ssim_diag_residuals

__all__ = [
    "Camera", "GaussianSet", "covariance_3d", "project_gaussian", "quat_to_rotation",
    "Dual", "DualScalar",
    "RenderOutput", "TileGrid", "bin_and_sort", "render_full", "render_naive", "render_pixel", "residuals",
    "Linearization", "gn_apply", "jtj_diag", "jvp", "vjp",
    "SamplePlan", "SampleView", "build_sample_plan", "kmeans_cameras", "sample_view_batch",
    "LmConfig", "LmOptimizer", "learning_rate", "lm_step", "pcg_solve",
    "FirstOrderOptimizer", "adam_step", "full_gradient", "rmsprop_step", "sgd_momentum_step",
    "MetricReport", "psnr", "ssim", "ssim_diag_residuals",
]
