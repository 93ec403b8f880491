"""Biplanar X-ray to CT reconstruction with conditional diffusion."""

from .config import ExperimentConfig
from .diffusion import NoiseSchedule, make_schedule, p_sample_step, predict_y0, q_sample, sample
from .metrics import MetricReport, compute_report, dice, psnr, ssim
from .projections import BiplanarPair, DrrGeometry, drr_project, make_biplanar_pair, ortho_project
from .volumes import (
    CtVolume,
    PhantomSpec,
    center_crop_or_pad,
    clip_and_normalize,
    denormalize,
    generate_phantom,
    load_volume,
    resample_isotropic,
    save_volume,
)

__version__ = "0.1.0"

__all__ = [
    "BiplanarPair",
    "CtVolume",
    "DrrGeometry",
    "ExperimentConfig",
    "MetricReport",
    "NoiseSchedule",
    "PhantomSpec",
    "center_crop_or_pad",
    "clip_and_normalize",
    "compute_report",
    "denormalize",
    "dice",
    "drr_project",
    "generate_phantom",
    "load_volume",
    "make_biplanar_pair",
    "make_schedule",
    "ortho_project",
    "p_sample_step",
    "predict_y0",
    "psnr",
    "q_sample",
    "resample_isotropic",
    "sample",
    "save_volume",
    "ssim",
]
