"""Cascaded FSRCNN super-resolution in plain numpy."""

from .model import StageConfig, build_cascade, cascade_forward
from .evaluate import psnr, route_and_superresolve, ssim

__all__ = ["StageConfig", "build_cascade", "cascade_forward", "psnr", "ssim",
           "route_and_superresolve"]
