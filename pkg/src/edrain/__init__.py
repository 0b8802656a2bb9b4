"""Single-image deraining with pixel-wise dilation filtering and RainMix augmentation."""

__version__ = "0.1.0"

from .errors import CheckpointError, InvalidArgument, InvalidState, TrainingDiverged, UnsupportedFormat
from .filtering import FusionParams, fuse_scales, multi_dilated_filter, pixel_wise_dilated_filter, pixel_wise_filter
from .kpn import KpnConfig, KpnParams, derain, kpn_forward, kpn_init
from .losses import LossConfig, combined_loss, psnr, ssim

__all__ = [
    "CheckpointError",
    "FusionParams",
    "InvalidArgument",
    "InvalidState",
    "KpnConfig",
    "KpnParams",
    "LossConfig",
    "TrainingDiverged",
    "UnsupportedFormat",
    "combined_loss",
    "derain",
    "fuse_scales",
    "kpn_forward",
    "kpn_init",
    "multi_dilated_filter",
    "pixel_wise_dilated_filter",
    "pixel_wise_filter",
    "psnr",
    "ssim",
]
