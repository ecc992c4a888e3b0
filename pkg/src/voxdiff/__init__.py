"""Volumetric conditional diffusion: learn to translate one 3D image
modality into another, at desk scale, with verifiable numerics."""

from .diffusion import (
    DiffusionConfig,
    NoiseSchedule,
    make_linear_schedule,
    posterior_step,
    q_sample,
    sample,
    training_loss,
)
from .metrics import evaluate_groups, mean_ci95, psnr, ssim3d, voxelwise_std_map
from .phantom import GroupLabel, PairedSample, PhantomConfig, generate_dataset, generate_pair
from .training import TrainConfig, train
from .unet import UNet, UNetConfig, build_unet, desk_config
from .volume import (
    PatchSpec,
    Volume3D,
    extract_patch,
    load_volume,
    normalize_intensity,
    random_patch_spec,
    save_volume,
)

__version__ = "0.1.0"
