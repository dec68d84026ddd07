"""Dual-domain selective-scan network for underwater image enhancement,
with its own numpy autodiff core, metrics and a synthetic scene simulator."""

from .losses import FeatureExtractor, LossWeights, composite_loss, contrastive_loss, l1_loss, ssim, ssim_loss
from .metrics import MetricsReport, fsim, psnr, ssim_index
from .network import (
    ABLATION_LADDER,
    HeroMamba,
    ModelConfig,
    build_network,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    variant_config,
)
from .optim import OptimizerState, adamw_step, cosine_anneal_lr
from .simulation import SceneParams, ScenePair, degrade, invert_degradation, make_dataset, sample_scene
from .tensor import Tensor, backward, no_grad

__all__ = [
    "ABLATION_LADDER", "FeatureExtractor", "HeroMamba", "LossWeights", "MetricsReport", "ModelConfig",
    "OptimizerState", "SceneParams", "ScenePair", "Tensor", "adamw_step", "backward", "build_network",
    "composite_loss", "contrastive_loss", "cosine_anneal_lr", "degrade", "fsim", "invert_degradation",
    "l1_loss", "load_checkpoint", "make_dataset", "no_grad", "parameter_count", "psnr", "sample_scene",
    "save_checkpoint", "ssim", "ssim_index", "ssim_loss", "variant_config",
]

__version__ = "0.1.0"
