"""Structural pruning of diffusion denoisers with learned hard-concrete gates."""
from .compactor import compact_model, count_params, estimate_flops
from .denoiser import Denoiser, DenoiserConfig, denoiser_forward, init_denoiser
from .diffusion import (NoiseSchedule, SamplerMode, SyntheticLatents, denoise_step,
                        forward_diffuse, full_sample, make_schedule)
from .estimators import DiffusionPruner, LatentDiffusionModel
from .gates import (BinaryMask, GateConfig, GateParams, expected_gate, l0_loss,
                    l1_regularizer, sample_gate, threshold_mask)
from .pruning import (PruneConfig, checkpointed_backprop, end_to_end_loss, learn_mask,
                      naive_backprop)

__version__ = "0.1.0"

__all__ = [
    "compact_model", "count_params", "estimate_flops", "Denoiser", "DenoiserConfig",
    "denoiser_forward", "init_denoiser", "NoiseSchedule", "SamplerMode", "SyntheticLatents",
    "denoise_step", "forward_diffuse", "full_sample", "make_schedule", "DiffusionPruner",
    "LatentDiffusionModel", "BinaryMask", "GateConfig", "GateParams", "expected_gate",
    "l0_loss", "l1_regularizer", "sample_gate", "threshold_mask", "PruneConfig",
    "checkpointed_backprop", "end_to_end_loss", "learn_mask", "naive_backprop",
]
