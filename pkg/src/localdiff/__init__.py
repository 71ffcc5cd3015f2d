"""localdiff: a desk-scale diffusion engine with training-free
local-control guidance (concept matching, regional discriminate loss,
focused token response, and masked control-feature fusion)."""

__version__ = "0.1.0"

from .guidance import (ConceptMatchState, ControlMask, GuidanceConfig,
                       focused_token_response, match_control_concept, rdloss,
                       update_latent)
from .model import AttentionStack, Denoiser, ModelConfig, TokenPrompt, fuse_control
from .numerics import GaussianKernel, gaussian_smooth, grad_wrt_latent, softmax_rows
from .sampler import (GuidanceToggles, LatentState, NoiseSchedule,
                      add_noise, denoise_step, noise_mask_combine, sample,
                      train_control_branch, train_denoiser)

__all__ = [
    "__version__",
    "ConceptMatchState", "ControlMask", "GuidanceConfig",
    "focused_token_response", "match_control_concept", "rdloss",
    "update_latent", "AttentionStack", "Denoiser", "ModelConfig",
    "TokenPrompt", "fuse_control", "GaussianKernel", "gaussian_smooth",
    "grad_wrt_latent", "softmax_rows", "GuidanceToggles", "LatentState",
    "NoiseSchedule", "add_noise", "denoise_step", "noise_mask_combine",
    "sample", "train_control_branch", "train_denoiser",
]
