"""Noise schedule, training, and the guided denoising loop.

Timestep convention: a latent state carries ``t`` in ``0..T`` counting
applied noise levels, sampling runs ``t = T -> 1``, and schedule arrays
are indexed by the zero-based level ``tau = t - 1``.  Guidance
predicates (concept-match history, guidance window) compare ``tau``
against fractions of ``T``, so "early steps" are the high-``tau`` ones.

The reverse update is deterministic DDIM (eta = 0) by default; ancestral
noise is available behind ``eta > 0``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .errors import (GuidanceError, ParameterError, ShapeError, TrainingError,
                     UsageError, ValidationError)
from .guidance import (ConceptMatchState, ControlMask, GuidanceConfig,
                       match_control_concept, rdloss, update_latent)
from .model import AttentionStack, Denoiser, TokenPrompt

__all__ = [
    "NoiseSchedule", "LatentState", "add_noise", "denoise_step",
    "noise_mask_combine", "TrainHyperparams", "train_denoiser",
    "train_control_branch", "GuidanceToggles", "SAMPLE_MODES", "sample",
    "SampleResult", "derive_seed",
]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from a tag tuple (platform independent)."""
    blob = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with cumulative products and embedding indices.

    ``base_indices[tau]`` is the timestep-embedding index the model was
    trained with for level ``tau``; striding an inference schedule out
    of a training schedule keeps the original indices.
    """

    betas: torch.Tensor
    alpha_bars: torch.Tensor
    base_indices: tuple

    def __post_init__(self):
        ab = self.alpha_bars
        if ab.dim() != 1 or self.betas.shape != ab.shape:
            raise ShapeError("schedule arrays must be equal-length vectors")
        if not ((ab > 0).all() and (ab <= 1).all()):
            raise ParameterError("alpha_bar values must lie in (0, 1]")
        if (ab[1:] >= ab[:-1]).any():
            raise ParameterError("alpha_bar must be strictly decreasing")
        if abs(float(ab[0]) - (1.0 - float(self.betas[0]))) > 1e-6:
            raise ParameterError("alpha_bar[0] must equal 1 - beta[0]")

    @property
    def T(self) -> int:
        return self.alpha_bars.shape[0]

    @classmethod
    def linear(cls, T: int = 200, beta_start: float = 1e-4,
               beta_end: float = 0.1) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        alpha_bars = torch.cumprod(1.0 - betas, dim=0)
        return cls(betas=betas, alpha_bars=alpha_bars,
                   base_indices=tuple(range(T)))

    def strided(self, n: int) -> "NoiseSchedule":
        """Subsample to ``n`` inference levels with matching cumulative
        products."""
        if not 1 <= n <= self.T:
            raise ParameterError(f"cannot stride {self.T} levels to {n}")
        idx = [(k + 1) * self.T // n - 1 for k in range(n)]
        ab = self.alpha_bars[idx]
        prev = torch.cat([torch.ones(1, dtype=ab.dtype), ab[:-1]])
        betas = 1.0 - ab / prev
        return NoiseSchedule(betas=betas, alpha_bars=ab,
                             base_indices=tuple(self.base_indices[i] for i in idx))

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at level ``t`` in 1..T (1.0 at t = 0)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bars[t - 1])


@dataclass(frozen=True)
class LatentState:
    z: torch.Tensor
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ParameterError(f"timestep must be non-negative, got {self.t}")
        if not torch.isfinite(self.z).all():
            raise GuidanceError(f"latent non-finite at timestep {self.t}")


def add_noise(z0: torch.Tensor, t: int, eps: torch.Tensor,
              schedule: NoiseSchedule) -> torch.Tensor:
    """Forward noising ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``."""
    if eps.shape != z0.shape:
        raise ShapeError(
            f"noise shape {tuple(eps.shape)} != latent {tuple(z0.shape)}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def denoise_step(state: LatentState, noise_pred: torch.Tensor,
                 schedule: NoiseSchedule, eta: float = 0.0,
                 rng: Optional[torch.Generator] = None) -> LatentState:
    """One reverse step ``t -> t-1`` (DDIM; deterministic when eta = 0)."""
    t = state.t
    if t < 1:
        raise UsageError("cannot denoise below timestep 1")
    if noise_pred.shape != state.z.shape:
        raise ShapeError("noise prediction shape does not match latent")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    x0 = (state.z - math.sqrt(1.0 - ab_t) * noise_pred) / math.sqrt(ab_t)
    sigma = 0.0
    if eta > 0.0:
        sigma = (eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
                 * math.sqrt(1.0 - ab_t / ab_prev))
    direction = math.sqrt(max(0.0, 1.0 - ab_prev - sigma * sigma)) * noise_pred
    z_prev = math.sqrt(ab_prev) * x0 + direction
    if sigma > 0.0:
        noise = torch.randn(state.z.shape, generator=rng, dtype=state.z.dtype)
        z_prev = z_prev + sigma * noise
    return LatentState(z=z_prev, t=t - 1)


def noise_mask_combine(eps_ctrl: torch.Tensor, eps_plain: torch.Tensor,
                       mask: torch.Tensor) -> torch.Tensor:
    """Mask-blended noise prediction ``eps_ctrl * M + eps_plain * (1-M)``."""
    if eps_ctrl.shape != eps_plain.shape:
        raise ShapeError("noise predictions differ in shape")
    if mask.shape != eps_ctrl.shape[-2:]:
        raise ShapeError(
            f"mask {tuple(mask.shape)} does not match predictions "
            f"{tuple(eps_ctrl.shape[-2:])}")
    m = mask.to(eps_ctrl.dtype)
    if not bool(((m == 0) | (m == 1)).all()):
        raise ParameterError("noise-mask blending requires a binary mask")
    return eps_ctrl * m + eps_plain * (1.0 - m)


# --- training --------------------------------------------------------------

@dataclass
class TrainHyperparams:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    dataset_size: int = 4096


def _training_batch(hp: TrainHyperparams, schedule: NoiseSchedule,
                    dataset_fn: Callable, step: int, dtype: torch.dtype):
    g = torch.Generator().manual_seed(derive_seed("train", hp.seed, step))
    idx = torch.randint(0, hp.dataset_size, (hp.batch_size,), generator=g)
    images, prompts = [], []
    for i in idx.tolist():
        img, ids = dataset_fn(i)
        images.append(img)
        prompts.append(ids)
    x0 = torch.stack(images).to(dtype).unsqueeze(1)
    prompt_ids = torch.stack(prompts)
    t = torch.randint(1, schedule.T + 1, (hp.batch_size,), generator=g)
    eps = torch.randn(x0.shape, generator=g).to(dtype)
    ab = schedule.alpha_bars.to(dtype)[t - 1].reshape(-1, 1, 1, 1)
    z_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    return z_t, t - 1, prompt_ids, eps, idx


def _run_training(model: Denoiser, schedule: NoiseSchedule,
                  hp: TrainHyperparams, dataset_fn: Callable,
                  named_params, with_condition: bool, condition_fn=None,
                  optimizer_state: Optional[dict] = None,
                  start_step: int = 0):
    names = [n for n, _ in named_params]
    params = [p for _, p in named_params]
    opt = torch.optim.Adam(params, lr=hp.lr)
    if optimizer_state:
        _load_opt_state(opt, names, params, optimizer_state)
    losses = []
    for step in range(start_step, start_step + hp.steps):
        z_t, t_idx, prompt_ids, eps, idx = _training_batch(
            hp, schedule, dataset_fn, step, model.dtype)
        cond = None
        if with_condition:
            cond = torch.stack([condition_fn(i) for i in idx.tolist()]
                               ).to(model.dtype).unsqueeze(1)
        pred, _ = model(z_t, t_idx, prompt_ids, condition=cond)
        loss = ((eps - pred) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses, _dump_opt_state(opt, names, params)


def _dump_opt_state(opt, names, params):
    out = {}
    for name, p in zip(names, params):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{name}/step"] = torch.as_tensor(st["step"]).double().reshape(1)
        out[f"{name}/exp_avg"] = st["exp_avg"].detach().clone()
        out[f"{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().clone()
    return out


def _load_opt_state(opt, names, params, state: dict):
    for name, p in zip(names, params):
        key = f"{name}/exp_avg"
        if key not in state:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(state[f"{name}/step"][0])),
            "exp_avg": state[key].to(p.dtype).clone(),
            "exp_avg_sq": state[f"{name}/exp_avg_sq"].to(p.dtype).clone(),
        }


def _is_control_param(name: str) -> bool:
    return name.split(".")[0].startswith(("ctrl_", "zproj"))


def train_denoiser(model: Denoiser, schedule: NoiseSchedule,
                   hp: TrainHyperparams, dataset_fn: Callable,
                   optimizer_state: Optional[dict] = None):
    """Train the base denoiser; returns ``(loss_curve, optimizer_state)``.

    ``dataset_fn(i)`` must yield ``(image tensor [H,W] in [-1,1],
    prompt-id tensor [max_tokens])`` deterministically.  Every step
    draws its randomness from a seed derived from ``(hp.seed, global
    step)``, so resuming from a step-k checkpoint reproduces an
    unbroken run bit for bit.
    """
    named = [(n, p) for n, p in model.named_parameters()
             if not _is_control_param(n)]
    losses, opt_state = _run_training(
        model, schedule, hp, dataset_fn, named, with_condition=False,
        optimizer_state=optimizer_state, start_step=model.train_steps)
    model.train_steps += hp.steps
    return losses, opt_state


def train_control_branch(model: Denoiser, schedule: NoiseSchedule,
                         hp: TrainHyperparams, dataset_fn: Callable,
                         condition_fn: Callable,
                         optimizer_state: Optional[dict] = None):
    """Train only the control branch against conditioned batches.

    The base weights stay frozen; ``condition_fn(i)`` yields the global
    edge condition for sample ``i``.
    """
    if model.train_steps == 0:
        raise UsageError("train the base denoiser before the control branch")
    named = [(n, p) for n, p in model.named_parameters()
             if _is_control_param(n)]
    for n, p in model.named_parameters():
        p.requires_grad_(_is_control_param(n))
    try:
        losses, opt_state = _run_training(
            model, schedule, hp, dataset_fn, named, with_condition=True,
            condition_fn=condition_fn, optimizer_state=optimizer_state,
            start_step=model.control_train_steps)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    model.control_train_steps += hp.steps
    return losses, opt_state


# --- guided sampling -------------------------------------------------------

@dataclass(frozen=True)
class GuidanceToggles:
    rdloss: bool = False
    ftr: bool = False
    fmc: bool = False

    def label(self) -> str:
        bits = [n for n, on in (("rdloss", self.rdloss), ("ftr", self.ftr),
                                ("fmc", self.fmc)) if on]
        return "+".join(bits) if bits else "none"


def _runnerup_gap(values) -> float:
    """Gap between the largest and second-largest entries (inf if single)."""
    if len(values) < 2:
        return float("inf")
    top = sorted(values, reverse=True)
    return top[0] - top[1]


def _spatial_margins(smoothed: torch.Tensor, m: torch.Tensor) -> float:
    """Smaller of the in-region and out-region top-two gaps of a map."""
    gaps = []
    for region in (smoothed * m, smoothed * (1.0 - m)):
        vals = region.flatten().sort(descending=True).values
        gaps.append(float(vals[0] - vals[1]))
    return min(gaps)


SAMPLE_MODES = ("naive", "noise_mask", "feature_mask", "full_method")

_MODE_TOGGLES = {
    "naive": GuidanceToggles(),
    "feature_mask": GuidanceToggles(fmc=True),
    "full_method": GuidanceToggles(rdloss=True, ftr=True, fmc=True),
}


@dataclass
class SampleResult:
    image: np.ndarray            # uint8 canvas render of the final latent
    z0: torch.Tensor
    diagnostics: list
    manifest: dict
    runtime_s: float = 0.0       # wall clock, kept out of the manifest so
                                 # identical runs serialize byte-identically


def _to_image(z: torch.Tensor) -> np.ndarray:
    arr = z.detach().squeeze().numpy()
    return np.clip((arr + 1.0) * 127.5, 0, 255).round().astype(np.uint8)


def sample(model: Denoiser, schedule: NoiseSchedule, prompt: TokenPrompt,
           condition: Optional[torch.Tensor], mask: Optional[ControlMask],
           config: GuidanceConfig, mode: str, seed: int,
           toggles: Optional[GuidanceToggles] = None,
           eta: float = 0.0, allow_untrained: bool = False,
           checkpoint_hash: str = "") -> SampleResult:
    """Run the full denoising loop in one of the paper's modes.

    ``mode`` is one of :data:`SAMPLE_MODES`, or ``"toggles"`` with an
    explicit :class:`GuidanceToggles` for ablation rows.  The returned
    manifest contains the per-step guidance diagnostics.
    """
    t_start = time.perf_counter()
    if mode == "toggles":
        if toggles is None:
            raise UsageError("mode 'toggles' requires an explicit toggle set")
    elif mode in _MODE_TOGGLES:
        toggles = _MODE_TOGGLES[mode]
    elif mode != "noise_mask":
        raise ValidationError(f"unknown sampling mode {mode!r}")
    if model.train_steps == 0 and not allow_untrained:
        raise UsageError("refusing to sample from untrained weights")
    needs_mask = mode == "noise_mask" or (toggles is not None and (
        toggles.rdloss or toggles.fmc))
    if needs_mask and mask is None:
        raise ValidationError(f"mode {mode!r} requires a control mask")
    if condition is None:
        raise ValidationError("sampling requires a condition image "
                              "(the control branch is always active)")
    if toggles is not None and toggles.ftr and not toggles.rdloss:
        raise ValidationError("focused token response requires rdloss "
                              "(no FTR-only configuration exists)")

    T = schedule.T
    dtype = model.dtype
    attn_res = model.config.attn_res
    g = torch.Generator().manual_seed(derive_seed("sample", seed))
    z = torch.randn((1, 1, model.config.canvas, model.config.canvas),
                    generator=g).to(dtype)
    state = LatentState(z=z, t=T)
    cms = ConceptMatchState()
    subset = tuple(config.token_subset) or tuple(prompt.object_positions())
    ftr_subset = None if config.ftr_all_tokens else subset
    ids = torch.tensor(prompt.ids, dtype=torch.long)
    mask_mode = "none"
    fmc_masks = None
    if toggles is not None and toggles.fmc:
        c = model.config
        fmc_masks = {res: mask.tensor(res, dtype=dtype)
                     for res in (c.canvas, c.canvas // 2, attn_res)}
    diagnostics = []

    for t in range(T, 0, -1):
        tau = t - 1
        emb_idx = schedule.base_indices[tau]
        diag = {"t": t, "tau": tau, "mode": mode}
        if mode == "noise_mask":
            with torch.no_grad():
                eps_c, _ = model(state.z, emb_idx, ids, condition=condition)
                eps_p, _ = model(state.z, emb_idx, ids, condition=None)
            eps = noise_mask_combine(eps_c, eps_p,
                                     mask.tensor(model.config.canvas, dtype))
        elif toggles.rdloss:
            in_window = config.in_window(tau, T)
            ftr = (config.gamma, ftr_subset) if (toggles.ftr and in_window) \
                else None
            cfg = config if config.token_subset else \
                dataclasses.replace(config, token_subset=subset)
            alpha_t = cfg.alpha(tau, schedule.alpha_bar(t))
            do_update = in_window and alpha_t > 0.0
            z_leaf = state.z.detach().clone().requires_grad_(do_update)
            with torch.set_grad_enabled(do_update):
                eps1, maps = model(z_leaf, emb_idx, ids, condition=condition,
                                   masks=fmc_masks, ftr=ftr)
            stack = AttentionStack(t=tau, maps=maps[0], token_ids=prompt.ids)
            selected = match_control_concept(stack, mask, tau, T, cfg, cms)
            diag["c_control"] = selected
            diag["c_control_token"] = prompt.vocab[prompt.ids[selected]]
            diag["history_step"] = cfg.in_history_phase(tau, T)
            if do_update:
                result = rdloss(stack, mask, selected, cfg)
                (grad,) = torch.autograd.grad(result.l, z_leaf,
                                              allow_unused=True)
                if grad is None:
                    grad = torch.zeros_like(z_leaf)
                new_state = update_latent(state, grad.detach(), alpha_t)
                diag["rdloss"] = {str(k): float(v.detach())
                                  for k, v in result.per_token.items()}
                diag["l"] = float(result.l.detach())
                diag["l_token"] = result.arg_token
                diag["l_margin"] = _runnerup_gap(
                    [float(v.detach()) for v in result.per_token.values()])
                diag["spatial_margin"] = _spatial_margins(
                    result.smoothed[result.arg_token],
                    mask.tensor(attn_res, dtype=dtype))
                diag["grad_norm"] = float(grad.detach().norm())
                diag["update_norm"] = float(
                    (new_state.z - state.z).norm())
                diag["alpha_t"] = alpha_t
                state = new_state
                if cfg.update_then_predict:
                    with torch.no_grad():
                        eps, maps2 = model(state.z, emb_idx, ids,
                                           condition=condition,
                                           masks=fmc_masks, ftr=ftr)
                    stack2 = AttentionStack(t=tau, maps=maps2[0],
                                            token_ids=prompt.ids)
                    diag["l_after"] = float(
                        rdloss(stack2, mask, selected, cfg).l.detach())
                else:
                    eps = eps1.detach()
            else:
                eps = eps1.detach()
        else:
            with torch.no_grad():
                eps, _ = model(state.z, emb_idx, ids, condition=condition,
                               masks=fmc_masks)
        state = denoise_step(state, eps, schedule, eta=eta, rng=g)
        diagnostics.append(diag)

    z0 = state.z
    manifest = {
        "kind": "localdiff-run",
        "seed": seed,
        "mode": mode,
        "toggles": dataclasses.asdict(toggles) if toggles else None,
        "guidance": dataclasses.asdict(config),
        "steps": T,
        "checkpoint_hash": checkpoint_hash,
        "arch_hash": model.config.arch_hash(),
        "prompt_ids": list(prompt.ids),
        "eta": eta,
        "diagnostics": diagnostics,
    }
    return SampleResult(image=_to_image(z0), z0=z0.detach(),
                        diagnostics=diagnostics, manifest=manifest,
                        runtime_s=time.perf_counter() - t_start)
