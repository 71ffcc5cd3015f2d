"""Training-free local-control operators.

Four mechanisms act on cross-attention stacks, binary region masks and
noised latents during sampling:

* control-concept matching: pick the prompt token whose attention mass
  inside the control region is largest, then freeze the majority vote
  of the early steps;
* regional discriminate loss: signed gap between the maxima of a
  smoothed attention map inside and outside the region;
* latent update: one gradient step on the noised latent against that loss;
* focused token response: per-patch suppression of every token that is
  not the patch's strongest responder.

All operators are pure; :class:`ConceptMatchState` is owned by a single
sampling run.
"""

from __future__ import annotations

import dataclasses
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import GuidanceError, ParameterError, ShapeError, ValidationError
from .numerics import GaussianKernel, _smooth_lastdims, ensure_finite

__all__ = [
    "ControlMask",
    "GuidanceConfig",
    "ConceptMatchState",
    "match_control_concept",
    "rdloss",
    "RDLossResult",
    "update_latent",
    "focused_token_response",
    "suppress_non_max",
]


def _downsample_binary(grid: np.ndarray, res: int) -> np.ndarray:
    """Majority-downsample a binary grid; a cell is 1 iff >= 50% covered."""
    h, w = grid.shape
    if h % res or w % res:
        raise ParameterError(f"cannot downsample {h}x{w} grid to {res}x{res}")
    fy, fx = h // res, w // res
    blocks = grid.reshape(res, fy, res, fx).sum(axis=(1, 3))
    return (2 * blocks >= fy * fx)


@dataclass(frozen=True)
class ControlMask:
    """Binary spatial mask of the local-control region.

    ``image`` is the mask at canvas resolution; ``grids`` maps each
    derived resolution (attention and feature levels) to its
    majority-downsampled binary grid.
    """

    image: np.ndarray
    grids: dict

    @classmethod
    def from_image(cls, image: np.ndarray,
                   resolutions: Sequence[int] = (16, 8)) -> "ControlMask":
        arr = np.asarray(image)
        if arr.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValidationError("mask values must be 0 or 1")
        arr = arr.astype(bool)
        grids = {arr.shape[0]: arr}
        for res in resolutions:
            grids[res] = _downsample_binary(arr, res)
        return cls(image=arr, grids=dict(sorted(grids.items())))

    def at(self, res: int) -> np.ndarray:
        if res not in self.grids:
            raise ParameterError(f"no mask grid at resolution {res}")
        return self.grids[res]

    def tensor(self, res: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.from_numpy(self.at(res).astype(np.float64)).to(dtype)

    def check_guidance_usable(self, attn_res: int) -> None:
        g = self.at(attn_res)
        if not g.any() or g.all():
            raise GuidanceError(
                f"mask is degenerate at attention resolution {attn_res}: "
                "guidance needs at least one cell inside and one outside")


@dataclass
class GuidanceConfig:
    """Hyperparameters of the guidance stack.

    ``beta`` bounds the concept-matching history window, ``gamma`` is the
    suppression factor, ``alpha0`` scales the per-step latent update
    ``alpha0 * sqrt(1 - alpha_bar_t)``, and ``window_frac`` defines the
    guidance window (loss updates and suppression run while the
    zero-based step index exceeds ``window_frac * T``).
    """

    beta: float = 0.85
    gamma: float = 0.1
    alpha0: float = 5.0
    window_frac: float = 0.7
    token_subset: tuple = ()        # prompt positions; empty -> all object tokens
    ftr_all_tokens: bool = False
    rdloss_on_raw: bool = False
    update_then_predict: bool = True
    kernel_size: int = 3
    kernel_sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ParameterError(f"beta must be in (0, 1), got {self.beta}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.alpha0 < 0:
            raise ParameterError(f"alpha0 must be non-negative, got {self.alpha0}")
        if not 0.0 <= self.window_frac < 1.0:
            raise ParameterError(
                f"window_frac must be in [0, 1), got {self.window_frac}")

    def kernel(self, dtype: torch.dtype = torch.float64) -> GaussianKernel:
        return GaussianKernel.make(self.kernel_size, self.kernel_sigma, dtype=dtype)

    def in_window(self, t: int, total_steps: int) -> bool:
        return t > self.window_frac * total_steps

    def in_history_phase(self, t: int, total_steps: int) -> bool:
        return t > self.beta * total_steps

    def alpha(self, t: int, alpha_bar_t: float) -> float:
        return self.alpha0 * math.sqrt(1.0 - alpha_bar_t)


@dataclass
class ConceptMatchState:
    """Per-run record of control-concept selections.

    ``history`` collects selections made during the early (high-noise)
    steps; ``frozen`` is set exactly once, at the first step past the
    history window, and never changes afterwards.
    """

    history: list = field(default_factory=list)
    frozen: Optional[int] = None


def match_control_concept(attn, mask: ControlMask, t: int, total_steps: int,
                          config: GuidanceConfig, state: ConceptMatchState) -> int:
    """Select the prompt position that owns the control region at step ``t``.

    ``t`` is the zero-based step index (high values = early denoising).
    During the history phase the in-region attention sums decide; after
    it the majority vote over the history is frozen and reused.  Ties
    break to the lowest position, both in the argmax and in the vote.
    """
    subset = _resolve_subset(config, attn)
    if not subset:
        raise GuidanceError("object token subset is empty")
    if config.in_history_phase(t, total_steps):
        maps = attn.maps.detach()
        res = maps.shape[-1]
        m = mask.tensor(res, dtype=maps.dtype)
        best, best_sum = None, None
        for pos in subset:
            s = float((m * maps[pos]).sum())
            if best_sum is None or s > best_sum:
                best, best_sum = pos, s
        state.history.append(best)
        return best
    if state.frozen is None:
        if not state.history:
            raise GuidanceError(
                "concept-match history is empty at freeze time: "
                "beta is too large for this step count")
        counts = Counter(state.history)
        top = max(counts.values())
        state.frozen = min(p for p, c in counts.items() if c == top)
    return state.frozen


def _resolve_subset(config: GuidanceConfig, attn) -> list:
    if config.token_subset:
        n = attn.maps.shape[0]
        subset = sorted(set(int(i) for i in config.token_subset))
        if subset and (subset[0] < 0 or subset[-1] >= n):
            raise ValidationError(f"token subset {subset} out of prompt bounds")
        return subset
    return sorted(attn.object_positions())


@dataclass
class RDLossResult:
    per_token: dict          # prompt position -> scalar loss tensor
    l: torch.Tensor          # max over per_token values
    arg_token: int           # position achieving l (lowest index on ties)
    smoothed: dict = field(default_factory=dict)  # position -> detached map


def rdloss(attn, mask: ControlMask, control: int,
           config: GuidanceConfig) -> RDLossResult:
    """Regional discriminate loss over the object tokens.

    For each object token the smoothed attention map is split by the
    mask and the gap ``max(inside) - max(outside)`` is taken, negated
    for the control token.  ``l`` is the largest per-token loss and is
    the quantity differentiated against the latent.
    """
    subset = _resolve_subset(config, attn)
    if control not in subset:
        raise GuidanceError(f"control position {control} not in object subset {subset}")
    maps = attn.maps
    res = maps.shape[-1]
    mask.check_guidance_usable(res)
    m = mask.tensor(res, dtype=maps.dtype)
    kernel = config.kernel(dtype=maps.dtype)
    per_token = {}
    smoothed_maps = {}
    for pos in subset:
        g = maps[pos] if config.rdloss_on_raw else None
        smoothed = _smooth_lastdims(maps[pos], kernel) if g is None else g
        gap = (smoothed * m).max() - (smoothed * (1.0 - m)).max()
        per_token[pos] = -gap if pos == control else gap
        smoothed_maps[pos] = smoothed.detach()
    arg_token, l = None, None
    for pos in subset:
        v = per_token[pos]
        if l is None or float(v.detach()) > float(l.detach()):
            arg_token, l = pos, v
    return RDLossResult(per_token=per_token, l=l, arg_token=arg_token,
                        smoothed=smoothed_maps)


def update_latent(state, grad: torch.Tensor, alpha_t: float):
    """One gradient step ``z <- z - alpha_t * grad`` on a latent state."""
    if grad.shape != state.z.shape:
        raise ShapeError(
            f"gradient shape {tuple(grad.shape)} does not match latent "
            f"{tuple(state.z.shape)}")
    z = state.z - alpha_t * grad
    if not torch.isfinite(z).all():
        raise GuidanceError(f"latent became non-finite at timestep {state.t}")
    return dataclasses.replace(state, z=z)


def suppress_non_max(scores: torch.Tensor, gamma: float,
                     subset: Optional[Sequence[int]] = None,
                     token_dim: int = -1) -> torch.Tensor:
    """Scale every non-maximal token score by ``gamma``, per spatial patch.

    The argmax runs over ``subset`` along ``token_dim`` (all tokens when
    ``subset`` is None); only tokens in the subset are suppressed.  Ties
    keep the lowest-indexed maximal token.  The scaling factor is
    detached, so gradients flow through the scores alone.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"gamma must be in [0, 1], got {gamma}")
    token_dim = token_dim % scores.dim()
    n = scores.shape[token_dim]
    if subset is None:
        subset = list(range(n))
    else:
        subset = sorted(set(int(i) for i in subset))
        if subset and (subset[0] < 0 or subset[-1] >= n):
            raise ValidationError(f"token subset {subset} out of bounds")
    idx = torch.tensor(subset, dtype=torch.long, device=scores.device)
    sub = scores.detach().index_select(token_dim, idx)
    winner_in_sub = sub.argmax(dim=token_dim, keepdim=True)
    winner = idx[winner_in_sub]
    positions = torch.arange(n, dtype=torch.long).reshape(
        [n if d == token_dim else 1 for d in range(scores.dim())])
    in_subset = torch.zeros(n, dtype=torch.bool)
    in_subset[idx] = True
    in_subset = in_subset.reshape(
        [n if d == token_dim else 1 for d in range(scores.dim())])
    is_winner = positions == winner
    factor = torch.where(in_subset & ~is_winner,
                         torch.as_tensor(gamma, dtype=scores.dtype),
                         torch.as_tensor(1.0, dtype=scores.dtype))
    return scores * factor


def focused_token_response(attn, gamma: float,
                           subset: Optional[Sequence[int]] = None):
    """Apply non-max suppression to an attention stack (maps ``[T, H, W]``)."""
    maps = suppress_non_max(attn.maps, gamma, subset=subset, token_dim=0)
    ensure_finite(maps, "suppressed attention maps")
    return dataclasses.replace(attn, maps=maps)
