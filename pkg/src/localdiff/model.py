"""Miniature conditional denoiser.

A 32x32 image is treated directly as the latent.  The network is a
three-level convolutional encoder-decoder with skip connections, a
single-head cross-attention block at the 8x8 bottleneck, a learned
timestep-embedding table, and a ControlNet-style control branch: a
structural copy of the encoder consuming the latent stacked with the
condition image, whose residuals enter through zero-initialized 1x1
projections at the bottleneck and at both decoder skips.  Every
injection point goes through :func:`fuse_control`, so masking the
fusion is the only pathway by which the condition reaches the output.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, UsageError, ValidationError, VocabularyError

__all__ = [
    "VOCAB", "PAD_ID", "BG_ID", "ModelConfig", "TokenPrompt",
    "AttentionStack", "fuse_control", "Denoiser",
]

VOCAB = ("<pad>", "<bg>", "circle", "square", "triangle", "star", "cross",
         "diamond")
PAD_ID = 0
BG_ID = 1


@dataclass(frozen=True)
class ModelConfig:
    canvas: int = 32
    channels: tuple = (16, 32, 48)
    embed_dim: int = 16
    attn_dim: int = 32
    time_embed_dim: int = 48
    time_steps: int = 200
    max_tokens: int = 8
    vocab: tuple = VOCAB

    @property
    def attn_res(self) -> int:
        return self.canvas // 4

    def arch_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class TokenPrompt:
    """Fixed-length tokenized prompt with its (detached) embeddings."""

    ids: tuple
    embeddings: torch.Tensor     # [max_tokens, embed_dim]
    vocab: tuple = VOCAB

    def tokens(self) -> tuple:
        return tuple(self.vocab[i] for i in self.ids)

    def object_positions(self) -> list:
        return [i for i, tid in enumerate(self.ids)
                if tid not in (PAD_ID, BG_ID)]


@dataclass(frozen=True)
class AttentionStack:
    """Per-token spatial cross-attention maps from one forward pass."""

    t: int                     # zero-based schedule index at extraction
    maps: torch.Tensor         # [n_tokens, H, W]
    token_ids: tuple

    def object_positions(self) -> list:
        return [i for i, tid in enumerate(self.token_ids)
                if tid not in (PAD_ID, BG_ID)]


def fuse_control(unet_out: torch.Tensor, control_out: torch.Tensor,
                 mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Masked residual fusion ``unet_out + mask * control_out``.

    ``mask`` is a binary [H, W] grid at the feature resolution; None
    means all-ones (plain ControlNet fusion).
    """
    if unet_out.shape != control_out.shape:
        raise ShapeError(
            f"fusion operands differ: {tuple(unet_out.shape)} vs "
            f"{tuple(control_out.shape)}")
    if mask is None:
        return unet_out + control_out
    if mask.shape != unet_out.shape[-2:]:
        raise ShapeError(
            f"mask resolution {tuple(mask.shape)} does not match features "
            f"{tuple(unet_out.shape[-2:])}")
    return unet_out + mask.to(unet_out.dtype) * control_out


class Denoiser(nn.Module):

    def __init__(self, config: ModelConfig = ModelConfig(),
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.channels
        de, da, dt = config.embed_dim, config.attn_dim, config.time_embed_dim

        self.tok_emb = nn.Embedding(len(config.vocab), de)
        self.time_emb = nn.Embedding(config.time_steps, dt)
        self.time_proj1 = nn.Linear(dt, c1)
        self.time_proj2 = nn.Linear(dt, c2)
        self.time_proj3 = nn.Linear(dt, c3)

        self.enc1 = nn.Conv2d(1, c1, 3, padding=1)
        self.enc2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)

        self.wq = nn.Linear(c3, da)
        self.wk = nn.Linear(de, da)
        self.wv = nn.Linear(de, da)
        self.wo = nn.Linear(da, c3)

        self.dec3 = nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1)
        self.dec2 = nn.Conv2d(c2, c2, 3, padding=1)
        self.dec1 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.dec0 = nn.Conv2d(c1, c1, 3, padding=1)
        self.out = nn.Conv2d(c1, 1, 3, padding=1)

        # control branch: structural copy of the encoder on [latent, condition]
        self.ctrl_enc1 = nn.Conv2d(2, c1, 3, padding=1)
        self.ctrl_enc2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.ctrl_enc3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.ctrl_time1 = nn.Linear(dt, c1)
        self.ctrl_time2 = nn.Linear(dt, c2)
        self.ctrl_time3 = nn.Linear(dt, c3)
        self.zproj1 = nn.Conv2d(c1, c1, 1)
        self.zproj2 = nn.Conv2d(c2, c2, 1)
        self.zproj3 = nn.Conv2d(c3, c3, 1)

        self.train_steps = 0
        self.control_train_steps = 0
        self.to(dtype)
        self.init_weights(seed=0)

    @property
    def dtype(self) -> torch.dtype:
        return self.enc1.weight.dtype

    def init_weights(self, seed: int) -> None:
        """Seeded Gaussian init; control output projections start at zero."""
        g = torch.Generator().manual_seed(seed)
        zero_names = ("zproj1", "zproj2", "zproj3")
        for name, p in self.named_parameters():
            if name.split(".")[0] in zero_names:
                with torch.no_grad():
                    p.zero_()
                continue
            with torch.no_grad():
                if p.dim() >= 2:
                    fan_in = p[0].numel()
                    std = 1.0 / math.sqrt(fan_in)
                    p.copy_(torch.randn(p.shape, generator=g,
                                        dtype=torch.float64).to(p.dtype) * std)
                else:
                    p.zero_()
        # embeddings get unit-ish scale so attention logits are informative
        with torch.no_grad():
            for emb in (self.tok_emb, self.time_emb):
                emb.weight.copy_(torch.randn(emb.weight.shape, generator=g,
                                             dtype=torch.float64
                                             ).to(emb.weight.dtype) * 0.5)

    def control_parameters(self):
        for name, p in self.named_parameters():
            if name.split(".")[0].startswith(("ctrl_", "zproj")):
                yield p

    # --- prompts ----------------------------------------------------------

    def token_id(self, token) -> int:
        if isinstance(token, int):
            if not 0 <= token < len(self.config.vocab):
                raise VocabularyError(f"token id {token} out of range")
            return token
        try:
            return self.config.vocab.index(token)
        except ValueError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def embed_prompt(self, tokens: Sequence) -> TokenPrompt:
        """Tokenize to a fixed-length prompt: background marker, shape
        tokens, padding."""
        ids = [BG_ID] + [self.token_id(tok) for tok in tokens]
        if len(ids) > self.config.max_tokens:
            raise ValidationError(
                f"prompt has {len(ids)} tokens, max is {self.config.max_tokens}")
        ids += [PAD_ID] * (self.config.max_tokens - len(ids))
        ids_t = torch.tensor(ids, dtype=torch.long)
        emb = self.tok_emb(ids_t).detach()
        return TokenPrompt(ids=tuple(ids), embeddings=emb,
                           vocab=self.config.vocab)

    # --- forward ----------------------------------------------------------

    def _attend(self, feats: torch.Tensor, emb: torch.Tensor, ftr):
        """Cross-attention over tokens at the bottleneck.

        feats: [B, c3, h, w]; emb: [B, n_tokens, embed_dim].
        Returns (features with attention residual, maps [B, n_tokens, h, w]).
        """
        b, c, h, w = feats.shape
        x = feats.flatten(2).transpose(1, 2)           # [B, P, c3]
        q = self.wq(x)
        k = self.wk(emb)
        v = self.wv(emb)
        logits = q @ k.transpose(1, 2) / math.sqrt(self.config.attn_dim)
        logits = logits - logits.max(dim=-1, keepdim=True).values.detach()
        e = torch.exp(logits)
        attn = e / e.sum(dim=-1, keepdim=True)          # [B, P, T]
        if ftr is not None:
            from .guidance import suppress_non_max
            gamma, subset = ftr
            attn = suppress_non_max(attn, gamma, subset=subset, token_dim=-1)
        out = x + self.wo(attn @ v)
        feats_out = out.transpose(1, 2).reshape(b, c, h, w)
        maps = attn.transpose(1, 2).reshape(b, emb.shape[1], h, w)
        return feats_out, maps

    def forward(self, z: torch.Tensor, t_index, prompt_ids: torch.Tensor,
                condition: Optional[torch.Tensor] = None, masks=None,
                ftr=None):
        """Predict the noise in ``z``.

        ``t_index`` is the zero-based timestep-embedding index; ``masks``
        maps feature resolution to a binary grid (None -> all-ones
        fusion); ``ftr`` is an optional ``(gamma, subset)`` suppression
        directive applied to the attention before value aggregation.
        Returns ``(eps_pred [B,1,H,W], attention maps [B, n_tokens, h, w])``.
        """
        if z.dim() != 4 or z.shape[1] != 1:
            raise ShapeError(f"latent must be [B,1,H,W], got {tuple(z.shape)}")
        b = z.shape[0]
        if not torch.is_tensor(t_index):
            t_index = torch.full((b,), int(t_index), dtype=torch.long)
        if prompt_ids.dim() == 1:
            prompt_ids = prompt_ids.unsqueeze(0).expand(b, -1)
        temb = self.time_emb(t_index)
        emb = self.tok_emb(prompt_ids)

        masks = masks or {}

        def mask_at(res):
            m = masks.get(res)
            return m.to(z.dtype) if m is not None else None

        if condition is not None:
            if condition.shape[-2:] != z.shape[-2:]:
                raise ShapeError(
                    f"condition resolution {tuple(condition.shape[-2:])} does "
                    f"not match latent {tuple(z.shape[-2:])}")
            cond = condition.reshape(-1, 1, *condition.shape[-2:]).to(z.dtype)
            if cond.shape[0] == 1 and b > 1:
                cond = cond.expand(b, -1, -1, -1)
            cin = torch.cat([z, cond], dim=1)
            g1 = F.silu(self.ctrl_enc1(cin) + self.ctrl_time1(temb)[:, :, None, None])
            g2 = F.silu(self.ctrl_enc2(g1) + self.ctrl_time2(temb)[:, :, None, None])
            g3 = F.silu(self.ctrl_enc3(g2) + self.ctrl_time3(temb)[:, :, None, None])
            r1, r2, r3 = self.zproj1(g1), self.zproj2(g2), self.zproj3(g3)

        h1 = F.silu(self.enc1(z) + self.time_proj1(temb)[:, :, None, None])
        h2 = F.silu(self.enc2(h1) + self.time_proj2(temb)[:, :, None, None])
        h3 = F.silu(self.enc3(h2) + self.time_proj3(temb)[:, :, None, None])

        if condition is not None:
            h3 = fuse_control(h3, r3, mask_at(h3.shape[-1]))
        h3, maps = self._attend(h3, emb, ftr)

        d = F.silu(self.dec3(h3))
        skip2 = h2 if condition is None else \
            fuse_control(h2, r2, mask_at(h2.shape[-1]))
        d = F.silu(self.dec2(d + skip2))
        d = F.silu(self.dec1(d))
        skip1 = h1 if condition is None else \
            fuse_control(h1, r1, mask_at(h1.shape[-1]))
        d = F.silu(self.dec0(d + skip1))
        return self.out(d), maps

    # --- spec-level single-sample API ------------------------------------

    def cross_attention(self, features: torch.Tensor, prompt: TokenPrompt,
                        ftr=None):
        """Single-sample attention block: returns (features, AttentionStack)."""
        feats = features.unsqueeze(0) if features.dim() == 3 else features
        emb = prompt.embeddings.to(self.dtype).unsqueeze(0)
        out, maps = self._attend(feats, emb, ftr)
        stack = AttentionStack(t=-1, maps=maps[0], token_ids=prompt.ids)
        return (out[0] if features.dim() == 3 else out), stack

    def denoiser_forward(self, z: torch.Tensor, t_index: int,
                         prompt: TokenPrompt,
                         condition: Optional[torch.Tensor] = None,
                         mask_mode="none", ftr=None):
        """Single-sample forward returning an :class:`AttentionStack`.

        ``mask_mode`` is ``"none"`` (all-ones fusion when a condition is
        present) or a :class:`~localdiff.guidance.ControlMask` applied at
        every injection point (the feature-mask constraint).
        """
        if mask_mode != "none" and condition is None:
            raise UsageError("feature-mask forward requires a condition image")
        masks = None
        if mask_mode != "none":
            c = self.config
            masks = {res: mask_mode.tensor(res, dtype=self.dtype)
                     for res in (c.canvas, c.canvas // 2, c.attn_res)}
        zb = z if z.dim() == 4 else z.reshape(1, 1, *z.shape[-2:])
        ids = torch.tensor(prompt.ids, dtype=torch.long)
        eps, maps = self.forward(zb, t_index, ids, condition=condition,
                                 masks=masks, ftr=ftr)
        stack = AttentionStack(t=t_index, maps=maps[0], token_ids=prompt.ids)
        return eps, stack
