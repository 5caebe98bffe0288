"""Masked attention and the construction of cross-/self-attention masks.

The mask multiplies attention weights AFTER the softmax, with no
renormalization: zeroed weights remove a key's value contribution while the
remaining weights keep their original softmax values. Consequences relied on
elsewhere:

- cross-attention: a known pixel's output row is exactly the zero vector when
  its mask row is zero, so text cannot write into the known region;
- self-attention: a known query's output never contains value contributions
  from unknown keys, so inpainted content cannot leak into the known region.

An optional pre-softmax additive mode exists for experiments but is off by
default everywhere.
"""

from __future__ import annotations

import math

import torch

from .codec import downsample_mask
from .errors import InvalidInput


def masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor | None = None,
    pre_softmax: bool = False,
) -> torch.Tensor:
    """Scaled dot-product attention with an optional binary weight mask.

    ``q``: (n, d), ``k``: (m, d), ``v``: (m, dv), ``mask``: (n, m) or None.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise InvalidInput("q, k, v must be 2-D")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise InvalidInput(
            f"inconsistent attention dims: q {tuple(q.shape)}, k {tuple(k.shape)}, "
            f"v {tuple(v.shape)}"
        )
    logits = q @ k.T / math.sqrt(q.shape[1])
    if mask is not None:
        if mask.shape != (q.shape[0], k.shape[0]):
            raise InvalidInput(
                f"mask shape {tuple(mask.shape)} != ({q.shape[0]}, {k.shape[0]})"
            )
        if not torch.all((mask == 0) | (mask == 1)):
            raise InvalidInput("attention mask must be binary")
        if pre_softmax:
            logits = logits.masked_fill(mask == 0, float("-inf"))
            return torch.nan_to_num(torch.softmax(logits, dim=-1)) @ v
        return (torch.softmax(logits, dim=-1) * mask) @ v
    return torch.softmax(logits, dim=-1) @ v


def build_cross_mask(m_feat: torch.Tensor, text_len: int) -> torch.Tensor:
    """Cross-attention mask (n^2 x l): row i is all zeros iff pixel i is known."""
    known = m_feat.reshape(-1) == 1
    rows = torch.where(known, 0.0, 1.0).to(m_feat.dtype)
    return rows.unsqueeze(1).expand(-1, text_len).clone()


def build_self_mask(m_feat: torch.Tensor) -> torch.Tensor:
    """Self-attention mask (n^2 x n^2).

    Entry (q, k) is 0 iff query q is known AND key k is unknown; known-region
    queries may not attend to hole keys. The transposed orientation (blocking
    unknown queries from known keys) is selectable via
    :class:`AttentionMaskSet(orientation="block_unknown_queries")` since the
    index roles are a modelling choice.
    """
    flat = m_feat.reshape(-1)
    known_q = (flat == 1).unsqueeze(1)
    unknown_k = (flat == 0).unsqueeze(0)
    return torch.where(known_q & unknown_k, 0.0, 1.0).to(m_feat.dtype)


class AttentionMaskSet:
    """Per-resolution attention masks derived from one latent-resolution mask.

    Feature masks are produced with the conservative all-known downsampling
    rule. Instances are built per sampling job and cached lazily; they must
    not be shared across concurrently running jobs.
    """

    def __init__(self, latent_mask: torch.Tensor, orientation: str = "block_known_queries"):
        if orientation not in ("block_known_queries", "block_unknown_queries"):
            raise InvalidInput(f"unknown self-mask orientation {orientation!r}")
        self.latent_mask = latent_mask
        self.orientation = orientation
        self._feature: dict[tuple[int, int], torch.Tensor] = {}
        self._self: dict[tuple[int, int], torch.Tensor] = {}
        self._cross: dict[tuple[int, int, int], torch.Tensor] = {}

    def feature_mask(self, h: int, w: int) -> torch.Tensor:
        key = (h, w)
        if key not in self._feature:
            lh, lw = self.latent_mask.shape
            if lh % h or lw % w or lh // h != lw // w:
                raise InvalidInput(
                    f"feature shape {h}x{w} is not an integer downscale of latent "
                    f"mask {lh}x{lw}"
                )
            factor = lh // h
            self._feature[key] = (
                self.latent_mask if factor == 1 else downsample_mask(self.latent_mask, factor)
            )
        return self._feature[key]

    def self_mask(self, h: int, w: int) -> torch.Tensor:
        key = (h, w)
        if key not in self._self:
            m = self.feature_mask(h, w)
            mask = build_self_mask(m)
            if self.orientation == "block_unknown_queries":
                mask = mask.T.contiguous()
            self._self[key] = mask
        return self._self[key]

    def cross_mask(self, h: int, w: int, text_len: int) -> torch.Tensor:
        key = (h, w, text_len)
        if key not in self._cross:
            self._cross[key] = build_cross_mask(self.feature_mask(h, w), text_len)
        return self._cross[key]
