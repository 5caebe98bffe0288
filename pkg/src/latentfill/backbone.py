"""Trainable noise predictor, text encoder, and parameter bookkeeping.

The denoiser is a deliberately small U-Net: two downsampling stages with
self- and cross-attention blocks at the two lowest feature resolutions and a
sinusoidal timestep embedding feeding every residual block. It exercises every
mechanism the sampler relies on (timestep conditioning, text conditioning
through cross-attention, attention-mask injection) at desk scale. Anything
matching the :class:`BackendAdapter` protocol can be substituted for it; the
toy network is the reference implementation and the one under test.

All parameters and activations are float64 to match latent-space math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol, runtime_checkable

import torch
from torch import nn

from . import tokenizer
from .attention import AttentionMaskSet, masked_attention
from .codec import LATENT_DTYPE
from .errors import InvalidInput

CHECKPOINT_VERSION = "latentfill-ckpt-v1"


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 192  # 3 * f**2 for codec factor 8
    widths: tuple[int, int, int] = (32, 48, 64)
    text_dim: int = 48
    time_dim: int = 48
    vocab_size: int = tokenizer.VOCAB_SIZE
    max_text_len: int = 32
    norm_groups: int = 8

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "widths": list(self.widths),
            "text_dim": self.text_dim,
            "time_dim": self.time_dim,
            "vocab_size": self.vocab_size,
            "max_text_len": self.max_text_len,
            "norm_groups": self.norm_groups,
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return BackboneConfig(**d)


PRESETS = {
    "small": BackboneConfig(),
    "base": BackboneConfig(widths=(64, 96, 128), text_dim=64, time_dim=64),
}


def sinusoidal_embedding(position: float, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=LATENT_DTYPE) / max(half - 1, 1)
    )
    args = position * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb).view(1, -1, 1, 1)
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class AttnBlock(nn.Module):
    """Self-attention followed by text cross-attention, both mask-aware."""

    def __init__(self, channels: int, text_dim: int, groups: int):
        super().__init__()
        self.norm_self = nn.GroupNorm(groups, channels)
        self.q_self = nn.Linear(channels, channels)
        self.k_self = nn.Linear(channels, channels)
        self.v_self = nn.Linear(channels, channels)
        self.out_self = nn.Linear(channels, channels)
        self.norm_cross = nn.GroupNorm(groups, channels)
        self.q_cross = nn.Linear(channels, channels)
        self.k_cross = nn.Linear(text_dim, channels)
        self.v_cross = nn.Linear(text_dim, channels)
        self.out_cross = nn.Linear(channels, channels)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor,
        masks: AttentionMaskSet | None,
    ) -> torch.Tensor:
        _, c, h, w = x.shape
        seq = self.norm_self(x).reshape(c, h * w).T
        self_mask = masks.self_mask(h, w) if masks is not None else None
        attn = masked_attention(
            self.q_self(seq), self.k_self(seq), self.v_self(seq), self_mask
        )
        x = x + self.out_self(attn).T.reshape(1, c, h, w)

        seq = self.norm_cross(x).reshape(c, h * w).T
        cross_mask = (
            masks.cross_mask(h, w, text.shape[0]) if masks is not None else None
        )
        attn = masked_attention(
            self.q_cross(seq), self.k_cross(text), self.v_cross(text), cross_mask
        )
        return x + self.out_cross(attn).T.reshape(1, c, h, w)


class Denoiser(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        w0, w1, w2 = config.widths
        g = config.norm_groups
        td = config.time_dim

        self.token_embedding = nn.Embedding(config.vocab_size, config.text_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(td, td * 2), nn.SiLU(), nn.Linear(td * 2, td)
        )

        self.conv_in = nn.Conv2d(config.latent_channels, w0, 3, padding=1)
        self.down0 = ResBlock(w0, w0, td, g)
        self.downsample0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.down1 = ResBlock(w1, w1, td, g)
        self.attn_down1 = AttnBlock(w1, config.text_dim, g)
        self.downsample1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(w2, w2, td, g)
        self.attn_mid = AttnBlock(w2, config.text_dim, g)
        self.mid2 = ResBlock(w2, w2, td, g)
        self.upsample1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.up1 = ResBlock(w1 * 2, w1, td, g)
        self.attn_up1 = AttnBlock(w1, config.text_dim, g)
        self.upsample0 = nn.Conv2d(w1, w0, 3, padding=1)
        self.up0 = ResBlock(w0 * 2, w0, td, g)
        self.norm_out = nn.GroupNorm(g, w0)
        self.conv_out = nn.Conv2d(w0, config.latent_channels, 3, padding=1)
        # Zero-initialized time-conditioned passthrough gain (EDM-style skip
        # preconditioning). The normalization stack erases input scale, which
        # makes the dominant "noise is mostly the input at high t" component
        # slow to learn; this gives the optimizer a direct path to it.
        self.out_gain = nn.Linear(td, config.latent_channels)
        nn.init.zeros_(self.out_gain.weight)
        nn.init.zeros_(self.out_gain.bias)

    def encode_text(self, token_ids: list[int]) -> torch.Tensor:
        """Embedding lookup plus sinusoidal positional encoding; (L, text_dim)."""
        tokenizer.check_ids(token_ids)
        if len(token_ids) > self.config.max_text_len:
            raise InvalidInput(
                f"sequence length {len(token_ids)} exceeds context limit "
                f"{self.config.max_text_len}"
            )
        if max(token_ids, default=0) >= self.config.vocab_size:
            raise InvalidInput("token id outside backbone vocabulary")
        ids = torch.tensor(token_ids, dtype=torch.long)
        emb = self.token_embedding(ids)
        pos = torch.stack(
            [sinusoidal_embedding(i, self.config.text_dim) for i in range(len(token_ids))]
        )
        return emb + pos

    def forward(
        self,
        x_t: torch.Tensor,
        cond: torch.Tensor,
        t: int,
        masks: AttentionMaskSet | None = None,
    ) -> torch.Tensor:
        if x_t.ndim != 3 or x_t.shape[0] != self.config.latent_channels:
            raise InvalidInput(
                f"latent shape {tuple(x_t.shape)} does not match backbone config "
                f"({self.config.latent_channels} channels)"
            )
        if x_t.shape[1] % 4 or x_t.shape[2] % 4:
            raise InvalidInput("latent spatial dims must be divisible by 4")
        t_emb = self.time_mlp(sinusoidal_embedding(float(t), self.config.time_dim))

        x = x_t.unsqueeze(0)
        h0 = self.down0(self.conv_in(x), t_emb)
        h1 = self.down1(self.downsample0(h0), t_emb)
        h1 = self.attn_down1(h1, cond, masks)
        h2 = self.mid1(self.downsample1(h1), t_emb)
        h2 = self.attn_mid(h2, cond, masks)
        h2 = self.mid2(h2, t_emb)
        u1 = self.upsample1(
            torch.nn.functional.interpolate(h2, scale_factor=2, mode="nearest")
        )
        u1 = self.up1(torch.cat([u1, h1], dim=1), t_emb)
        u1 = self.attn_up1(u1, cond, masks)
        u0 = self.upsample0(
            torch.nn.functional.interpolate(u1, scale_factor=2, mode="nearest")
        )
        u0 = self.up0(torch.cat([u0, h0], dim=1), t_emb)
        out = self.conv_out(torch.nn.functional.silu(self.norm_out(u0)))
        out = out + self.out_gain(t_emb).view(1, -1, 1, 1) * x
        return out.squeeze(0)


@runtime_checkable
class BackendAdapter(Protocol):
    """Minimal surface the sampler and finetuner need from a diffusion backend."""

    def predict_noise(
        self,
        x_t: torch.Tensor,
        cond: torch.Tensor,
        t: int,
        masks: AttentionMaskSet | None = None,
    ) -> torch.Tensor: ...

    def encode_text(self, token_ids: list[int]) -> torch.Tensor: ...


@dataclass
class ParameterSet:
    """A denoiser parameter snapshot plus provenance metadata.

    Single-writer/multi-reader: finetuning requires exclusive access; after
    that the set may be shared freely across concurrent sampling jobs.
    """

    model: Denoiser
    version: str = CHECKPOINT_VERSION
    iterations: int = 0
    config: BackboneConfig = field(default_factory=BackboneConfig)

    def predict_noise(
        self,
        x_t: torch.Tensor,
        cond: torch.Tensor,
        t: int,
        masks: AttentionMaskSet | None = None,
    ) -> torch.Tensor:
        return self.model(x_t, cond, t, masks)

    def encode_text(self, token_ids: list[int]) -> torch.Tensor:
        return self.model.encode_text(token_ids)

    def arrays(self) -> dict[str, torch.Tensor]:
        return {name: p.detach() for name, p in self.model.state_dict().items()}

    def clone(self) -> "ParameterSet":
        fresh = Denoiser(self.config).to(LATENT_DTYPE)
        fresh.load_state_dict(
            {k: v.clone() for k, v in self.model.state_dict().items()}
        )
        return replace(self, model=fresh)


def build_params(config: BackboneConfig | None = None, seed: int = 0) -> ParameterSet:
    """Deterministically initialized parameter set; same seed -> same weights."""
    config = config or BackboneConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(config).to(LATENT_DTYPE)
    return ParameterSet(model=model, config=config)
