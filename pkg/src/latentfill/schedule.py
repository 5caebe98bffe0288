"""Noise schedule, forward noising, deterministic DDIM stepping, and CFG.

Index convention: ``alpha_bar[0] == 1`` denotes clean data; ``alpha_bar[t]``
for t in 1..T is the cumulative signal-retention coefficient after t noising
steps. Sampling walks a strided descending subsequence of [0, T].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .codec import LATENT_DTYPE
from .errors import InvalidInput

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone signal-retention sequence alpha_bar indexed 0..T."""

    T: int
    alpha_bar: torch.Tensor  # shape (T + 1,), float64, alpha_bar[0] == 1

    def __post_init__(self):
        if self.alpha_bar.shape != (self.T + 1,):
            raise InvalidInput("alpha_bar length must be T + 1")

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise InvalidInput(f"timestep {t} outside [0, {self.T}]")
        return t


def make_schedule(
    T: int,
    kind: str = "linear",
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    """Standard linear-beta construction: alpha_bar[t] = prod_{i<=t}(1 - beta_i)."""
    if T < 1:
        raise InvalidInput(f"T must be >= 1, got {T}")
    if kind != "linear":
        raise InvalidInput(f"unknown schedule kind {kind!r}")
    betas = torch.linspace(beta_min, beta_max, T, dtype=LATENT_DTYPE)
    alpha_bar = torch.cat(
        [torch.ones(1, dtype=LATENT_DTYPE), torch.cumprod(1.0 - betas, dim=0)]
    )
    return NoiseSchedule(T=T, alpha_bar=alpha_bar)


def add_noise(
    x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward noising: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    t = sched.check_t(t)
    if x0.shape != eps.shape:
        raise InvalidInput(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ab = sched.alpha_bar[t]
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def ddim_step(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One deterministic reverse step (eta = 0).

    Predicts clean data from the noise estimate, then re-noises it to the
    previous level:

        x_prev = sqrt(ab_prev) * (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)
                 + sqrt(1 - ab_prev) * eps
    """
    t = sched.check_t(t)
    t_prev = sched.check_t(t_prev)
    if t_prev >= t:
        raise InvalidInput(f"t_prev ({t_prev}) must be < t ({t})")
    if x_t.shape != eps_pred.shape:
        raise InvalidInput("x_t and eps_pred shapes must match")
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    x0_pred = (x_t - torch.sqrt(1.0 - ab_t) * eps_pred) / torch.sqrt(ab_t)
    return torch.sqrt(ab_prev) * x0_pred + torch.sqrt(1.0 - ab_prev) * eps_pred


def cfg_combine(
    eps_uncond: torch.Tensor, eps_cond: torch.Tensor, s: float
) -> torch.Tensor:
    """Classifier-free guidance: eps_u + s * (eps_c - eps_u)."""
    if eps_uncond.shape != eps_cond.shape:
        raise InvalidInput("prediction shapes must match")
    return eps_uncond + s * (eps_cond - eps_uncond)


def strided_timesteps(T: int, num_steps: int) -> list[int]:
    """Descending uniform-stride grid from T to 0 with ``num_steps`` intervals.

    Endpoints T and 0 are always included, so a full pass performs exactly
    ``num_steps`` DDIM steps.
    """
    if num_steps < 1:
        raise InvalidInput(f"num_steps must be >= 1, got {num_steps}")
    if num_steps > T:
        raise InvalidInput(f"num_steps ({num_steps}) cannot exceed T ({T})")
    return [T * i // num_steps for i in range(num_steps, -1, -1)]
