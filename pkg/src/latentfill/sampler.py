"""Inpainting sampling loop: DDIM with per-step known-region blending,
stroke injection at tau, mixed-guidance conditioning, and CFG.

Loop structure per output: draw the initial latent and a fixed blending noise
from the per-output generator (in that order; the draw order is part of the
determinism contract, tests re-derive it), then walk the strided timestep grid.
Each step: pick the active condition, predict noise (two predictions combined
by CFG when a semantic condition is active), take the deterministic DDIM step,
inject the stroke if this step lands on tau, then re-impose the known region
at the new noise level. Blending uses the same fixed noise at every step so
the known region follows one coherent trajectory; at t = 0 it restores the
input latent exactly.

Stroke blending precedes known-region blending, so strokes can never
overwrite known pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from . import codec
from .attention import AttentionMaskSet
from .codec import LATENT_DTYPE
from .errors import InvalidInput, SamplingError
from .guidance import GuidanceSpec, StrokeMap, compose_condition
from .schedule import NoiseSchedule, add_noise, cfg_combine, ddim_step, strided_timesteps
from .tokenizer import null_sequence


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    attn_mask_enabled: bool = True
    stride: str = "uniform"

    def __post_init__(self):
        if self.num_steps < 1:
            raise InvalidInput("num_steps must be >= 1")
        if self.stride != "uniform":
            raise InvalidInput(f"unknown stride scheme {self.stride!r}")


def blend_known(
    x_t: torch.Tensor,
    x_in: torch.Tensor,
    m: torch.Tensor,
    t: int,
    eps_fixed: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Replace the known region of ``x_t`` with the input noised to level t."""
    if x_t.shape != x_in.shape or m.shape != x_t.shape[-2:]:
        raise InvalidInput("latent/mask shapes inconsistent")
    noised = add_noise(x_in, t, eps_fixed, sched)
    return torch.where(m.to(torch.bool), noised, x_t)


def blend_stroke(
    x_t: torch.Tensor,
    stroke: StrokeMap,
    t: int,
    tau_step: int,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """At t == tau_step replace stroke cells with the noised stroke latent;
    identity at every other step."""
    if t != tau_step:
        return x_t
    noised = add_noise(stroke.latent, t, eps, sched)
    return torch.where(stroke.mask.to(torch.bool), noised, x_t)


def map_tau(tau: float, steps: list[int], T: int) -> int:
    """Nearest-not-greater mapping of a tau fraction onto the strided grid."""
    target = tau * T
    eligible = [t for t in steps if t <= target]
    return max(eligible) if eligible else steps[-1]


def output_seed(seed: int, index: int) -> int:
    # Fixed mixing formula; part of the determinism contract.
    return (seed * 1_000_003 + index) % (2**63)


ProgressFn = Callable[[dict], None]


def inpaint(
    params,
    x_in: torch.Tensor,
    m: torch.Tensor,
    spec: GuidanceSpec,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    on_step: ProgressFn | None = None,
    factor: int = codec.DEFAULT_FACTOR,
    image: torch.Tensor | None = None,
    image_mask: torch.Tensor | None = None,
) -> list[torch.Tensor]:
    """Run the full inpainting job and return decoded image buffers.

    ``params`` is any backend exposing ``predict_noise``/``encode_text``
    (normally a finetuned :class:`~latentfill.backbone.ParameterSet`). The
    caller is responsible for spec validation and for ensuring the parameters
    were finetuned on this input.

    When ``image`` and ``image_mask`` are given, known pixels are restored
    from the source image after decoding. Latent blending already forces this
    for cells fully inside the known region; the pixel composite extends
    exactness to known pixels whose latent cell straddles the hole boundary
    (the conservative mask downscale hands those cells to the sampler).
    """
    if x_in.shape[-2:] != m.shape:
        raise InvalidInput("latent and mask spatial dims must match")
    if (image is None) != (image_mask is None):
        raise InvalidInput("image and image_mask must be given together")
    steps = strided_timesteps(sched.T, cfg.num_steps)
    tau_step = None
    if spec.stroke is not None:
        if spec.tau is None:
            raise InvalidInput("stroke guidance requires tau (run validate_spec)")
        tau_step = map_tau(spec.tau, steps, sched.T)

    null_emb = params.encode_text(null_sequence())
    cond_emb = None
    if spec.has_semantic:
        cond_emb = params.encode_text(
            compose_condition(spec.prompt, spec.subject_token)
        )
    masks = AttentionMaskSet(m) if cfg.attn_mask_enabled else None

    def condition_at(t: int) -> torch.Tensor | None:
        """Active semantic condition at eval time t; None means unconditional."""
        if cond_emb is None:
            return None
        if tau_step is not None and t > tau_step:
            return None
        return cond_emb

    outputs = []
    for k in range(spec.num_outputs):
        gen = torch.Generator().manual_seed(output_seed(spec.seed, k))
        x = torch.randn(x_in.shape, generator=gen, dtype=LATENT_DTYPE)
        eps_fixed = torch.randn(x_in.shape, generator=gen, dtype=LATENT_DTYPE)
        if tau_step == sched.T:
            x = blend_stroke(x, spec.stroke, sched.T, tau_step, eps_fixed, sched)

        with torch.no_grad():
            for i, (t, t_prev) in enumerate(zip(steps[:-1], steps[1:])):
                cond = condition_at(t)
                if cond is None:
                    eps_hat = params.predict_noise(x, null_emb, t, masks)
                else:
                    eps_u = params.predict_noise(x, null_emb, t, masks)
                    eps_c = params.predict_noise(x, cond, t, masks)
                    eps_hat = cfg_combine(eps_u, eps_c, spec.scale)
                x = ddim_step(x, eps_hat, t, t_prev, sched)
                if spec.stroke is not None:
                    x = blend_stroke(x, spec.stroke, t_prev, tau_step, eps_fixed, sched)
                x = blend_known(x, x_in, m, t_prev, eps_fixed, sched)
                if not torch.isfinite(x).all():
                    raise SamplingError(
                        "non-finite latent during sampling", step=i, timestep=t_prev
                    )
                if on_step is not None:
                    on_step(
                        {
                            "output": k,
                            "step": i,
                            "t": t_prev,
                            "conditional": cond is not None,
                            "stroke_blended": spec.stroke is not None
                            and t_prev == tau_step,
                        }
                    )
        decoded = codec.decode(x, factor)
        if image is not None:
            decoded = torch.where(image_mask.to(torch.bool), image, decoded)
        outputs.append(decoded)
    return outputs
