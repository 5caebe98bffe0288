"""Multimodal image inpainting on a finetuned latent denoiser.

Workflow: encode an image and mask into latent space, finetune the denoiser to
reconstruct the known region (optionally binding an exemplar to a subject
token), then sample with per-step known-region blending under unconditional,
text, exemplar, stroke, or mixed guidance.
"""

from .backbone import BackboneConfig, ParameterSet, build_params
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import decode, downsample_mask, encode
from .finetune import ExemplarBundle, FinetuneConfig, run_finetune
from .guidance import GuidanceSpec, StrokeMap, ToyJointEmbedder, auto_subject_token, validate_spec
from .metrics import MetricReport, known_region_error, stroke_rmse
from .sampler import SamplerConfig, inpaint
from .schedule import NoiseSchedule, add_noise, cfg_combine, ddim_step, make_schedule

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ParameterSet",
    "build_params",
    "load_checkpoint",
    "save_checkpoint",
    "encode",
    "decode",
    "downsample_mask",
    "ExemplarBundle",
    "FinetuneConfig",
    "run_finetune",
    "GuidanceSpec",
    "StrokeMap",
    "ToyJointEmbedder",
    "auto_subject_token",
    "validate_spec",
    "MetricReport",
    "known_region_error",
    "stroke_rmse",
    "SamplerConfig",
    "inpaint",
    "NoiseSchedule",
    "add_noise",
    "cfg_combine",
    "ddim_step",
    "make_schedule",
    "__version__",
]
