"""Quantitative evaluation helpers.

All metrics operate at image resolution (users judge pixels, not latents).
Color values are in [0, 1]; the stroke RMSE is therefore also on a [0, 1]
scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch

from .errors import InvalidInput


def stroke_rmse(
    output: torch.Tensor, stroke_rgb: torch.Tensor, stroke_mask: torch.Tensor
) -> float:
    """RMSE between output and stroke colors over stroked pixels, channels pooled."""
    if output.shape != stroke_rgb.shape:
        raise InvalidInput("output and stroke shapes must match")
    if stroke_mask.shape != output.shape[-2:]:
        raise InvalidInput("stroke mask must be at image resolution")
    sel = stroke_mask.to(torch.bool)
    if not sel.any():
        raise InvalidInput("stroke mask is empty")
    diff = (output.to(torch.float64) - stroke_rgb.to(torch.float64))[:, sel]
    return float(torch.sqrt((diff**2).mean()))


def known_region_error(
    output: torch.Tensor, original: torch.Tensor, m: torch.Tensor
) -> float:
    """Max absolute pixel difference over the known region; 0 if m is empty."""
    if output.shape != original.shape:
        raise InvalidInput("image shapes must match")
    sel = m.to(torch.bool)
    if not sel.any():
        return 0.0
    diff = (output.to(torch.float64) - original.to(torch.float64)).abs()[:, sel]
    return float(diff.max())


def embed_similarity(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity of two embedding vectors, scaled by 100."""
    na, nb = float(a.norm()), float(b.norm())
    if na == 0.0 or nb == 0.0:
        raise InvalidInput("zero-norm embedding")
    return float(a.double() @ b.double()) / (na * nb) * 100.0


@dataclass
class MetricReport:
    """Per-sample metric values with aggregate statistics."""

    metric: str
    values: list[float]
    mask_provenance: str = ""
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if any(math.isnan(v) for v in self.values):
            raise InvalidInput("metric values must be NaN-free")
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(len(self.values))]

    @property
    def mean(self) -> float:
        return sum(self.values) / len(self.values) if self.values else 0.0

    @property
    def stddev(self) -> float:
        if len(self.values) < 2:
            return 0.0
        mu = self.mean
        return math.sqrt(sum((v - mu) ** 2 for v in self.values) / (len(self.values) - 1))

    def to_lines(self) -> list[str]:
        return [
            f"metric={self.metric} sample={sid} value={v:.9f}"
            for sid, v in zip(self.sample_ids, self.values)
        ]

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "count": len(self.values),
            "mean": self.mean,
            "stddev": self.stddev,
            "values": self.values,
            "sample_ids": self.sample_ids,
            "mask_provenance": self.mask_provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)
