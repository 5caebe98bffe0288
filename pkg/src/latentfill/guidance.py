"""Guidance bundle validation, condition composition, and subject-token retrieval.

A guidance spec carries everything a sampling job needs beyond the session
inputs: optional prompt, optional exemplar subject token, optional stroke map,
the stroke injection point tau (fraction of T), guidance scale, seed, and
output count. The unconditional mode (all optionals absent) is always valid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol, runtime_checkable

import torch

from . import codec, tokenizer
from .codec import LATENT_DTYPE
from .errors import InvalidInput, SpecValidationError

DEFAULT_SCALE = 8.0
DEFAULT_STEPS = 50
DEFAULT_TAU = 0.55  # midpoint of the balanced range


@dataclass
class StrokeMap:
    """Stroke hint in latent space: content plus the cells it covers."""

    latent: torch.Tensor  # stroke latent, same shape as the session latent
    mask: torch.Tensor  # {0,1} at latent resolution; 1 = stroked cell


@dataclass
class GuidanceSpec:
    prompt: str | None = None
    subject_token: int | None = None
    stroke: StrokeMap | None = None
    tau: float | None = None
    scale: float = DEFAULT_SCALE
    seed: int = 0
    num_outputs: int = 1
    num_steps: int = DEFAULT_STEPS
    attn_mask: bool = True

    @property
    def has_semantic(self) -> bool:
        return self.prompt is not None or self.subject_token is not None


def stroke_from_rgba(
    rgba: torch.Tensor, session_mask: torch.Tensor, factor: int = codec.DEFAULT_FACTOR
) -> StrokeMap:
    """Build a stroke map from an RGBA buffer.

    Pixels with alpha > 0 define the stroke; they must all lie in the hole
    (session mask == 0). The RGB layer is composed over mid-gray before
    encoding so unpainted pixels map to zero latent content; only fully
    painted latent cells survive the conservative mask downsampling.
    """
    codec.check_image(rgba, channels=4)
    rgb, alpha = rgba[:3], rgba[3]
    painted = (alpha > 0).to(LATENT_DTYPE)
    if painted.shape != session_mask.shape:
        raise SpecValidationError("stroke", "stroke dims do not match session image")
    overlap = painted * session_mask
    if overlap.any():
        raise SpecValidationError(
            "stroke", f"{int(overlap.sum())} stroke pixels fall on the known region"
        )
    filled = torch.where(alpha > 0, rgb, torch.tensor(0.5, dtype=rgb.dtype))
    latent = codec.encode(filled, factor)
    mask = codec.downsample_mask(painted, factor)
    return StrokeMap(latent=latent, mask=mask)


@runtime_checkable
class JointEmbedder(Protocol):
    """Paired text/image embedding maps sharing one vector space."""

    @property
    def text_table(self) -> torch.Tensor:
        """Precomputed per-token embeddings, shape (vocab, dim)."""
        ...

    def embed_image(self, image: torch.Tensor) -> torch.Tensor: ...


class ToyJointEmbedder:
    """Deterministic stand-in embedder: fixed random projections.

    Token side: a seeded random table over the whole vocabulary. Image side:
    flattened patches through a fixed projection, mean-pooled. A real
    CLIP-style adapter slots in through the same protocol.
    """

    def __init__(
        self,
        vocab_size: int = tokenizer.VOCAB_SIZE,
        dim: int = 32,
        patch: int = 8,
        seed: int = 0,
    ):
        g = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.patch = patch
        self._text = torch.randn(vocab_size, dim, generator=g, dtype=LATENT_DTYPE)
        self._proj = torch.randn(3 * patch * patch, dim, generator=g, dtype=LATENT_DTYPE)

    @property
    def text_table(self) -> torch.Tensor:
        return self._text

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        codec.check_image(image)
        p = self.patch
        _, h, w = image.shape
        if h % p or w % p:
            raise InvalidInput(f"image dims must be divisible by patch size {p}")
        patches = (
            image.to(LATENT_DTYPE)
            .reshape(3, h // p, p, w // p, p)
            .permute(1, 3, 0, 2, 4)
            .reshape(-1, 3 * p * p)
        )
        return (patches @ self._proj).mean(dim=0)


def auto_subject_token(x_ref: torch.Tensor, embedder: JointEmbedder) -> int:
    """Retrieve the vocabulary token whose text embedding best matches the
    exemplar image embedding (highest dot product; ties -> lowest id)."""
    image_emb = embedder.embed_image(x_ref)
    table = embedder.text_table
    if table.shape[1] != image_emb.shape[0]:
        raise InvalidInput(
            f"embedder dim mismatch: text {table.shape[1]} vs image {image_emb.shape[0]}"
        )
    scores = table @ image_emb
    return int(torch.argmax(scores))  # argmax returns the first (lowest-id) maximum


def compose_condition(
    prompt: str | None, subject_token: int | None, token_position: str = "after_prompt"
) -> list[int]:
    """Token sequence for the combined condition: [BOS, prompt tokens, v*, EOS].

    Absent parts are omitted; both absent yields the null-text sequence. The
    subject token sits after the prompt by default; ``token_position``
    ("after_prompt" | "before_prompt") exposes the ordering since it is a
    grammar choice, not a fixed rule.
    """
    if token_position not in ("after_prompt", "before_prompt"):
        raise InvalidInput(f"unknown token_position {token_position!r}")
    if prompt is None and subject_token is None:
        return tokenizer.null_sequence()
    ids = tokenizer.tokenize(prompt or "")
    if subject_token is not None:
        tokenizer.check_ids([subject_token])
        at = len(ids) - 1 if token_position == "after_prompt" else 1
        ids.insert(at, subject_token)
    return ids


def validate_spec(spec: GuidanceSpec, session_mask_latent: torch.Tensor) -> GuidanceSpec:
    """Normalize a spec against a session: fill defaults, reject inconsistencies."""
    if spec.num_outputs < 1:
        raise SpecValidationError("num_outputs", "must be >= 1")
    if spec.num_steps < 1:
        raise SpecValidationError("num_steps", "must be >= 1")
    if spec.scale < 0:
        raise SpecValidationError("scale", "must be >= 0")
    if spec.subject_token is not None:
        try:
            tokenizer.check_ids([spec.subject_token])
        except InvalidInput as exc:
            raise SpecValidationError("subject_token", str(exc)) from exc

    tau = spec.tau
    if spec.stroke is None:
        if tau is not None:
            raise SpecValidationError("tau", "tau given but no stroke present")
    else:
        if tau is None:
            tau = DEFAULT_TAU
        if not 0.0 <= tau <= 1.0:
            raise SpecValidationError("tau", f"must be in [0, 1], got {tau}")
        stroke = spec.stroke
        if stroke.mask.shape != session_mask_latent.shape:
            raise SpecValidationError("stroke", "stroke mask resolution mismatch")
        if (stroke.mask * session_mask_latent).any():
            raise SpecValidationError("stroke", "stroke cells overlap the known region")
    return replace(spec, tau=tau)
