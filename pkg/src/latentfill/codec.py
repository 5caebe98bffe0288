"""Invertible image <-> latent conversion and mask resolution transfer.

Conventions used throughout the package:

- An image buffer is a float32 tensor of shape ``(C, H, W)`` with values in
  ``[0, 1]``. RGB buffers have ``C = 3``; stroke input adds an alpha channel.
- A latent map is a float64 tensor of shape ``(3 * f**2, H/f, W/f)``.
- A region mask is a float64 tensor of shape ``(H, W)`` with values in
  ``{0, 1}``; 1 marks the known region, 0 the hole.

The codec is a lossless space-to-depth transform: pixel values are affinely
mapped to ``[-1, 1]`` (``v -> 2v - 1``) and the spatial grid is folded into
channels by factor ``f``. The affine step runs in float64 so the round trip is
bit-exact for any float32 input >= 2**-29, which covers everything an 8-bit
raster can produce. This is what makes known-region preservation testable at
tolerance zero downstream.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import InvalidInput

DEFAULT_FACTOR = 8

#: dtype for all latent-space math. float32 latents cannot represent 2v-1
#: exactly for small v, which would break the round-trip contract.
LATENT_DTYPE = torch.float64


def encode(image: torch.Tensor, factor: int = DEFAULT_FACTOR) -> torch.Tensor:
    """Map an image buffer to its latent representation.

    Exactly invertible by :func:`decode`.
    """
    if image.ndim != 3:
        raise InvalidInput(f"image must be (C, H, W), got shape {tuple(image.shape)}")
    _, h, w = image.shape
    if h % factor or w % factor:
        raise InvalidInput(f"image dims {h}x{w} not divisible by codec factor {factor}")
    centered = 2.0 * image.to(LATENT_DTYPE) - 1.0
    return F.pixel_unshuffle(centered, factor)


def decode(latent: torch.Tensor, factor: int = DEFAULT_FACTOR) -> torch.Tensor:
    """Invert :func:`encode`; output clamped to [0, 1] for stray sampler values.

    Clamping is the identity on values already inside the range, so
    ``decode(encode(x)) == x`` holds bit-exactly.
    """
    if latent.ndim != 3:
        raise InvalidInput(f"latent must be (C, H, W), got shape {tuple(latent.shape)}")
    c = latent.shape[0]
    if c % (factor * factor):
        raise InvalidInput(
            f"latent channel count {c} inconsistent with codec factor {factor}"
        )
    spatial = F.pixel_shuffle(latent.to(LATENT_DTYPE), factor)
    return ((spatial + 1.0) / 2.0).clamp(0.0, 1.0).to(torch.float32)


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Reduce a mask by ``factor``: a cell is known only if ALL covered pixels are.

    The conservative rule guarantees blending never overwrites a cell that
    covers any pixel the user marked unknown.
    """
    _check_binary(mask)
    h, w = mask.shape
    if h % factor or w % factor:
        raise InvalidInput(f"mask dims {h}x{w} not divisible by factor {factor}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    return blocks.amin(dim=(1, 3)).to(LATENT_DTYPE)


def _check_binary(mask: torch.Tensor) -> None:
    if mask.ndim != 2:
        raise InvalidInput(f"mask must be 2-D, got shape {tuple(mask.shape)}")
    if not torch.all((mask == 0) | (mask == 1)):
        raise InvalidInput("mask must be binary-valued")


def check_image(image: torch.Tensor, channels: int = 3) -> None:
    """Validate the image buffer contract (shape, range)."""
    if image.ndim != 3 or image.shape[0] != channels:
        raise InvalidInput(
            f"expected ({channels}, H, W) buffer, got shape {tuple(image.shape)}"
        )
    if image.min() < 0.0 or image.max() > 1.0:
        raise InvalidInput("image values must lie in [0, 1]")


# --- raster IO ----------------------------------------------------------
#
# Images are 8-bit per channel; a lossless container (PNG) is required for
# round-trip tests. Masks load from 8-bit grayscale, threshold >=128 -> known.

def load_image(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return _to_unit_float(arr)


def load_rgba(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGBA"), dtype=np.uint8)
    return _to_unit_float(arr)


def load_mask(path) -> torch.Tensor:
    arr = np.array(Image.open(path).convert("L"), dtype=np.uint8)
    return torch.from_numpy((arr >= 128).astype(np.float64))


def save_image(image: torch.Tensor, path) -> None:
    arr = image_to_uint8(image)
    mode = {1: "L", 3: "RGB", 4: "RGBA"}[arr.shape[2]]
    Image.fromarray(arr.squeeze(2) if mode == "L" else arr, mode).save(path, format="PNG")


def save_mask(mask: torch.Tensor, path) -> None:
    _check_binary(mask)
    arr = (mask.numpy() * 255).astype(np.uint8)
    Image.fromarray(arr, "L").save(path, format="PNG")


def image_to_uint8(image: torch.Tensor) -> np.ndarray:
    """Quantize a unit-range buffer to HWC uint8 (exact on k/255 grids)."""
    clipped = image.detach().to(torch.float64).clamp(0.0, 1.0)
    return (clipped * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()


def _to_unit_float(arr: np.ndarray) -> torch.Tensor:
    chw = torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()
    return (chw.to(torch.float64) / 255.0).to(torch.float32)
