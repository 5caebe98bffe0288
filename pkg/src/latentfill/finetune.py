"""Masked finetuning: background loss, exemplar reference loss, and the loop.

Per iteration the loop draws an independent (timestep, noise) pair for the
background term and, when an exemplar is bound, a second independent pair for
the reference term; the total loss is their plain sum. There is deliberately
no constraint on the hole region and no prior-preservation term.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .backbone import ParameterSet
from .codec import LATENT_DTYPE
from .errors import InvalidInput, LatentFillError
from .schedule import NoiseSchedule, add_noise
from .tokenizer import null_sequence


@dataclass(frozen=True)
class FinetuneConfig:
    total_iters: int = 100
    learning_rate: float = 1e-5
    seed: int = 0
    use_exemplar: bool = True
    # Optional name-prefix filter restricting which parameters train;
    # None (the default) finetunes everything.
    train_layers: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.total_iters < 0:
            raise InvalidInput("total_iters must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidInput("learning_rate must be > 0")


@dataclass(frozen=True)
class Rect:
    """Half-open spatial box in latent coordinates."""

    top: int
    left: int
    height: int
    width: int

    @property
    def empty(self) -> bool:
        return self.height <= 0 or self.width <= 0


@dataclass
class ExemplarBundle:
    x_ref: torch.Tensor  # exemplar latent
    subject_token: int
    hole_bbox: Rect


def hole_bbox(mask: torch.Tensor) -> Rect:
    """Bounding box of the unknown region (mask == 0)."""
    holes = (mask == 0).nonzero()
    if holes.numel() == 0:
        return Rect(0, 0, 0, 0)
    top, left = holes.amin(dim=0).tolist()
    bottom, right = holes.amax(dim=0).tolist()
    return Rect(top, left, bottom - top + 1, right - left + 1)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked entries; 0 when the mask is empty.

    The mask is spatial and broadcast over channels; mean (not sum) reduction
    keeps learning-rate semantics independent of mask size. Gradients w.r.t.
    predictions vanish exactly on unmasked cells.
    """
    if pred.shape != target.shape:
        raise InvalidInput("pred and target shapes must match")
    if mask.shape != pred.shape[-2:]:
        raise InvalidInput(
            f"mask shape {tuple(mask.shape)} does not match spatial dims "
            f"{tuple(pred.shape[-2:])}"
        )
    count = mask.sum() * pred.shape[0]
    if count == 0:
        return torch.zeros((), dtype=pred.dtype)
    sq = mask * (pred - target) ** 2
    return sq.sum() / count


def bg_loss(
    params: ParameterSet,
    x_in: torch.Tensor,
    m: torch.Tensor,
    t: int,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Known-region noise loss with null conditioning."""
    x_t = add_noise(x_in, t, eps, sched)
    null_emb = params.encode_text(null_sequence())
    pred = params.predict_noise(x_t, null_emb, t)
    return masked_mse(pred, eps, m)


def augment_exemplar(
    x_ref: torch.Tensor,
    bbox: Rect,
    rng: torch.Generator,
    latent_shape: tuple[int, int, int],
    scale: float | None = None,
    offset: tuple[int, int] | None = None,
) -> tuple[torch.Tensor, torch.Tensor, Rect]:
    """Randomly scale and shift the exemplar latent inside the hole bounding box.

    The exemplar is resized to a uniform fraction in [0.5, 1.0] of its
    aspect-preserving fit inside ``bbox`` and dropped at a uniform offset fully
    inside it. Returns a latent-sized map holding the placed content (zero
    elsewhere), a validity mask marking exactly the placed cells, and the
    placement rect. ``scale`` and ``offset`` pin the draws for reproducing a
    specific placement.
    """
    if bbox.empty:
        raise InvalidInput("hole bounding box is empty; nothing to place an exemplar in")
    _, eh, ew = x_ref.shape
    fit = min(bbox.height / eh, bbox.width / ew)
    if scale is None:
        scale = (0.5 + 0.5 * torch.rand((), generator=rng, dtype=LATENT_DTYPE)).item()
    th = max(1, round(eh * fit * scale))
    tw = max(1, round(ew * fit * scale))
    th, tw = min(th, bbox.height), min(tw, bbox.width)

    if (th, tw) == (eh, ew):
        patch = x_ref.clone()
    else:
        patch = F.interpolate(
            x_ref.unsqueeze(0), size=(th, tw), mode="bilinear", align_corners=False
        ).squeeze(0)

    if offset is None:
        dy = int(torch.randint(0, bbox.height - th + 1, (1,), generator=rng))
        dx = int(torch.randint(0, bbox.width - tw + 1, (1,), generator=rng))
    else:
        dy, dx = offset
        if not (0 <= dy <= bbox.height - th and 0 <= dx <= bbox.width - tw):
            raise InvalidInput("offset places the exemplar outside the bounding box")
    placement = Rect(bbox.top + dy, bbox.left + dx, th, tw)

    c, h, w = latent_shape
    x_aug = torch.zeros(c, h, w, dtype=LATENT_DTYPE)
    m_valid = torch.zeros(h, w, dtype=LATENT_DTYPE)
    x_aug[
        :, placement.top : placement.top + th, placement.left : placement.left + tw
    ] = patch
    m_valid[
        placement.top : placement.top + th, placement.left : placement.left + tw
    ] = 1.0
    return x_aug, m_valid, placement


def ref_loss(
    params: ParameterSet,
    bundle: ExemplarBundle,
    t: int,
    eps: torch.Tensor,
    rng: torch.Generator,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Exemplar noise loss conditioned on the subject token, masked to the
    augmented placement region."""
    x_aug, m_valid, _ = augment_exemplar(
        bundle.x_ref, bundle.hole_bbox, rng, tuple(eps.shape)
    )
    x_t = add_noise(x_aug, t, eps, sched)
    cond = params.encode_text([bundle.subject_token])
    pred = params.predict_noise(x_t, cond, t)
    return masked_mse(pred, eps, m_valid)


ProgressFn = Callable[[dict], None]


def run_finetune(
    params: ParameterSet,
    x_in: torch.Tensor,
    m: torch.Tensor,
    bundle: ExemplarBundle | None,
    cfg: FinetuneConfig,
    sched: NoiseSchedule,
    on_progress: ProgressFn | None = None,
) -> ParameterSet:
    """Run the masked finetuning loop and return the tuned parameter set.

    Requires exclusive access to ``params``; the input set is mutated in
    place and also returned. Timesteps are drawn uniformly over the noised
    range [1, T]. Aborts on a non-finite loss.
    """
    if x_in.shape[-2:] != m.shape:
        raise InvalidInput("latent and mask spatial dims must match")
    gen = torch.Generator().manual_seed(cfg.seed)
    if cfg.train_layers is None:
        trainable = list(params.model.parameters())
    else:
        trainable = [
            p
            for name, p in params.model.named_parameters()
            if name.startswith(cfg.train_layers)
        ]
        if not trainable:
            raise InvalidInput(
                f"train_layers {cfg.train_layers!r} matches no parameters"
            )
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    use_ref = bundle is not None and cfg.use_exemplar
    start = time.monotonic()

    for it in range(cfg.total_iters):
        t1 = int(torch.randint(1, sched.T + 1, (1,), generator=gen))
        eps1 = torch.randn(x_in.shape, generator=gen, dtype=LATENT_DTYPE)
        loss_bg = bg_loss(params, x_in, m, t1, eps1, sched)
        loss = loss_bg
        loss_ref = torch.zeros(())
        if use_ref:
            t2 = int(torch.randint(1, sched.T + 1, (1,), generator=gen))
            eps2 = torch.randn(x_in.shape, generator=gen, dtype=LATENT_DTYPE)
            loss_ref = ref_loss(params, bundle, t2, eps2, gen, sched)
            loss = loss_bg + loss_ref
        if not torch.isfinite(loss):
            raise LatentFillError(
                f"non-finite loss at iteration {it}: bg={loss_bg.item()}, "
                f"ref={loss_ref.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        params.iterations += 1
        if on_progress is not None:
            on_progress(
                {
                    "iteration": it,
                    "bg_loss": float(loss_bg.detach()),
                    "ref_loss": float(loss_ref.detach()),
                    "wall_time": time.monotonic() - start,
                }
            )
    return params
