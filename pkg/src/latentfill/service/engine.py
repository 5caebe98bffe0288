"""Session and job orchestration on top of the artifact store.

Sessions are independent units: one input image + mask (+ optional exemplar),
one finetuned checkpoint, many sampling jobs. Finetuning is the only writer of
a session's parameters; sampling jobs read immutable checkpoint blobs, so any
number may run concurrently. Finetune and sampling jobs share one bounded
worker pool.
"""

from __future__ import annotations

import io
import tempfile
import threading
import time
import uuid
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .. import codec
from ..backbone import PRESETS, build_params
from ..checkpoint import load_checkpoint, save_checkpoint
from ..errors import InvalidInput, LatentFillError, SpecValidationError
from ..finetune import ExemplarBundle, FinetuneConfig, hole_bbox, run_finetune
from ..guidance import (
    GuidanceSpec,
    StrokeMap,
    ToyJointEmbedder,
    auto_subject_token,
    stroke_from_rgba,
    validate_spec,
)
from ..metrics import MetricReport, known_region_error, stroke_rmse
from ..sampler import SamplerConfig, inpaint
from ..schedule import make_schedule
from .config import ServiceConfig
from .store import ArtifactStore


class ConflictError(LatentFillError):
    """Requested transition conflicts with the session state machine."""


class NotFoundError(LatentFillError):
    pass


_SPEC_WIRE_KEYS = {
    "prompt",
    "subject_token",
    "tau",
    "scale",
    "seed",
    "num_outputs",
    "num_steps",
    "attn_mask",
}


def _now() -> float:
    return time.time()


class Engine:
    def __init__(self, store: ArtifactStore, config: ServiceConfig):
        self.store = store
        self.config = config
        self.sched = make_schedule(config.timesteps)
        self.embedder = ToyJointEmbedder(seed=config.backbone_seed)
        self.pool = ThreadPoolExecutor(max_workers=config.workers)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        # Reduction order is part of the determinism contract: CLI and
        # service must produce bit-identical results for identical inputs.
        torch.set_num_threads(1)
        self._recover()

    def _recover(self) -> None:
        for sid in self.store.list_sessions():
            meta = self.store.read_session(sid)
            if meta and meta["finetune_status"] == "running":
                meta["finetune_status"] = "failed"
                meta["finetune_error"] = "interrupted by restart"
                self.store.write_session(meta)

    def close(self) -> None:
        self.pool.shutdown(wait=True)

    # -- sessions -----------------------------------------------------------

    def create_session(
        self,
        image_bytes: bytes,
        mask_bytes: bytes,
        exemplar_bytes: bytes | None = None,
    ) -> dict:
        f = self.config.codec_factor
        image = _decode_image(image_bytes, "RGB")
        mask_img = _decode_image(mask_bytes, "L")
        mask = (mask_img[0] >= (128.0 / 255.0)).to(torch.float64)

        _, h, w = image.shape
        if mask.shape != (h, w):
            raise InvalidInput(
                f"mask dims {tuple(mask.shape)} do not match image {h}x{w}"
            )
        if h % (f * 4) or w % (f * 4):
            raise InvalidInput(
                f"image dims {h}x{w} must be divisible by {f * 4} "
                f"(codec factor {f} x backbone downscale 4)"
            )
        if bool(mask.all()):
            raise InvalidInput("mask marks everything known: empty hole, nothing to inpaint")

        meta = {
            "id": f"s-{uuid.uuid4().hex[:12]}",
            "created": _now(),
            "height": h,
            "width": w,
            "image": self.store.put_bytes(image_bytes),
            "mask": self.store.put_bytes(_encode_mask_png(mask)),
            "exemplar": None,
            "subject_token": None,
            "finetune_status": "idle",
            "finetune_error": None,
            "finetune_config": None,
            "checkpoint": None,
            "jobs": [],
        }
        if exemplar_bytes is not None:
            exemplar = _decode_image(exemplar_bytes, "RGB")
            if exemplar.shape[1] % f or exemplar.shape[2] % f:
                raise InvalidInput(
                    f"exemplar dims must be divisible by codec factor {f}"
                )
            meta["exemplar"] = self.store.put_bytes(exemplar_bytes)
            meta["subject_token"] = auto_subject_token(exemplar, self.embedder)
        self.store.write_session(meta)
        return meta

    def get_session(self, session_id: str) -> dict:
        meta = self.store.read_session(session_id)
        if meta is None:
            raise NotFoundError(f"no session {session_id}")
        return meta

    # -- finetune -------------------------------------------------------------

    def start_finetune(self, session_id: str, overrides: dict | None = None) -> dict:
        overrides = overrides or {}
        unknown = set(overrides) - {"total_iters", "learning_rate", "seed", "use_exemplar"}
        if unknown:
            raise InvalidInput(f"unknown finetune options: {sorted(unknown)}")
        cfg = FinetuneConfig(**overrides)

        with self._locks[session_id]:
            meta = self.get_session(session_id)
            if meta["finetune_status"] == "running":
                raise ConflictError("a finetune is already running for this session")
            if meta["finetune_status"] == "done":
                raise ConflictError("session already finetuned")
            meta["finetune_status"] = "running"
            meta["finetune_config"] = {
                "total_iters": cfg.total_iters,
                "learning_rate": cfg.learning_rate,
                "seed": cfg.seed,
                "use_exemplar": cfg.use_exemplar,
            }
            self.store.write_session(meta)
        self.pool.submit(self._run_finetune, session_id, cfg)
        return {"session": session_id, "status": "running"}

    def _run_finetune(self, session_id: str, cfg: FinetuneConfig) -> None:
        stream = f"ft-{session_id}"
        try:
            meta = self.get_session(session_id)
            f = self.config.codec_factor
            image = _decode_image(self.store.read_bytes(meta["image"]), "RGB")
            mask = _decode_mask(self.store.read_bytes(meta["mask"]))
            x_in = codec.encode(image * mask.to(image.dtype), f)
            m_lat = codec.downsample_mask(mask, f)

            bundle = None
            if meta["exemplar"] is not None and cfg.use_exemplar:
                exemplar = _decode_image(self.store.read_bytes(meta["exemplar"]), "RGB")
                bundle = ExemplarBundle(
                    x_ref=codec.encode(exemplar, f),
                    subject_token=meta["subject_token"],
                    hole_bbox=hole_bbox(m_lat),
                )

            params = build_params(
                PRESETS[self.config.backbone_preset], seed=self.config.backbone_seed
            )
            run_finetune(
                params,
                x_in,
                m_lat,
                bundle,
                cfg,
                self.sched,
                on_progress=lambda rec: self.store.append_event(stream, rec),
            )

            with tempfile.TemporaryDirectory() as tmp:
                ckpt_path = Path(tmp) / "checkpoint.bin"
                save_checkpoint(params, ckpt_path)
                digest = self.store.put_file(ckpt_path)
            with self._locks[session_id]:
                meta = self.get_session(session_id)
                meta["checkpoint"] = digest
                meta["finetune_status"] = "done"
                self.store.write_session(meta)
        except Exception as exc:  # worker thread: record, don't propagate
            with self._locks[session_id]:
                meta = self.get_session(session_id)
                meta["finetune_status"] = "failed"
                meta["finetune_error"] = str(exc)
                self.store.write_session(meta)

    def finetune_progress(self, session_id: str) -> list[dict]:
        self.get_session(session_id)
        return self.store.read_events(f"ft-{session_id}")

    # -- inpainting jobs ---------------------------------------------------

    def submit_inpaint(
        self, session_id: str, spec_wire: dict, stroke_bytes: bytes | None = None
    ) -> dict:
        meta = self.get_session(session_id)
        if meta["finetune_status"] != "done":
            raise ConflictError(
                f"finetune status is {meta['finetune_status']!r}; "
                "inpaint jobs require a finished finetune"
            )

        f = self.config.codec_factor
        mask = _decode_mask(self.store.read_bytes(meta["mask"]))
        m_lat = codec.downsample_mask(mask, f)
        spec, stroke_digest = self._parse_spec(spec_wire, meta, mask, stroke_bytes)
        spec = validate_spec(spec, m_lat)

        job = {
            "id": f"j-{uuid.uuid4().hex[:12]}",
            "session_id": session_id,
            "created": _now(),
            "status": "queued",
            "error": None,
            "spec": _spec_to_wire(spec),
            "stroke": stroke_digest,
            "artifacts": [],
            "metrics": None,
            "progress": 0,
        }
        self.store.write_job(job)
        with self._locks[session_id]:
            meta = self.get_session(session_id)
            meta["jobs"].append(job["id"])
            self.store.write_session(meta)
        self.pool.submit(self._run_inpaint, job["id"], spec)
        return job

    def _parse_spec(
        self,
        wire: dict,
        session: dict,
        mask: torch.Tensor,
        stroke_bytes: bytes | None,
    ) -> tuple[GuidanceSpec, str | None]:
        unknown = set(wire) - _SPEC_WIRE_KEYS
        if unknown:
            raise SpecValidationError(sorted(unknown)[0], "unknown spec field")
        prompt = wire.get("prompt")
        if prompt is not None and not isinstance(prompt, str):
            raise SpecValidationError("prompt", "must be a string")
        subject = wire.get("subject_token")
        if subject == "auto":
            subject = session["subject_token"]
            if subject is None:
                raise SpecValidationError(
                    "subject_token", "'auto' requires a session exemplar"
                )
        elif subject is not None and not isinstance(subject, int):
            raise SpecValidationError("subject_token", "must be an integer or 'auto'")
        stroke: StrokeMap | None = None
        stroke_digest = None
        if stroke_bytes is not None:
            rgba = _decode_image(stroke_bytes, "RGBA")
            if rgba.shape[1:] != mask.shape:
                raise SpecValidationError("stroke", "stroke dims do not match image")
            stroke = stroke_from_rgba(rgba, mask, self.config.codec_factor)
            stroke_digest = self.store.put_bytes(stroke_bytes)
        attn = wire.get("attn_mask", True)
        if isinstance(attn, str):
            if attn not in ("on", "off"):
                raise SpecValidationError("attn_mask", "must be 'on' or 'off'")
            attn = attn == "on"
        try:
            spec = GuidanceSpec(
                prompt=prompt,
                subject_token=subject,
                stroke=stroke,
                tau=wire.get("tau"),
                scale=float(wire.get("scale", 8.0)),
                seed=int(wire.get("seed", 0)),
                num_outputs=int(wire.get("num_outputs", 1)),
                num_steps=int(wire.get("num_steps", 50)),
                attn_mask=bool(attn),
            )
        except (TypeError, ValueError) as exc:
            raise SpecValidationError("spec", f"malformed value: {exc}") from exc
        return spec, stroke_digest

    def _run_inpaint(self, job_id: str, spec: GuidanceSpec) -> None:
        job = self.store.read_job(job_id)
        try:
            job["status"] = "running"
            self.store.write_job(job)
            session = self.get_session(job["session_id"])
            f = self.config.codec_factor
            image = _decode_image(self.store.read_bytes(session["image"]), "RGB")
            mask = _decode_mask(self.store.read_bytes(session["mask"]))
            x_in = codec.encode(image * mask.to(image.dtype), f)
            m_lat = codec.downsample_mask(mask, f)
            params = load_checkpoint(self.store.object_path(session["checkpoint"]))

            def on_step(rec: dict) -> None:
                self.store.append_event(job_id, rec)

            outputs = inpaint(
                params,
                x_in,
                m_lat,
                spec,
                SamplerConfig(num_steps=spec.num_steps, attn_mask_enabled=spec.attn_mask),
                self.sched,
                on_step=on_step,
                factor=f,
                image=image,
                image_mask=mask,
            )

            artifacts = []
            for out in outputs:
                buf = io.BytesIO()
                Image.fromarray(codec.image_to_uint8(out), "RGB").save(buf, format="PNG")
                artifacts.append(self.store.put_bytes(buf.getvalue()))
            job["artifacts"] = artifacts

            metrics = {
                "known_region_error": MetricReport(
                    metric="known_region_error",
                    values=[known_region_error(out, image, mask) for out in outputs],
                    mask_provenance="session mask, image resolution",
                ).to_dict()
            }
            if job["stroke"] is not None:
                rgba = _decode_image(self.store.read_bytes(job["stroke"]), "RGBA")
                stroke_sel = (rgba[3] > 0).to(torch.float64)
                metrics["stroke_rmse"] = MetricReport(
                    metric="stroke_rmse",
                    values=[
                        stroke_rmse(out, rgba[:3], stroke_sel) for out in outputs
                    ],
                    mask_provenance="stroke alpha > 0, image resolution",
                ).to_dict()
            job["metrics"] = metrics
            job["status"] = "done"
            self.store.write_job(job)
        except Exception as exc:  # worker thread: record, don't propagate
            job["status"] = "failed"
            job["error"] = str(exc)
            self.store.write_job(job)
        finally:
            self.store.append_event(job_id, {"final_status": job["status"]})

    def get_job(self, job_id: str) -> dict:
        job = self.store.read_job(job_id)
        if job is None:
            raise NotFoundError(f"no job {job_id}")
        return job

    def session_input_path(self, session_id: str, name: str) -> Path:
        meta = self.get_session(session_id)
        if name not in ("image", "mask", "exemplar"):
            raise NotFoundError(f"no session input named {name!r}")
        digest = meta.get(name)
        if digest is None:
            raise NotFoundError(f"session {session_id} has no {name}")
        return self.store.object_path(digest)

    def job_stroke_path(self, job_id: str) -> Path:
        job = self.get_job(job_id)
        if job["stroke"] is None:
            raise NotFoundError(f"job {job_id} has no stroke")
        return self.store.object_path(job["stroke"])

    def job_events(self, job_id: str) -> list[dict]:
        self.get_job(job_id)
        return self.store.read_events(job_id)

    def artifact_path(self, job_id: str, index: int) -> Path:
        job = self.get_job(job_id)
        if not 0 <= index < len(job["artifacts"]):
            raise NotFoundError(f"job {job_id} has no artifact {index}")
        return self.store.object_path(job["artifacts"][index])


def _spec_to_wire(spec: GuidanceSpec) -> dict:
    return {
        "prompt": spec.prompt,
        "subject_token": spec.subject_token,
        "tau": spec.tau,
        "scale": spec.scale,
        "seed": spec.seed,
        "num_outputs": spec.num_outputs,
        "num_steps": spec.num_steps,
        "attn_mask": spec.attn_mask,
    }


def _decode_image(data: bytes, mode: str) -> torch.Tensor:
    try:
        img = Image.open(io.BytesIO(data)).convert(mode)
    except Exception as exc:
        raise InvalidInput(f"unreadable image payload: {exc}") from exc
    arr = np.array(img, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    chw = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    return (chw.to(torch.float64) / 255.0).to(torch.float32)


def _decode_mask(data: bytes) -> torch.Tensor:
    gray = _decode_image(data, "L")
    return (gray[0] >= (128.0 / 255.0)).to(torch.float64)


def _encode_mask_png(mask: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((mask.numpy() * 255).astype(np.uint8), "L").save(buf, format="PNG")
    return buf.getvalue()
