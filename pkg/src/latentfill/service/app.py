"""HTTP surface: resource-oriented session/job endpoints.

Progress channels are line-delimited JSON records; artifacts are PNG bytes.
"""

from __future__ import annotations

import json
import time

from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse, StreamingResponse

from ..errors import InvalidInput, SpecValidationError
from .config import ServiceConfig, load_config
from .engine import ConflictError, Engine, NotFoundError
from .store import ArtifactStore


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or load_config()
    store = ArtifactStore(config.artifact_root)
    engine = Engine(store, config)

    app = FastAPI(title="latentfill", version="0.1.0")
    app.state.engine = engine
    app.state.config = config

    @app.exception_handler(SpecValidationError)
    async def _spec_error(request: Request, exc: SpecValidationError):
        return JSONResponse(
            status_code=422, content={"detail": str(exc), "field": exc.field}
        )

    @app.exception_handler(InvalidInput)
    async def _invalid(request: Request, exc: InvalidInput):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ConflictError)
    async def _conflict(request: Request, exc: ConflictError):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(NotFoundError)
    async def _missing(request: Request, exc: NotFoundError):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.post("/sessions", status_code=201)
    async def create_session(
        image: UploadFile = File(...),
        mask: UploadFile = File(...),
        exemplar: UploadFile | None = File(None),
    ):
        exemplar_bytes = await exemplar.read() if exemplar is not None else None
        return engine.create_session(await image.read(), await mask.read(), exemplar_bytes)

    @app.get("/sessions/{session_id}")
    async def get_session(session_id: str):
        return engine.get_session(session_id)

    @app.post("/sessions/{session_id}/finetune", status_code=202)
    async def start_finetune(session_id: str, overrides: dict | None = None):
        return engine.start_finetune(session_id, overrides)

    @app.get("/sessions/{session_id}/progress")
    async def finetune_progress(session_id: str):
        records = engine.finetune_progress(session_id)
        body = "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)
        return PlainTextResponse(body, media_type="application/x-ndjson")

    @app.get("/sessions/{session_id}/inputs/{name}")
    async def get_session_input(session_id: str, name: str):
        return FileResponse(
            engine.session_input_path(session_id, name), media_type="image/png"
        )

    @app.get("/jobs/{job_id}/stroke")
    async def get_job_stroke(job_id: str):
        return FileResponse(engine.job_stroke_path(job_id), media_type="image/png")

    @app.post("/sessions/{session_id}/jobs", status_code=202)
    async def submit_job(
        session_id: str,
        spec: str = Form("{}"),
        stroke: UploadFile | None = File(None),
    ):
        try:
            spec_wire = json.loads(spec)
        except json.JSONDecodeError as exc:
            raise SpecValidationError("spec", f"not valid JSON: {exc}") from exc
        if not isinstance(spec_wire, dict):
            raise SpecValidationError("spec", "must be a JSON object")
        stroke_bytes = await stroke.read() if stroke is not None else None
        return engine.submit_inpaint(session_id, spec_wire, stroke_bytes)

    @app.get("/jobs/{job_id}")
    async def get_job(job_id: str):
        return engine.get_job(job_id)

    @app.get("/jobs/{job_id}/artifacts/{index}")
    async def get_artifact(job_id: str, index: int):
        return FileResponse(engine.artifact_path(job_id, index), media_type="image/png")

    @app.get("/jobs/{job_id}/events")
    async def job_events(job_id: str, follow: bool = False, timeout: float = 30.0):
        if not follow:
            records = engine.job_events(job_id)
            body = "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)
            return PlainTextResponse(body, media_type="application/x-ndjson")

        def stream():
            sent = 0
            deadline = time.monotonic() + timeout
            while time.monotonic() < deadline:
                records = engine.job_events(job_id)
                for rec in records[sent:]:
                    yield json.dumps(rec, separators=(",", ":")) + "\n"
                sent = len(records)
                if engine.get_job(job_id)["status"] in ("done", "failed"):
                    return
                time.sleep(0.05)

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    return app
