"""Filesystem persistence: content-addressed blobs plus metadata indexes.

Layout under the artifact root:

    objects/<sha256>        immutable blobs (images, checkpoints, results)
    sessions/<id>.json      session metadata, atomically replaced
    jobs/<id>.json          job metadata, atomically replaced
    events/<id>.jsonl       append-only progress records

Blobs are keyed by content hash, so checkpoint updates are naturally atomic:
a half-written temp file never shadows an existing object.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from pathlib import Path


class ArtifactStore:
    def __init__(self, root):
        self.root = Path(root)
        for sub in ("objects", "sessions", "jobs", "events"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._event_lock = threading.Lock()

    # -- blobs ------------------------------------------------------------

    def put_bytes(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        target = self.root / "objects" / digest
        if not target.exists():
            tmp = target.with_name(f"tmp.{os.getpid()}.{threading.get_ident()}")
            tmp.write_bytes(data)
            os.replace(tmp, target)
        return digest

    def put_file(self, path) -> str:
        return self.put_bytes(Path(path).read_bytes())

    def object_path(self, digest: str) -> Path:
        p = self.root / "objects" / digest
        if not p.exists():
            raise FileNotFoundError(f"no object {digest}")
        return p

    def read_bytes(self, digest: str) -> bytes:
        return self.object_path(digest).read_bytes()

    # -- metadata ----------------------------------------------------------

    def _write_json(self, path: Path, data: dict) -> None:
        tmp = path.with_name(f"{path.name}.tmp.{threading.get_ident()}")
        tmp.write_text(json.dumps(data, indent=2))
        os.replace(tmp, path)

    def write_session(self, meta: dict) -> None:
        self._write_json(self.root / "sessions" / f"{meta['id']}.json", meta)

    def read_session(self, session_id: str) -> dict | None:
        p = self.root / "sessions" / f"{session_id}.json"
        return json.loads(p.read_text()) if p.exists() else None

    def list_sessions(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "sessions").glob("*.json"))

    def write_job(self, meta: dict) -> None:
        self._write_json(self.root / "jobs" / f"{meta['id']}.json", meta)

    def read_job(self, job_id: str) -> dict | None:
        p = self.root / "jobs" / f"{job_id}.json"
        return json.loads(p.read_text()) if p.exists() else None

    # -- event logs ----------------------------------------------------------

    def append_event(self, stream_id: str, record: dict) -> None:
        line = json.dumps(record, separators=(",", ":"))
        with self._event_lock:
            with open(self.root / "events" / f"{stream_id}.jsonl", "a") as f:
                f.write(line + "\n")

    def read_events(self, stream_id: str) -> list[dict]:
        p = self.root / "events" / f"{stream_id}.jsonl"
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text().splitlines() if line]
