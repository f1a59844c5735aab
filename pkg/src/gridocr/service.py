"""Interactive decoding sessions over HTTP plus a WebSocket event stream.

Endpoints:
    POST /sessions                  {"image_b64": ..., "options": {...}}
    GET  /sessions/{id}             full snapshot
    POST /sessions/{id}/prompt      {"box": [x1, y1, x2, y2]}
    WS   /sessions/{id}/events?after=<seq>   ordered JSON frames

One decode worker thread runs per session. A low-confidence step parks
the worker in awaiting_prompt until a box arrives; every frame carries a
monotonically increasing "seq" so clients resume from the last one seen.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import io
import json
import logging
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from .corpus import Vocabulary, tokens_to_text
from .geometry import BBox
from .inference import DecayConfig, greedy_decode
from .model import GridOCRModel

__all__ = ["SessionManager", "Session", "create_app"]

log = logging.getLogger(__name__)


@dataclass
class Session:
    id: str
    image: np.ndarray
    conf_threshold: float
    decay: DecayConfig
    max_len: int | None
    rep_threshold: float | None = None
    rep_window: int = 64
    reset_visits_on_prompt: bool = False
    status: str = "running"  # running | awaiting_prompt | done | failed
    events: list[dict] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    boxes: list[list[float]] = field(default_factory=list)
    error: str | None = None
    cond: threading.Condition = field(default_factory=threading.Condition)
    prompt_box: BBox | None = None
    prompt_pending: dict | None = None

    def snapshot(self, vocab: Vocabulary) -> dict:
        with self.cond:
            return {
                "id": self.id,
                "status": self.status,
                "conf_threshold": self.conf_threshold,
                "decay": {
                    "sigma": self.decay.sigma,
                    "eta": self.decay.eta,
                    "blank_enabled": self.decay.blank_enabled,
                },
                "tokens": list(self.tokens),
                "text": tokens_to_text(self.tokens, vocab),
                "visited_boxes": [list(b) for b in self.boxes],
                "pending_prompt": self.prompt_pending,
                "events_seen": len(self.events),
                "error": self.error,
            }


class SessionManager:
    """Owns sessions and the shared read-only model."""

    def __init__(
        self,
        model: GridOCRModel,
        vocab: Vocabulary,
        persist_dir: str | Path | None = None,
    ):
        self.model = model
        self.vocab = vocab
        self.persist_dir = Path(persist_dir) if persist_dir else None
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def create(self, png_bytes: bytes, options: dict | None = None) -> Session:
        options = options or {}
        try:
            pil = Image.open(io.BytesIO(png_bytes))
            pil.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise ValueError(f"undecodable image: {exc}") from exc
        arr = np.asarray(pil.convert("L"), dtype=np.float32) / np.float32(255.0)
        decay = DecayConfig(
            sigma=float(options.get("sigma", 0.85)),
            eta=float(options.get("eta", 10.0)),
            blank_enabled=bool(options.get("blank_enabled", False)),
        )
        session = Session(
            id=uuid.uuid4().hex,
            image=arr,
            conf_threshold=float(options.get("conf_threshold", 0.0)),
            decay=decay,
            max_len=options.get("max_len"),
        )
        session.rep_threshold = options.get("rep_threshold")
        session.rep_window = int(options.get("rep_window", 64))
        session.reset_visits_on_prompt = bool(
            options.get("reset_visits_on_prompt", False)
        )
        with self._lock:
            self.sessions[session.id] = session
        worker = threading.Thread(target=self._run, args=(session,), daemon=True)
        worker.start()
        return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            if session_id not in self.sessions:
                raise KeyError(session_id)
            return self.sessions[session_id]

    def submit_prompt(self, session_id: str, box: BBox) -> dict:
        session = self.get(session_id)
        with session.cond:
            if session.status != "awaiting_prompt":
                raise RuntimeError(f"session is {session.status}, not awaiting_prompt")
            session.prompt_box = box
            session.cond.notify_all()
        return {"ok": True}

    # ---- worker internals -------------------------------------------------

    def _emit(self, session: Session, kind: str, payload: dict):
        with session.cond:
            frame = {"type": kind, "seq": len(session.events), **payload}
            if kind == "token_emitted":
                frame["token_text"] = self.vocab.text(payload["token"])
                session.tokens.append(payload["token"])
                session.boxes.append(payload["box"])
            session.events.append(frame)
            session.cond.notify_all()

    def _prompt_source(self, session: Session):
        def ask(step: int, candidate: BBox, pos_conf: float) -> BBox | None:
            with session.cond:
                session.status = "awaiting_prompt"
                session.prompt_box = None
                session.prompt_pending = {
                    "step": step,
                    "candidate_box": candidate.as_list(),
                    "pos_conf": pos_conf,
                }
                session.cond.notify_all()
                while session.prompt_box is None and session.status == "awaiting_prompt":
                    session.cond.wait(timeout=0.5)
                box = session.prompt_box
                session.prompt_box = None
                session.prompt_pending = None
                session.status = "running"
                return box
        return ask

    def _run(self, session: Session):
        try:
            trace = greedy_decode(
                session.image,
                self.model,
                decay=session.decay,
                conf_threshold=session.conf_threshold,
                prompt_source=self._prompt_source(session),
                max_len=session.max_len,
                rep_window=session.rep_window,
                rep_threshold=session.rep_threshold,
                reset_visits_on_prompt=session.reset_visits_on_prompt,
                observer=lambda kind, payload: self._emit(session, kind, payload),
            )
            with session.cond:
                session.status = "done"
                session.cond.notify_all()
            if self.persist_dir is not None:
                self.persist_dir.mkdir(parents=True, exist_ok=True)
                (self.persist_dir / f"{session.id}.json").write_text(trace.to_json())
        except Exception as exc:  # worker must never die silently
            log.exception("session %s failed", session.id)
            with session.cond:
                session.status = "failed"
                session.error = str(exc)
                session.events.append(
                    {"type": "done", "seq": len(session.events), "error": str(exc)}
                )
                session.cond.notify_all()


def create_app(manager: SessionManager, ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="gridocr interactive sessions")

    @app.post("/sessions")
    async def create_session(body: dict):
        try:
            png_bytes = base64.b64decode(body.get("image_b64", ""), validate=True)
            session = await asyncio.to_thread(
                manager.create, png_bytes, body.get("options")
            )
        except (ValueError, binascii.Error) as exc:
            return JSONResponse(
                status_code=400, content={"code": "bad_image", "detail": str(exc)}
            )
        return {"id": session.id, "status": "running"}

    @app.get("/sessions/{session_id}")
    async def get_session(session_id: str):
        try:
            session = manager.get(session_id)
        except KeyError:
            return JSONResponse(status_code=404, content={"code": "unknown_session"})
        return session.snapshot(manager.vocab)

    @app.post("/sessions/{session_id}/prompt")
    async def submit_prompt(session_id: str, body: dict):
        try:
            session = manager.get(session_id)
        except KeyError:
            return JSONResponse(status_code=404, content={"code": "unknown_session"})
        try:
            box = BBox.from_list(body["box"])
        except (KeyError, TypeError, ValueError) as exc:
            return JSONResponse(
                status_code=422, content={"code": "invalid_box", "detail": str(exc)}
            )
        try:
            return manager.submit_prompt(session.id, box)
        except RuntimeError as exc:
            return JSONResponse(
                status_code=409, content={"code": "wrong_status", "detail": str(exc)}
            )

    @app.websocket("/sessions/{session_id}/events")
    async def stream_events(ws: WebSocket, session_id: str, after: int = -1):
        await ws.accept()
        try:
            session = manager.get(session_id)
        except KeyError:
            await ws.send_json({"type": "error", "code": "unknown_session"})
            await ws.close()
            return
        cursor = after + 1
        try:
            while True:
                with session.cond:
                    frames = list(session.events[cursor:])
                    finished = session.status in ("done", "failed")
                for frame in frames:
                    await ws.send_json(frame)
                    cursor = frame["seq"] + 1
                if finished and cursor >= len(session.events):
                    break
                await asyncio.sleep(0.02)
            await ws.close()
        except WebSocketDisconnect:
            pass

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
