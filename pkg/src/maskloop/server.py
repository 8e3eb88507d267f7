"""Campaign HTTP API (JSON over /api/v1) plus static hosting for the web UI.

Malformed bodies are rejected by validation (4xx) before they can touch the
event log; engine-level conflicts map to 404/409/400. Every state change is
exactly one event in the campaign log.
"""

import hashlib
import json
from typing import List, Literal, Optional

from fastapi import FastAPI, Query, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .analytics import build_report, write_report
from .engine import (
    CampaignEngine,
    ConflictError,
    InvalidAnswerError,
    NotFoundError,
)


class ClickBody(BaseModel):
    x: float
    y: float
    polarity: Literal["positive", "negative"]
    t_ms: int = 0


class AnswerBody(BaseModel):
    type: Literal["clicks", "zero_clicks", "skip"]
    clicks: List[ClickBody] = Field(default_factory=list)
    duration_ms: int = 0


def _canonical_hash(body: AnswerBody) -> str:
    payload = json.dumps(body.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def create_app(engine: CampaignEngine, static_dir=None) -> FastAPI:
    app = FastAPI(title="maskloop campaign", version="1")

    @app.exception_handler(NotFoundError)
    async def _not_found(_, exc):
        return JSONResponse(status_code=404, content={"error": str(exc)})

    @app.exception_handler(ConflictError)
    async def _conflict(_, exc):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.exception_handler(InvalidAnswerError)
    async def _invalid(_, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.get("/api/v1/campaign")
    def campaign_summary():
        return engine.summary()

    @app.get("/api/v1/tasks/next")
    def next_task(annotator: str = Query(min_length=1)):
        lease = engine.next_task(annotator)
        if lease is None:
            return Response(status_code=204)
        return lease

    @app.post("/api/v1/tasks/{task_id}/answer")
    def submit_answer(task_id: str, body: AnswerBody):
        return engine.submit_answer(
            task_id,
            body.type,
            [c.model_dump() for c in body.clicks],
            body.duration_ms,
            _canonical_hash(body),
        )

    @app.post("/api/v1/campaign/advance-round")
    def advance_round():
        return engine.advance_round()

    @app.get("/api/v1/masks/{instance_id}")
    def get_mask(instance_id: str, round: Optional[int] = None):
        return engine.get_mask(instance_id, round).to_json()

    @app.get("/api/v1/crops/{instance_id}.png")
    def get_crop(instance_id: str):
        return Response(content=engine.crop_png(instance_id), media_type="image/png")

    @app.get("/api/v1/reports/summary")
    def report_summary():
        return build_report(engine.state).to_json()

    @app.get("/api/v1/reports/{name}.csv")
    def report_csv(name: str):
        import tempfile
        from pathlib import Path

        if name not in ("quality_curve", "answers"):
            raise NotFoundError(f"unknown report {name}")
        with tempfile.TemporaryDirectory() as tmp:
            out = write_report(engine.state, tmp)
            data = (Path(out) / f"{name}.csv").read_text()
        return Response(content=data, media_type="text/csv")

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
