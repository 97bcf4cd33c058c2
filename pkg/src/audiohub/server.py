"""HTTP surface over the session service.

Error turns are valid dialogue turns and come back as 200 with the error
embedded; only transport-level problems (unknown session, unknown resource,
bad engine config) use HTTP error codes.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, File, Form, HTTPException, Response, UploadFile
from fastapi.staticfiles import StaticFiles

from .core import OrchestratorError
from .service import SessionService


def create_app(service: SessionService, ui_dir: Path | str | None = None) -> FastAPI:
    app = FastAPI(title="audiohub", docs_url=None, redoc_url=None)

    @app.get("/health")
    def health():
        return {"status": "ok", "tools": len(service.registry)}

    @app.post("/sessions")
    def create_session(body: dict | None = None):
        engine = (body or {}).get("engine", "builtin")
        try:
            session = service.create_session(engine)
        except OrchestratorError as exc:
            raise HTTPException(status_code=400, detail=exc.report().to_dict())
        return {
            "session_id": session.session_id,
            "engine": session.engine_name,
            "created_at": session.created_at,
        }

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        try:
            session = service.get_session(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return {
            "session_id": session.session_id,
            "engine": session.engine_name,
            "created_at": session.created_at,
            "turns": [t.to_dict() for t in session.context.turns],
        }

    @app.post("/sessions/{session_id}/turns")
    async def post_turn(
        session_id: str,
        description: str | None = Form(default=None),
        description_audio: UploadFile | None = File(default=None),
        file: list[UploadFile] = File(default=[]),
    ):
        try:
            service.get_session(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        uploads = []
        for f in file:
            uploads.append((f.filename or "upload.bin", await f.read()))
        audio_payload = await description_audio.read() if description_audio is not None else None
        turn = service.post_turn(
            session_id,
            description=description,
            uploads=uploads,
            description_audio=audio_payload,
        )
        return turn.to_dict()

    @app.get("/resources/{resource_id}")
    def get_resource(resource_id: str):
        try:
            payload, ctype = service.get_resource(resource_id)
        except OrchestratorError:
            raise HTTPException(status_code=404, detail=f"no resource {resource_id}")
        return Response(content=payload, media_type=ctype)

    if ui_dir is not None:
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
