"""Session-scoped orchestration: the four-stage turn pipeline plus persistence.

One service owns one resource store, one registry, and many sessions. Turns
within a session are serialized by a per-session lock; the journal line for
a turn is written only after its response is fully rendered, so a crash
leaves a clean prefix.
"""

from __future__ import annotations

import datetime
import json
import logging
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import analysis, response as response_mod
from .core import (
    Context,
    ErrorCode,
    Modality,
    Origin,
    OrchestratorError,
    Query,
    Resource,
    ResourceStore,
    Turn,
    append_turn,
    journal_append,
    journal_load,
)
from .execution import Registry, load_default_registry, run_pipeline
from .modality import SineCodecTranscriber, sniff_modality, transform_query

logger = logging.getLogger(__name__)

CHAT_RESPONSE = (
    "I handle audio tasks: generation, transformation, transcription, "
    "detection, singing, and talking-head video. Tell me what to do with your audio."
)

_CONTENT_TYPES = {
    Modality.AUDIO: "audio/wav",
    Modality.IMAGE: "image/x-portable-graymap",
    Modality.VIDEO: "application/json",
    Modality.EVENT: "application/json",
    Modality.SCORE: "application/json",
    Modality.TEXT: "text/plain; charset=utf-8",
}


@dataclass
class Session:
    session_id: str
    engine_name: str
    created_at: str
    context: Context = field(default_factory=lambda: Context(""))


class SessionService:
    def __init__(
        self,
        root_dir: Path | str,
        registry: Registry | None = None,
        digest_turns: int = analysis.CONTEXT_DIGEST_TURNS,
    ):
        self.root = Path(root_dir)
        self.store = ResourceStore(self.root / "store")
        self.sessions_dir = self.root / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.registry = registry if registry is not None else load_default_registry()
        self.digest_turns = digest_turns
        self.transcriber = SineCodecTranscriber()
        self._sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    # -- session lifecycle ---------------------------------------------------

    def _journal_path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.jsonl"

    def _meta_path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.meta.json"

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            if session_id not in self._locks:
                self._locks[session_id] = threading.Lock()
            return self._locks[session_id]

    def create_session(self, engine: str = "builtin") -> Session:
        analysis.make_engine(engine)  # validates the name / configuration now
        session_id = secrets.token_hex(8)
        created_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
        session = Session(session_id, engine, created_at, Context(session_id))
        self._journal_path(session_id).touch()
        self._meta_path(session_id).write_text(
            json.dumps({"session_id": session_id, "engine": engine, "created_at": created_at}),
            encoding="utf-8",
        )
        self._sessions[session_id] = session
        return session

    def restore_session(self, session_id: str) -> Session:
        meta_path = self._meta_path(session_id)
        if not meta_path.exists():
            raise KeyError(session_id)
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        context = journal_load(self._journal_path(session_id), session_id)
        session = Session(session_id, meta.get("engine", "builtin"), meta.get("created_at", ""), context)
        self._sessions[session_id] = session
        return session

    def get_session(self, session_id: str) -> Session:
        if session_id in self._sessions:
            return self._sessions[session_id]
        return self.restore_session(session_id)

    def list_sessions(self) -> list[str]:
        return sorted(p.stem for p in self.sessions_dir.glob("*.jsonl"))

    # -- the four-stage turn -------------------------------------------------

    def post_turn(
        self,
        session_id: str,
        description: str | None = None,
        uploads: list[tuple[str, bytes]] | None = None,
        description_audio: bytes | None = None,
    ) -> Turn:
        session = self.get_session(session_id)
        with self._lock_for(session_id):
            return self._run_turn(session, description, uploads or [], description_audio)

    def _run_turn(
        self,
        session: Session,
        description: str | None,
        uploads: list[tuple[str, bytes]],
        description_audio: bytes | None,
    ) -> Turn:
        context = session.context
        turn_index = len(context.turns) + 1
        engine = analysis.make_engine(session.engine_name)

        pending: list[Resource] = []
        args = None
        outputs = []
        error: OrchestratorError | None = None
        query = Query(description=description or "")

        try:
            for name, payload in uploads:
                pending.append(self.store.store_resource(payload, name, Origin.upload(turn_index)))
            query.resources = [r.id for r in pending]

            if description_audio is not None:
                res = self.store.store_resource(description_audio, "description.wav", Origin.upload(turn_index))
                if res.modality != Modality.AUDIO:
                    raise OrchestratorError(
                        ErrorCode.BAD_RESOURCE_FORMAT,
                        "the spoken description is not a WAV file",
                        "Record or upload 16-bit PCM WAV audio.",
                    )
                query.description_audio_id = res.id
            query = transform_query(query, self.transcriber, self.store)

            args = analysis.analyze(
                query, context, engine, self.registry, self.store,
                pending_uploads=pending, digest_turns=self.digest_turns,
            )
            if args is not None:
                stages = [args] + list(args.chain)
                outputs, error = run_pipeline(
                    stages, self.store, self.registry, context, turn_index, pending,
                )
        except OrchestratorError as exc:
            error = exc
            if exc.partial_args is not None:
                args = exc.partial_args

        if error is not None:
            rendered = response_mod.render_error(error.report(), self.registry)
        elif args is None:
            rendered = response_mod.Response(text=CHAT_RESPONSE)
        else:
            final_task = ([args] + list(args.chain))[len(outputs) - 1].task
            rendered = response_mod.render_response(final_task, outputs[-1], self.store, turn_index)

        turn = Turn(
            index=turn_index,
            query=query,
            args=args,
            outputs=[r.id for out in outputs for r in out.resources],
            response_text=rendered.text,
            attachments=rendered.attachments,
            error=error.report() if error is not None else None,
        )
        append_turn(context, turn)
        journal_append(self._journal_path(session.session_id), turn)
        return turn

    # -- resource delivery ------------------------------------------------------

    def get_resource(self, resource_id: str) -> tuple[bytes, str]:
        payload = self.store.load(resource_id)
        record = self.store.get_record(resource_id)
        if record is not None:
            ctype = _CONTENT_TYPES[record.modality]
        else:
            ctype = _CONTENT_TYPES[sniff_modality(payload, resource_id)]
        if ctype.startswith("text/plain") and payload.startswith(b"time_s,"):
            ctype = "text/csv; charset=utf-8"
        return payload, ctype
