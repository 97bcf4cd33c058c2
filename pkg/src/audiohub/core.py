"""Domain types, the resource store, and dialogue context.

Everything downstream (analysis, execution, response, service) builds on
these types. Resources are content-addressed: the id is a pure function of
the payload bytes, so identical outputs across runs get identical ids.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

logger = logging.getLogger(__name__)

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


class Modality(str, Enum):
    TEXT = "text"
    AUDIO = "audio"
    IMAGE = "image"
    VIDEO = "video"
    EVENT = "event"
    SCORE = "score"


class ErrorCode(str, Enum):
    UNSUPPORTED_TASK = "UNSUPPORTED_TASK"
    TOOL_EXECUTION_FAILED = "TOOL_EXECUTION_FAILED"
    MISSING_RESOURCE = "MISSING_RESOURCE"
    BAD_RESOURCE_FORMAT = "BAD_RESOURCE_FORMAT"
    PIPELINE_MODALITY_MISMATCH = "PIPELINE_MODALITY_MISMATCH"
    ENGINE_UNAVAILABLE = "ENGINE_UNAVAILABLE"


# Fallback suggestions keep the "suggestion is never empty" contract even
# when a raise site does not supply its own.
_DEFAULT_SUGGESTIONS = {
    ErrorCode.UNSUPPORTED_TASK: "Ask for one of the supported task families.",
    ErrorCode.TOOL_EXECUTION_FAILED: "Check the input format and parameters, then retry.",
    ErrorCode.MISSING_RESOURCE: "Upload the required file or reference an earlier turn that produced one.",
    ErrorCode.BAD_RESOURCE_FORMAT: "Provide the input in a supported format (16-bit PCM WAV, P5 PGM, or score JSON).",
    ErrorCode.PIPELINE_MODALITY_MISMATCH: "Reorder the chain so each step consumes what the previous one produces.",
    ErrorCode.ENGINE_UNAVAILABLE: "Check ORCH_ENGINE_URL / ORCH_ENGINE_KEY or switch to the builtin engine.",
}


@dataclass
class ErrorReport:
    code: ErrorCode
    message: str
    suggestion: str

    def to_dict(self) -> dict:
        return {"code": self.code.value, "message": self.message, "suggestion": self.suggestion}

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorReport":
        return cls(ErrorCode(d["code"]), d["message"], d["suggestion"])


class OrchestratorError(Exception):
    """Raised anywhere in the pipeline; carries a full user-facing report.

    ``partial_args`` preserves the analysis result when the failure happened
    after routing (e.g. a reference that cannot be resolved), so the turn
    record still shows what task was selected.
    """

    def __init__(self, code: ErrorCode, message: str, suggestion: str = "", partial_args=None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.suggestion = suggestion or _DEFAULT_SUGGESTIONS[code]
        self.partial_args = partial_args

    def report(self) -> ErrorReport:
        return ErrorReport(self.code, self.message, self.suggestion)


def fnv1a64(payload: bytes) -> int:
    h = FNV64_OFFSET
    for b in payload:
        h ^= b
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def resource_id(payload: bytes) -> str:
    """64-bit FNV-1a hex digest plus an 8-hex-digit length suffix."""
    return f"{fnv1a64(payload):016x}{len(payload) & 0xFFFFFFFF:08x}"


@dataclass(frozen=True)
class Origin:
    kind: str  # "upload" | "tool"
    turn: int
    tool_id: str | None = None

    @classmethod
    def upload(cls, turn: int) -> "Origin":
        return cls("upload", turn)

    @classmethod
    def tool(cls, turn: int, tool_id: str) -> "Origin":
        return cls("tool", turn, tool_id)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "turn": self.turn}
        if self.tool_id is not None:
            d["tool_id"] = self.tool_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Origin":
        return cls(d["kind"], d["turn"], d.get("tool_id"))


@dataclass
class AudioMeta:
    sample_rate: int
    channels: int
    num_samples: int

    def to_dict(self) -> dict:
        return {"sample_rate": self.sample_rate, "channels": self.channels, "num_samples": self.num_samples}

    @classmethod
    def from_dict(cls, d: dict) -> "AudioMeta":
        return cls(d["sample_rate"], d["channels"], d["num_samples"])


@dataclass
class Resource:
    id: str
    modality: Modality
    locator: str
    origin: Origin
    meta: AudioMeta | None = None  # present iff modality == AUDIO

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "modality": self.modality.value,
            "locator": self.locator,
            "origin": self.origin.to_dict(),
        }
        if self.meta is not None:
            d["meta"] = self.meta.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Resource":
        meta = AudioMeta.from_dict(d["meta"]) if "meta" in d else None
        return cls(d["id"], Modality(d["modality"]), d["locator"], Origin.from_dict(d["origin"]), meta)


# --- reference expressions -------------------------------------------------

@dataclass(frozen=True)
class RefExplicit:
    id: str


@dataclass(frozen=True)
class RefLatest:
    pass


@dataclass(frozen=True)
class RefFromTurn:
    turn: int


@dataclass(frozen=True)
class RefUploaded:
    position: int  # 1-based, among uploads of the required modality


ReferenceExpr = RefExplicit | RefLatest | RefFromTurn | RefUploaded


def ref_to_str(ref: ReferenceExpr) -> str:
    if isinstance(ref, RefExplicit):
        return f"id:{ref.id}"
    if isinstance(ref, RefLatest):
        return "latest"
    if isinstance(ref, RefFromTurn):
        return f"turn:{ref.turn}"
    if isinstance(ref, RefUploaded):
        return f"upload:{ref.position}"
    raise TypeError(f"not a reference: {ref!r}")


def ref_from_str(s: str) -> ReferenceExpr:
    if s == "latest":
        return RefLatest()
    if s.startswith("id:"):
        return RefExplicit(s[3:])
    if s.startswith("turn:"):
        return RefFromTurn(int(s[5:]))
    if s.startswith("upload:"):
        return RefUploaded(int(s[7:]))
    raise ValueError(f"unparseable reference {s!r}")


# --- query / turn / context ------------------------------------------------

@dataclass
class Query:
    description: str
    resources: list[str] = field(default_factory=list)  # uploaded resource ids, in order
    description_audio_id: str | None = None  # set when the description arrived as audio

    def to_dict(self) -> dict:
        d = {"description": self.description, "resources": list(self.resources)}
        if self.description_audio_id is not None:
            d["description_audio_id"] = self.description_audio_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Query":
        return cls(d["description"], list(d.get("resources", [])), d.get("description_audio_id"))


@dataclass
class Attachment:
    resource_id: str
    kind: str  # AudioFile | WaveformImage | VideoFrames | PosteriorgramCsv | TextBlock

    def to_dict(self) -> dict:
        return {"resource_id": self.resource_id, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "Attachment":
        return cls(d["resource_id"], d["kind"])


@dataclass
class Turn:
    index: int  # 1-based
    query: Query
    args: "object | None" = None  # analysis.StructuredArguments; None for chat-only turns
    outputs: list[str] = field(default_factory=list)  # non-empty iff a tool ran successfully
    response_text: str = ""
    attachments: list[Attachment] = field(default_factory=list)
    error: ErrorReport | None = None

    def to_dict(self) -> dict:
        d = {
            "index": self.index,
            "query": self.query.to_dict(),
            "outputs": list(self.outputs),
            "response_text": self.response_text,
            "attachments": [a.to_dict() for a in self.attachments],
        }
        if self.args is not None:
            d["args"] = self.args.to_dict()
        if self.error is not None:
            d["error"] = self.error.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        from . import analysis  # deferred: analysis imports core

        args = analysis.StructuredArguments.from_dict(d["args"]) if "args" in d else None
        error = ErrorReport.from_dict(d["error"]) if "error" in d else None
        return cls(
            index=d["index"],
            query=Query.from_dict(d["query"]),
            args=args,
            outputs=list(d.get("outputs", [])),
            response_text=d.get("response_text", ""),
            attachments=[Attachment.from_dict(a) for a in d.get("attachments", [])],
            error=error,
        )


@dataclass
class Context:
    session_id: str
    turns: list[Turn] = field(default_factory=list)


def append_turn(context: Context, turn: Turn) -> Context:
    """Append-only extension; turn indices must stay contiguous from 1."""
    if turn.index != len(context.turns) + 1:
        raise ValueError(f"turn index {turn.index} breaks contiguity (context has {len(context.turns)} turns)")
    context.turns.append(turn)
    return context


# --- resource store ---------------------------------------------------------

class ResourceStore:
    """Content-addressed file store: ``store/<id[0:2]>/<id>``.

    Storing the same bytes twice is a no-op that returns the same id.
    Writes go through a temp file + atomic rename.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._registry: dict[str, Resource] = {}

    def _path_for(self, rid: str) -> Path:
        return self.root / rid[:2] / rid

    def store_resource(
        self, payload: bytes, declared_name: str, origin: Origin, modality: Modality | None = None,
    ) -> Resource:
        """Uploads are sniffed; tool outputs may declare their modality
        (event lists and video manifests are JSON on the wire)."""
        from . import modality as modality_mod  # deferred: modality imports core

        if not payload:
            raise OrchestratorError(
                ErrorCode.BAD_RESOURCE_FORMAT,
                f"refusing to store empty payload for {declared_name!r}",
                "Provide a non-empty file.",
            )
        mod = modality if modality is not None else modality_mod.sniff_modality(payload, declared_name)
        rid = resource_id(payload)
        path = self._path_for(rid)
        if path.exists():
            existing = path.read_bytes()
            if existing != payload:  # 64-bit hash collision: disambiguate by suffixing
                rid = rid + "x"
                path = self._path_for(rid)
        meta = None
        if mod == Modality.AUDIO:
            buf = modality_mod.read_wav(payload)
            meta = AudioMeta(buf.sample_rate, buf.channels, buf.num_samples)
        res = Resource(rid, mod, str(path.relative_to(self.root)), origin, meta)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(payload)
            os.replace(tmp, path)
            # sidecar record: lets a restarted process resolve references
            sidecar = path.parent / (rid + ".meta.json")
            sidecar.write_text(json.dumps(res.to_dict(), sort_keys=True), encoding="utf-8")
        self._registry[rid] = res
        return res

    def load(self, rid: str) -> bytes:
        path = self._path_for(rid)
        if not path.exists():
            raise OrchestratorError(
                ErrorCode.MISSING_RESOURCE, f"no stored resource with id {rid}",
                "Check the resource id against the turn record.",
            )
        return path.read_bytes()

    def exists(self, rid: str) -> bool:
        return self._path_for(rid).exists()

    def get_record(self, rid: str) -> Resource | None:
        rec = self._registry.get(rid)
        if rec is not None:
            return rec
        sidecar = self.root / rid[:2] / (rid + ".meta.json")
        if sidecar.exists():
            rec = Resource.from_dict(json.loads(sidecar.read_text(encoding="utf-8")))
            self._registry[rid] = rec
            return rec
        return None

    def remember(self, resources: list[Resource]) -> None:
        """Re-register records restored from a journal."""
        for r in resources:
            self._registry[r.id] = r


def _iter_context_resources(context: Context):
    """All (turn_index, is_output, list_index, resource_id) tuples, in order."""
    for turn in context.turns:
        for i, rid in enumerate(turn.query.resources):
            yield (turn.index, 0, i, rid)
        for i, rid in enumerate(turn.outputs):
            yield (turn.index, 1, i, rid)


def resolve_reference(
    ref: ReferenceExpr,
    context: Context,
    required: Modality,
    store: ResourceStore,
    pending_uploads: list[Resource] | None = None,
) -> Resource:
    """Resolve a reference expression to a single stored resource.

    ``pending_uploads`` are the current (not yet journaled) turn's uploads;
    they rank newer than anything already in the context. Within a turn,
    tool outputs rank newer than uploads: after a generation turn, "the
    audio" means what was generated.
    """
    pending = pending_uploads or []

    def record_of(rid: str) -> Resource | None:
        return store.get_record(rid)

    if isinstance(ref, RefExplicit):
        rec = record_of(ref.id)
        if rec is None:
            raise OrchestratorError(
                ErrorCode.MISSING_RESOURCE, f"no resource with id {ref.id}",
                "Use an id from an earlier turn's outputs or uploads.",
            )
        if rec.modality != required:
            raise OrchestratorError(
                ErrorCode.BAD_RESOURCE_FORMAT,
                f"resource {ref.id} is {rec.modality.value}, but {required.value} is required",
                f"Reference a {required.value} resource instead.",
            )
        return rec

    if isinstance(ref, RefLatest):
        for res in reversed(pending):
            if res.modality == required:
                return res
        ordered = sorted(_iter_context_resources(context), key=lambda t: (t[0], t[1], t[2]))
        for _, _, _, rid in reversed(ordered):
            rec = record_of(rid)
            if rec is not None and rec.modality == required:
                return rec
        raise OrchestratorError(
            ErrorCode.MISSING_RESOURCE,
            f"no {required.value} resource found in the conversation",
            f"Upload a {required.value} file or run a task that produces one first.",
        )

    if isinstance(ref, RefFromTurn):
        matches = []
        for turn in context.turns:
            if turn.index != ref.turn:
                continue
            for rid in list(turn.outputs) + list(turn.query.resources):
                rec = record_of(rid)
                if rec is not None and rec.modality == required:
                    matches.append(rec)
        if not matches:
            raise OrchestratorError(
                ErrorCode.MISSING_RESOURCE,
                f"turn {ref.turn} has no {required.value} resource",
                "Point at a turn that produced or received one.",
            )
        return matches[0]

    if isinstance(ref, RefUploaded):
        uploads = []
        for _, is_output, _, rid in sorted(_iter_context_resources(context), key=lambda t: (t[0], t[1], t[2])):
            if is_output:
                continue
            rec = record_of(rid)
            if rec is not None and rec.modality == required:
                uploads.append(rec)
        for res in pending:
            if res.modality == required:
                uploads.append(res)
        if len(uploads) < ref.position:
            raise OrchestratorError(
                ErrorCode.MISSING_RESOURCE,
                f"only {len(uploads)} uploaded {required.value} resource(s); position {ref.position} requested",
                f"Upload the {required.value} file first.",
            )
        return uploads[ref.position - 1]

    raise TypeError(f"unknown reference kind {ref!r}")


# --- session journal ---------------------------------------------------------

def journal_append(path: Path, turn: Turn) -> None:
    """One JSON turn per line, flushed before returning."""
    line = json.dumps(turn.to_dict(), sort_keys=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")
        f.flush()
        os.fsync(f.fileno())


def journal_load(path: Path, session_id: str) -> Context:
    """Rebuild a context; stops at the first corrupt line with a warning."""
    context = Context(session_id=session_id)
    if not path.exists():
        return context
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            turn = Turn.from_dict(json.loads(line))
            append_turn(context, turn)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            logger.warning("journal %s: stopping at corrupt line %d (%s)", path, lineno, exc)
            break
    return context
