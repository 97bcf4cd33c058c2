"""Task analysis: classify the family, render the prompt, pick a tool.

The built-in dialogue engine is a deterministic keyword grammar; an external
LLM can be plugged in through :class:`ExternalEngineAdapter` without changing
anything else. Rule order is fixed and first match wins, so routing is
reproducible across runs.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .core import (
    Context,
    ErrorCode,
    Modality,
    OrchestratorError,
    Query,
    RefFromTurn,
    RefLatest,
    RefUploaded,
    RefExplicit,
    ReferenceExpr,
    ResourceStore,
    Resource,
    ref_from_str,
    ref_to_str,
    resolve_reference,
)

DATA_DIR = Path(__file__).parent / "data"
CONTEXT_DIGEST_TURNS = 8  # prompt window; configurable per PromptManager
MAX_CHAIN_STAGES = 4


class TaskFamily(str, Enum):
    AUDIO_TO_TEXT = "audio_to_text"
    AUDIO_TO_AUDIO = "audio_to_audio"
    AUDIO_TO_EVENT = "audio_to_event"
    AUDIO_TO_VIDEO = "audio_to_video"
    TEXT_TO_AUDIO = "text_to_audio"
    IMAGE_TO_AUDIO = "image_to_audio"
    SCORE_TO_AUDIO = "score_to_audio"
    CHAT = "chat"

    @property
    def display_name(self) -> str:
        return "-".join(p if p == "to" else p.capitalize() for p in self.value.split("_"))


class TaskKind(str, Enum):
    SPEECH_RECOGNITION = "speech_recognition"
    SPEECH_TRANSLATION = "speech_translation"
    STYLE_TRANSFER = "style_transfer"
    SPEECH_ENHANCEMENT = "speech_enhancement"
    SPEECH_SEPARATION = "speech_separation"
    MONO_TO_BINAURAL = "mono_to_binaural"
    AUDIO_INPAINTING = "audio_inpainting"
    SOUND_EXTRACTION = "sound_extraction"
    SOUND_DETECTION = "sound_detection"
    TALKING_HEAD_SYNTHESIS = "talking_head_synthesis"
    TEXT_TO_SPEECH = "text_to_speech"
    TEXT_TO_AUDIO = "text_to_audio"
    AUDIO_TO_TEXT = "audio_to_text"
    AUDIO_CAPTION = "audio_to_text"  # alias: captioning is the audio-to-text task
    IMAGE_TO_AUDIO = "image_to_audio"
    SINGING_SYNTHESIS = "singing_synthesis"


# Input/output modality of each task, as registered in the tool catalog.
KIND_IO: dict[TaskKind, tuple[Modality, Modality]] = {
    TaskKind.SPEECH_RECOGNITION: (Modality.AUDIO, Modality.TEXT),
    TaskKind.SPEECH_TRANSLATION: (Modality.AUDIO, Modality.TEXT),
    TaskKind.AUDIO_TO_TEXT: (Modality.AUDIO, Modality.TEXT),
    TaskKind.STYLE_TRANSFER: (Modality.AUDIO, Modality.AUDIO),
    TaskKind.SPEECH_ENHANCEMENT: (Modality.AUDIO, Modality.AUDIO),
    TaskKind.SPEECH_SEPARATION: (Modality.AUDIO, Modality.AUDIO),
    TaskKind.MONO_TO_BINAURAL: (Modality.AUDIO, Modality.AUDIO),
    TaskKind.AUDIO_INPAINTING: (Modality.AUDIO, Modality.AUDIO),
    TaskKind.SOUND_EXTRACTION: (Modality.AUDIO, Modality.AUDIO),
    TaskKind.SOUND_DETECTION: (Modality.AUDIO, Modality.EVENT),
    TaskKind.TALKING_HEAD_SYNTHESIS: (Modality.AUDIO, Modality.VIDEO),
    TaskKind.TEXT_TO_SPEECH: (Modality.TEXT, Modality.AUDIO),
    TaskKind.TEXT_TO_AUDIO: (Modality.TEXT, Modality.AUDIO),
    TaskKind.IMAGE_TO_AUDIO: (Modality.IMAGE, Modality.AUDIO),
    TaskKind.SINGING_SYNTHESIS: (Modality.SCORE, Modality.AUDIO),
}

FAMILY_BY_IO: dict[tuple[Modality, Modality], TaskFamily] = {
    (Modality.AUDIO, Modality.TEXT): TaskFamily.AUDIO_TO_TEXT,
    (Modality.AUDIO, Modality.AUDIO): TaskFamily.AUDIO_TO_AUDIO,
    (Modality.AUDIO, Modality.EVENT): TaskFamily.AUDIO_TO_EVENT,
    (Modality.AUDIO, Modality.VIDEO): TaskFamily.AUDIO_TO_VIDEO,
    (Modality.TEXT, Modality.AUDIO): TaskFamily.TEXT_TO_AUDIO,
    (Modality.IMAGE, Modality.AUDIO): TaskFamily.IMAGE_TO_AUDIO,
    (Modality.SCORE, Modality.AUDIO): TaskFamily.SCORE_TO_AUDIO,
    (Modality.TEXT, Modality.TEXT): TaskFamily.CHAT,
}

SUPPORTED_FAMILIES = [f for f in TaskFamily if f != TaskFamily.CHAT]


def kind_family(kind: TaskKind) -> TaskFamily:
    return FAMILY_BY_IO[KIND_IO[kind]]


def family_list_suggestion() -> str:
    names = ", ".join(f.display_name for f in SUPPORTED_FAMILIES)
    return f"Supported task families: {names}."


# --- intent grammar -----------------------------------------------------------

# Spec'd rule order; each rule's trigger list is extended from synonyms.json so
# paraphrases built from that table keep routing to the same task.
_BASE_RULES: list[tuple[TaskKind, list[str]]] = [
    (TaskKind.SPEECH_RECOGNITION, ["transcribe", "speech to text"]),
    (TaskKind.SPEECH_TRANSLATION, ["translate"]),
    (TaskKind.TEXT_TO_SPEECH, ["say", "read aloud", "text to speech"]),
    (TaskKind.TEXT_TO_AUDIO, ["sound of", "audio of", "generate audio"]),
    (TaskKind.SPEECH_ENHANCEMENT, ["enhance", "denoise", "clean"]),
    (TaskKind.SPEECH_SEPARATION, ["separate"]),
    (TaskKind.MONO_TO_BINAURAL, ["binaural"]),
    (TaskKind.AUDIO_INPAINTING, ["inpaint"]),
    (TaskKind.SOUND_EXTRACTION, ["extract"]),
    (TaskKind.SOUND_DETECTION, ["detect", "events"]),
    (TaskKind.TALKING_HEAD_SYNTHESIS, ["talking head", "portrait video"]),
    (TaskKind.AUDIO_CAPTION, ["caption", "describe the audio"]),
    (TaskKind.STYLE_TRANSFER, ["style"]),
    (TaskKind.SINGING_SYNTHESIS, ["sing"]),
]

_IMAGE_WORDS = re.compile(r"\b(image|picture|photo)\b")
_IMAGE_AUDIO_WORDS = re.compile(r"\b(audio|sound|soundtrack|hear)\b")
_SONIFY = re.compile(r"\bsonify\b")

_GENERATION_VERBS = re.compile(
    r"\b(write|create|generate|make|compose|produce|draw|render|build|design|paint)\b"
)

_QUOTED = re.compile(r"['\"]([^'\"]+)['\"]")
_MASK_SPAN = re.compile(r"from\s+(\d+(?:\.\d+)?)\s*s(?:ec(?:ond)?s?)?\s+to\s+(\d+(?:\.\d+)?)\s*s")
_FROM_TURN = re.compile(r"\bfrom turn (\d+)\b")
_ORDINAL_UPLOAD = re.compile(r"\b(first|second|third|fourth)\s+upload(?:ed)?\b")
_ANY_UPLOAD = re.compile(r"\bupload(?:ed)?\b")
_ORDINALS = {"first": 1, "second": 2, "third": 3, "fourth": 4}
_PRONOUN_TEXT = {"it", "that", "this", "them"}

_LATEST_TRIGGERS = [
    "it", "this", "that", "the last", "last audio", "the audio", "the recording",
    "the clip", "the speech", "the sound", "the file", "the voice", "the track",
    "the score", "the image", "the picture", "the waveform", "the previous",
]
_LATEST_RE = re.compile("|".join(r"\b" + re.escape(t) + r"\b" for t in _LATEST_TRIGGERS))

_THEN_SPLIT = re.compile(r"\bthen\b")


def _load_synonyms() -> dict[str, list[str]]:
    with open(DATA_DIR / "synonyms.json", "r", encoding="utf-8") as f:
        return json.load(f)


_SYNONYMS: dict[str, list[str]] | None = None


def rule_triggers() -> list[tuple[TaskKind, list[str]]]:
    """Base grammar keywords extended with the shipped synonym table."""
    global _SYNONYMS
    if _SYNONYMS is None:
        _SYNONYMS = _load_synonyms()
    out = []
    seen_kinds = set()
    for kind, base in _BASE_RULES:
        extra = [] if kind.value in seen_kinds else _SYNONYMS.get(kind.value, [])
        seen_kinds.add(kind.value)
        out.append((kind, base + extra))
    return out


def _trigger_re(phrase: str) -> re.Pattern:
    return re.compile(r"\b" + re.escape(phrase) + r"\b")


@dataclass
class IntentSketch:
    task: TaskKind | None = None
    params: dict = field(default_factory=dict)
    refs: list[ReferenceExpr] = field(default_factory=list)
    chain_splits: list[str] = field(default_factory=list)
    wants_generation: bool = False
    matched_trigger: str | None = None


def split_chain(description: str) -> list[str]:
    """Split on the token "then", ignoring occurrences inside quotes."""
    parts = []
    buf = []
    quote = None
    i = 0
    text = description
    while i < len(text):
        ch = text[i]
        if quote is None and ch in "'\"":
            quote = ch
        elif quote == ch:
            quote = None
        if quote is None:
            m = _THEN_SPLIT.match(text, i)
            if m:
                parts.append("".join(buf))
                buf = []
                i = m.end()
                continue
        buf.append(ch)
        i += 1
    parts.append("".join(buf))
    cleaned = []
    for p in parts:
        p = p.strip().strip(",").strip()
        p = re.sub(r"^and\s+", "", p)
        if p:
            cleaned.append(p)
    return cleaned or [description.strip()]


def _extract_refs(lowered: str) -> list[ReferenceExpr]:
    positional: list[tuple[int, ReferenceExpr]] = []
    for m in _FROM_TURN.finditer(lowered):
        positional.append((m.start(), RefFromTurn(int(m.group(1)))))
    ordinal_found = False
    for m in _ORDINAL_UPLOAD.finditer(lowered):
        ordinal_found = True
        positional.append((m.start(), RefUploaded(_ORDINALS[m.group(1)])))
    if not ordinal_found and _ANY_UPLOAD.search(lowered):
        positional.append((lowered.index("upload"), RefUploaded(1)))
    if positional:
        return [ref for _, ref in sorted(positional, key=lambda t: t[0])]
    if _LATEST_RE.search(lowered):
        return [RefLatest()]
    return []


def _tts_text(stage: str, trigger_end: int) -> str | None:
    m = _QUOTED.search(stage)
    if m:
        return m.group(1)
    tail = stage[trigger_end:].strip()
    tail = re.sub(r"^(that\s+|:\s*|the\s+text\s+|the\s+words\s+)", "", tail).strip()
    tail = tail.strip("'\"").strip()
    if not tail:
        return None
    if tail.lower() in _PRONOUN_TEXT:
        return None  # placeholder: a chain fills it from the previous stage
    return tail


def parse_intent(description: str, resource_modalities: tuple[Modality, ...] = ()) -> IntentSketch:
    """Deterministic keyword grammar over one chain stage.

    Only the first stage of a chained request is parsed here; the remaining
    stage texts come back verbatim in ``chain_splits``.
    """
    stages = split_chain(description)
    stage = stages[0]
    lowered = stage.lower()
    sketch = IntentSketch(chain_splits=stages[1:])

    for kind, triggers in rule_triggers():
        for trig in triggers:
            m = _trigger_re(trig).search(lowered)
            if not m:
                continue
            sketch.task = kind
            sketch.matched_trigger = trig
            if kind == TaskKind.TEXT_TO_SPEECH:
                text = _tts_text(stage, m.end())
                if text is not None:
                    sketch.params["text"] = text
            elif kind == TaskKind.TEXT_TO_AUDIO:
                tail = stage[m.end():].strip().strip("'\"").strip()
                sketch.params["text"] = tail if tail else stage.strip()
            elif kind == TaskKind.AUDIO_INPAINTING:
                mm = _MASK_SPAN.search(lowered)
                if mm:
                    sketch.params["mask"] = [float(mm.group(1)), float(mm.group(2))]
            sketch.refs = _extract_refs(lowered)
            return sketch

    # Last rule: an image turned into audio, keyed on image evidence.
    has_image = Modality.IMAGE in resource_modalities or bool(_IMAGE_WORDS.search(lowered))
    if has_image and (_IMAGE_AUDIO_WORDS.search(lowered) or _SONIFY.search(lowered)):
        sketch.task = TaskKind.IMAGE_TO_AUDIO
        sketch.refs = _extract_refs(lowered)
        return sketch

    sketch.refs = _extract_refs(lowered)
    sketch.wants_generation = bool(_GENERATION_VERBS.search(lowered))
    return sketch


def classify_family(
    resource_modalities: tuple[Modality, ...],
    intent: IntentSketch,
) -> TaskFamily | None:
    """Map input/output modalities to a task family.

    Input evidence, strongest first: attached resources, then references
    combined with the parsed task. A task keyword alone is not evidence of
    an input resource, so "detect X" with nothing to detect on pairs Text
    with Event and lands outside every family (the caller reports it as
    unsupported). Total: returns None instead of raising.
    """
    if resource_modalities:
        in_mod = resource_modalities[0]
    elif intent.refs and intent.task is not None:
        in_mod = KIND_IO[intent.task][0]
    else:
        in_mod = Modality.TEXT

    if intent.task is not None:
        out_mod = KIND_IO[intent.task][1]
    elif intent.wants_generation:
        return None
    else:
        out_mod = Modality.TEXT

    return FAMILY_BY_IO.get((in_mod, out_mod))


# --- prompt manager -----------------------------------------------------------

@dataclass
class CatalogEntry:
    tool_id: str
    task: TaskKind
    input_sig: list[Modality]
    output_sig: list[Modality]
    description: str

    def line(self) -> str:
        ins = "+".join(m.value for m in self.input_sig)
        outs = "+".join(m.value for m in self.output_sig)
        return f"{self.tool_id} | {self.task.value} | {ins} -> {outs} | {self.description}"


_SYSTEM_PREAMBLE = (
    "You route one user request to one registered audio tool.\n"
    'Reply with JSON only: {"tool_id": string, "params": object, "input_refs": [string]}.\n'
    'input_refs entries are "latest", "turn:<k>", "upload:<n>" or "id:<resource id>".'
)


@dataclass
class PromptBundle:
    family: TaskFamily
    catalog: list[CatalogEntry]
    description: str
    context_digest: str
    system_preamble: str = _SYSTEM_PREAMBLE
    error_note: str = ""
    # carried for the builtin engine; not part of the rendered text
    intent: IntentSketch | None = None
    resource_modalities: tuple[Modality, ...] = ()

    def text(self) -> str:
        lines = [self.system_preamble]
        if self.error_note:
            lines.append(f"[error] {self.error_note}")
        lines.append(f"[family] {self.family.value}")
        lines.append("[tools]")
        lines.extend(e.line() for e in self.catalog)
        lines.append("[context]")
        if self.context_digest:
            lines.append(self.context_digest)
        lines.append("[query]")
        lines.append(self.description)
        return "\n".join(lines)


def context_digest(context: Context, k: int = CONTEXT_DIGEST_TURNS) -> str:
    lines = []
    for turn in context.turns[-k:]:
        desc = turn.query.description[:80]
        if turn.error is not None:
            outcome = f"error:{turn.error.code.value}"
        else:
            outcome = turn.response_text[:80] or "ok"
        lines.append(f"q{turn.index}: {desc} -> {outcome}")
    return "\n".join(lines)


def render_prompt(
    family: TaskFamily,
    catalog: list[CatalogEntry],
    description: str,
    context: Context,
    k: int = CONTEXT_DIGEST_TURNS,
) -> PromptBundle:
    if not catalog:
        raise OrchestratorError(
            ErrorCode.UNSUPPORTED_TASK,
            f"no tool is registered for the {family.display_name} family",
            family_list_suggestion(),
        )
    return PromptBundle(
        family=family,
        catalog=list(catalog),
        description=description,
        context_digest=context_digest(context, k),
    )


# --- structured arguments -------------------------------------------------------

@dataclass
class StructuredArguments:
    tool_id: str
    task: TaskKind
    inputs: list[str] = field(default_factory=list)  # serialized ReferenceExpr per input slot
    params: dict = field(default_factory=dict)
    chain: list["StructuredArguments"] = field(default_factory=list)

    def input_refs(self) -> list[ReferenceExpr]:
        return [ref_from_str(s) for s in self.inputs]

    def to_dict(self) -> dict:
        d = {
            "tool_id": self.tool_id,
            "task": self.task.value,
            "inputs": list(self.inputs),
            "params": self.params,
        }
        if self.chain:
            d["chain"] = [c.to_dict() for c in self.chain]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredArguments":
        return cls(
            tool_id=d["tool_id"],
            task=TaskKind(d["task"]),
            inputs=list(d.get("inputs", [])),
            params=dict(d.get("params", {})),
            chain=[cls.from_dict(c) for c in d.get("chain", [])],
        )


# --- dialogue engines ------------------------------------------------------------

_PARAPHRASE_TEMPLATES = [
    "please ", "could you ", "can you ", "i would like you to ",
    "kindly ", "go ahead and ", "now ",
]


class BuiltinRuleEngine:
    """Deterministic engine: the intent grammar plus catalog-order selection."""

    is_builtin = True
    temperature = 0.0
    max_tokens = 2048

    def analyze(self, bundle: PromptBundle) -> dict:
        intent = bundle.intent
        if intent is None:
            intent = parse_intent(bundle.description, bundle.resource_modalities)
        candidates = bundle.catalog
        if intent.task is not None:
            matching = [e for e in candidates if e.task == intent.task]
            if matching:
                candidates = matching
        # catalog arrives sorted by (priority desc, registration order)
        chosen = candidates[0]
        return {
            "tool_id": chosen.tool_id,
            "params": dict(intent.params),
            "input_refs": [ref_to_str(r) for r in intent.refs],
        }

    @staticmethod
    def _route_sig(prompt: str) -> tuple:
        intent = parse_intent(prompt)
        return (intent.task, classify_family((), intent))

    def paraphrase(self, prompt: str, n: int) -> list[str]:
        """Template and synonym rewrites, all distinct.

        A synonym swap can drop a reference word that only lived inside the
        matched trigger, so every candidate is re-routed and kept only when
        it routes exactly like the seed. The pure-template stream never
        changes routing, which keeps the candidate supply unbounded.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        lowered = prompt.lower()
        variants_of_trigger: list[str] = [prompt]
        for kind, triggers in rule_triggers():
            for trig in triggers:
                m = _trigger_re(trig).search(lowered)
                if m:
                    for other in triggers:
                        if other == trig:
                            continue
                        variants_of_trigger.append(prompt[:m.start()] + other + prompt[m.end():])
                    break
            else:
                continue
            break

        seed_sig = self._route_sig(prompt)
        out: list[str] = []
        seen = {prompt}
        repeat = 1
        while len(out) < n:
            for tpl in _PARAPHRASE_TEMPLATES:
                for base in variants_of_trigger:
                    cand = tpl * repeat + base
                    if cand in seen or self._route_sig(cand) != seed_sig:
                        continue
                    seen.add(cand)
                    out.append(cand)
                    if len(out) >= n:
                        return out
            repeat += 1
        return out


class ExternalEngineAdapter:
    """HTTP adapter for a real dialogue engine.

    Greedy settings by default: temperature 0, 2048 generated tokens.
    Expects the endpoint to answer POST {prompt, temperature, max_tokens}
    with the constrained-JSON reply, and {mode: "paraphrase", prompt, n}
    with {"paraphrases": [...]}.
    """

    is_builtin = False

    def __init__(self, url: str | None = None, api_key: str | None = None,
                 temperature: float = 0.0, max_tokens: int = 2048):
        self.url = url or os.environ.get("ORCH_ENGINE_URL")
        self.api_key = api_key or os.environ.get("ORCH_ENGINE_KEY")
        self.temperature = temperature
        self.max_tokens = max_tokens
        if not self.url:
            raise OrchestratorError(
                ErrorCode.ENGINE_UNAVAILABLE,
                "external engine requested but ORCH_ENGINE_URL is not set",
                "Set ORCH_ENGINE_URL (and ORCH_ENGINE_KEY if required) or use the builtin engine.",
            )

    def _post(self, payload: dict) -> dict:
        import httpx

        headers = {}
        if self.api_key:
            headers["authorization"] = f"Bearer {self.api_key}"
        try:
            resp = httpx.post(self.url, json=payload, headers=headers, timeout=30.0)
            resp.raise_for_status()
            return resp.json()
        except Exception as exc:
            raise OrchestratorError(
                ErrorCode.ENGINE_UNAVAILABLE,
                f"external engine call failed: {exc}",
                "Check connectivity to ORCH_ENGINE_URL or fall back to the builtin engine.",
            )

    def analyze(self, bundle: PromptBundle) -> dict:
        return self._post({
            "prompt": bundle.text(),
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })

    def paraphrase(self, prompt: str, n: int) -> list[str]:
        reply = self._post({
            "mode": "paraphrase",
            "prompt": prompt,
            "n": n,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
        out = reply.get("paraphrases", [])
        if len(out) != n or len(set(out)) != n:
            raise OrchestratorError(
                ErrorCode.ENGINE_UNAVAILABLE,
                f"engine returned {len(out)} paraphrases, wanted {n} distinct",
            )
        return out


def make_engine(name: str = "builtin"):
    if name == "builtin":
        return BuiltinRuleEngine()
    if name == "external":
        return ExternalEngineAdapter()
    raise OrchestratorError(
        ErrorCode.ENGINE_UNAVAILABLE, f"unknown engine {name!r}",
        'Use "builtin" or "external".',
    )


# --- the full analysis stage ------------------------------------------------------

def _validated_reply(engine, bundle: PromptBundle) -> tuple[dict, CatalogEntry]:
    ids = {e.tool_id: e for e in bundle.catalog}

    def check(reply) -> CatalogEntry | None:
        if not isinstance(reply, dict):
            return None
        return ids.get(reply.get("tool_id"))

    reply = engine.analyze(bundle)
    entry = check(reply)
    if entry is not None:
        return reply, entry
    if getattr(engine, "is_builtin", False):
        raise OrchestratorError(
            ErrorCode.UNSUPPORTED_TASK,
            f"builtin engine selected unknown tool {reply.get('tool_id')!r}",
            family_list_suggestion(),
        )
    retry_bundle = PromptBundle(
        family=bundle.family, catalog=bundle.catalog, description=bundle.description,
        context_digest=bundle.context_digest,
        error_note=f"previous reply named unknown tool {reply.get('tool_id')!r}; pick one from [tools]",
        intent=bundle.intent, resource_modalities=bundle.resource_modalities,
    )
    reply = engine.analyze(retry_bundle)
    entry = check(reply)
    if entry is None:
        raise OrchestratorError(
            ErrorCode.ENGINE_UNAVAILABLE,
            "external engine failed twice to name a registered tool",
            "Check the engine configuration, or use the builtin engine.",
        )
    return reply, entry


def _fill_slots(
    entry: CatalogEntry,
    parsed_refs: list[ReferenceExpr],
    context: Context,
    store: ResourceStore,
    pending_uploads: list[Resource],
    chain_stage: bool,
) -> list[str]:
    """One reference string per resource-consuming input slot.

    Text slots are fed from params, not resources. Unfilled slots fall back
    to the current uploads, then to the latest matching context resource;
    inside a chain the fallback stays symbolic so the pipeline can bind it
    to the previous stage's output.
    """
    refs = list(parsed_refs)
    used_uploads: set[str] = set()
    slots: list[str] = []
    for slot_mod in entry.input_sig:
        if slot_mod == Modality.TEXT:
            continue
        if refs:
            ref = refs.pop(0)
            if chain_stage and isinstance(ref, RefLatest):
                slots.append(ref_to_str(ref))
                continue
            res = resolve_reference(ref, context, slot_mod, store, pending_uploads)
            slots.append(ref_to_str(RefExplicit(res.id)))
            continue
        pending_match = next(
            (r for r in pending_uploads if r.modality == slot_mod and r.id not in used_uploads),
            None,
        )
        if pending_match is not None:
            used_uploads.add(pending_match.id)
            slots.append(ref_to_str(RefExplicit(pending_match.id)))
            continue
        if chain_stage:
            slots.append(ref_to_str(RefLatest()))
            continue
        res = resolve_reference(RefLatest(), context, slot_mod, store, pending_uploads)
        slots.append(ref_to_str(RefExplicit(res.id)))
    return slots


def analyze(
    query: Query,
    context: Context,
    engine,
    registry,
    store: ResourceStore,
    pending_uploads: list[Resource] | None = None,
    digest_turns: int = CONTEXT_DIGEST_TURNS,
) -> StructuredArguments | None:
    """Stage 2: returns structured arguments, or None for a chat-only turn.

    With the builtin engine this is a pure function of (query, context,
    registry): no randomness, no clock, no I/O beyond the store reads.
    """
    pending = pending_uploads or []
    resource_mods = tuple(r.modality for r in pending)

    first = parse_intent(query.description, resource_mods)
    stage_texts = [query.description if not first.chain_splits else split_chain(query.description)[0]]
    stage_texts += first.chain_splits
    if len(stage_texts) > MAX_CHAIN_STAGES:
        raise OrchestratorError(
            ErrorCode.UNSUPPORTED_TASK,
            f"chains are capped at {MAX_CHAIN_STAGES} stages; this request has {len(stage_texts)}",
            "Split the request into shorter chains.",
        )

    intents = [first] + [parse_intent(t) for t in first.chain_splits]
    stage_args: list[StructuredArguments] = []
    for i, (text, intent) in enumerate(zip(stage_texts, intents)):
        chain_stage = i > 0
        if not chain_stage:
            family = classify_family(resource_mods, intent)
        else:
            if intent.task is None:
                raise OrchestratorError(
                    ErrorCode.UNSUPPORTED_TASK,
                    f"could not understand chain step {i + 1}: {text!r}",
                    family_list_suggestion(),
                )
            family = kind_family(intent.task)
        if family is None:
            raise OrchestratorError(
                ErrorCode.UNSUPPORTED_TASK,
                f"no supported task matches {text!r}",
                family_list_suggestion(),
            )
        if family == TaskFamily.CHAT:
            if chain_stage or len(stage_texts) > 1:
                raise OrchestratorError(
                    ErrorCode.UNSUPPORTED_TASK,
                    f"chain step {i + 1} ({text!r}) is not an audio task",
                    family_list_suggestion(),
                )
            return None

        catalog = registry.catalog_for(family)
        bundle = render_prompt(family, catalog, text, context, digest_turns)
        bundle.intent = intent
        bundle.resource_modalities = resource_mods if not chain_stage else ()
        reply, entry = _validated_reply(engine, bundle)

        reply_refs = [ref_from_str(s) for s in reply.get("input_refs", [])]
        args = StructuredArguments(
            tool_id=entry.tool_id,
            task=intent.task if intent.task is not None else entry.task,
            params=dict(reply.get("params", {})),
        )
        try:
            args.inputs = _fill_slots(entry, reply_refs, context, store, pending, chain_stage)
        except OrchestratorError as exc:
            if exc.partial_args is None:
                exc.partial_args = _assemble(stage_args + [args])
            raise
        stage_args.append(args)

    return _assemble(stage_args)


def _assemble(stage_args: list[StructuredArguments]) -> StructuredArguments | None:
    if not stage_args:
        return None
    head = stage_args[0]
    head.chain = stage_args[1:]
    return head


def paraphrase(engine, prompt: str, n: int) -> list[str]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return engine.paraphrase(prompt, n)
