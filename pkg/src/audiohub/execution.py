"""Stage 3: tool registry, executor lifecycle, and pipeline chaining.

Executors come in three kinds. Builtins dispatch straight into the stub
functions; subprocess tools run an argv template against temp files; HTTP
tools POST multipart requests. Subprocess and HTTP tools are health-checked
at load time and registered disabled when the check fails, so a dead
endpoint degrades routing instead of crashing it.
"""

from __future__ import annotations

import base64
import json
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stubs
from .analysis import (
    KIND_IO,
    CatalogEntry,
    StructuredArguments,
    TaskFamily,
    TaskKind,
    kind_family,
)
from .core import (
    Context,
    ErrorCode,
    Modality,
    Origin,
    OrchestratorError,
    RefExplicit,
    RefLatest,
    Resource,
    ResourceStore,
    ref_from_str,
    ref_to_str,
    resolve_reference,
)
from .modality import read_wav, write_wav

SUBPROCESS_TIMEOUT_S = 30.0
HTTP_TIMEOUT_S = 30.0

_EXTENSIONS = {
    Modality.AUDIO: ".wav",
    Modality.TEXT: ".txt",
    Modality.IMAGE: ".pgm",
    Modality.SCORE: ".json",
    Modality.EVENT: ".json",
    Modality.VIDEO: ".json",
}


@dataclass
class ExecutorSpec:
    kind: str  # builtin | subprocess | http
    name: str = ""            # builtin stub name
    argv: list[str] = field(default_factory=list)  # subprocess template
    url: str = ""             # http endpoint

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutorSpec":
        return cls(kind=d["kind"], name=d.get("name", ""), argv=list(d.get("argv", [])), url=d.get("url", ""))

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.name:
            d["name"] = self.name
        if self.argv:
            d["argv"] = list(self.argv)
        if self.url:
            d["url"] = self.url
        return d


@dataclass
class ToolDescriptor:
    id: str
    task: TaskKind
    input_sig: list[Modality]
    output_sig: list[Modality]
    executor: ExecutorSpec
    priority: int
    description: str
    enabled: bool = True
    diagnostics: str = ""

    def catalog_entry(self) -> CatalogEntry:
        return CatalogEntry(self.id, self.task, list(self.input_sig), list(self.output_sig), self.description)


@dataclass
class ToolOutput:
    resources: list[Resource] = field(default_factory=list)
    events: list[stubs.Event] | None = None
    text: str | None = None
    posterior: np.ndarray | None = None
    categories: list[str] = field(default_factory=list)
    diagnostics: str = ""
    elapsed_ms: float = 0.0


# --- builtin dispatch ----------------------------------------------------------

def _missing_text_error(which: str) -> OrchestratorError:
    return OrchestratorError(
        ErrorCode.BAD_RESOURCE_FORMAT, f"{which} needs text to work on",
        "Include the text in the request, e.g. say 'hello'.",
    )


def _run_builtin(name: str, inputs: list, params: dict) -> stubs.StubResult:
    if name == "tts":
        text = params.get("text")
        if not text:
            raise _missing_text_error("text-to-speech")
        return stubs.stub_tts(text)
    if name == "asr":
        return stubs.stub_asr(inputs[0])
    if name == "translate":
        return stubs.stub_translate(inputs[0])
    if name == "enhance":
        return stubs.stub_enhance(inputs[0])
    if name == "binaural":
        return stubs.stub_mono2binaural(inputs[0])
    if name == "inpaint":
        return stubs.stub_inpaint(inputs[0], params.get("mask"))
    if name == "extract":
        return stubs.stub_extract(inputs[0])
    if name == "separate":
        return stubs.stub_separate(inputs[0])
    if name == "detect":
        return stubs.stub_event_detect(inputs[0])
    if name == "caption":
        return stubs.stub_caption(inputs[0])
    if name == "style":
        return stubs.stub_style_transfer(inputs[0], inputs[1])
    if name == "talking_head":
        return stubs.stub_talking_head(inputs[0])
    if name == "text2audio":
        text = params.get("text")
        if not text:
            raise _missing_text_error("text-to-audio")
        return stubs.stub_text_to_audio(text)
    if name == "image2audio":
        return stubs.stub_image_to_audio(inputs[0])
    if name == "sing":
        return stubs.stub_sing(inputs[0])
    raise ValueError(f"unknown builtin stub {name!r}")


BUILTIN_NAMES = {
    "tts", "asr", "translate", "enhance", "binaural", "inpaint", "extract",
    "separate", "detect", "caption", "style", "talking_head", "text2audio",
    "image2audio", "sing",
}


# --- registry --------------------------------------------------------------------

def _probe_subprocess(argv: list[str]) -> str | None:
    base = [_expand_argv_token(a) for a in argv if "{" not in a]
    try:
        proc = subprocess.run(base + ["--probe"], capture_output=True, timeout=SUBPROCESS_TIMEOUT_S)
    except Exception as exc:
        return f"probe failed to launch: {exc}"
    if proc.returncode != 0:
        return f"probe exited {proc.returncode}: {proc.stderr.decode(errors='replace')[:200]}"
    return None


def _probe_http(url: str) -> str | None:
    import httpx

    try:
        resp = httpx.get(url.rstrip("/") + "/health", timeout=5.0)
        if resp.status_code != 200:
            return f"health check returned {resp.status_code}"
    except Exception as exc:
        return f"health check failed: {exc}"
    return None


def _expand_argv_token(token: str) -> str:
    return sys.executable if token == "{python}" else token


class Registry:
    """Immutable after load; catalogs are served in selection order."""

    def __init__(self, descriptors: list[ToolDescriptor]):
        self._descriptors = list(descriptors)
        self._by_id = {d.id: d for d in descriptors}

    def __len__(self) -> int:
        return len(self._descriptors)

    def all(self) -> list[ToolDescriptor]:
        return list(self._descriptors)

    def get(self, tool_id: str) -> ToolDescriptor:
        desc = self._by_id.get(tool_id)
        if desc is None:
            raise OrchestratorError(
                ErrorCode.UNSUPPORTED_TASK, f"no tool registered with id {tool_id!r}",
                "Pick a tool from the registry catalog.",
            )
        return desc

    def catalog_for(self, family: TaskFamily) -> list[CatalogEntry]:
        rows = [
            (i, d) for i, d in enumerate(self._descriptors)
            if d.enabled and kind_family(d.task) == family
        ]
        rows.sort(key=lambda t: (-t[1].priority, t[0]))
        return [d.catalog_entry() for _, d in rows]


def load_registry(config: bytes, probe: bool = True) -> Registry:
    """Parse tools.json, instantiate builtins, health-check external executors."""
    try:
        doc = json.loads(config.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"tool config is not valid JSON: {exc}")
    if not isinstance(doc, list):
        raise ValueError("tool config must be a JSON array of descriptors")

    descriptors: list[ToolDescriptor] = []
    seen: set[str] = set()
    for row in doc:
        tool_id = row["id"]
        if tool_id in seen:
            raise ValueError(f"duplicate tool id {tool_id!r} in config")
        seen.add(tool_id)
        task = TaskKind(row["task"])
        input_sig = [Modality(m) for m in row["input"]]
        output_sig = [Modality(m) for m in row["output"]]
        want_in, want_out = KIND_IO[task]
        if any(m != want_in for m in input_sig) or any(m != want_out for m in output_sig):
            raise ValueError(f"tool {tool_id!r}: signature does not match task {task.value}")
        spec = ExecutorSpec.from_dict(row["executor"])
        desc = ToolDescriptor(
            id=tool_id, task=task, input_sig=input_sig, output_sig=output_sig,
            executor=spec, priority=int(row.get("priority", 0)),
            description=row.get("description", ""),
        )
        if spec.kind == "builtin":
            if spec.name not in BUILTIN_NAMES:
                raise ValueError(f"tool {tool_id!r}: unknown builtin stub {spec.name!r}")
        elif spec.kind == "subprocess":
            if probe:
                problem = _probe_subprocess(spec.argv)
                if problem is not None:
                    desc.enabled = False
                    desc.diagnostics = problem
        elif spec.kind == "http":
            if probe:
                problem = _probe_http(spec.url)
                if problem is not None:
                    desc.enabled = False
                    desc.diagnostics = problem
        else:
            raise ValueError(f"tool {tool_id!r}: unknown executor kind {spec.kind!r}")
        descriptors.append(desc)
    return Registry(descriptors)


def default_config_bytes() -> bytes:
    from .analysis import DATA_DIR

    return (DATA_DIR / "tools.json").read_bytes()


def load_default_registry(probe: bool = True) -> Registry:
    return load_registry(default_config_bytes(), probe=probe)


# --- execution --------------------------------------------------------------------

def _load_typed_input(res: Resource, store: ResourceStore) -> object:
    payload = store.load(res.id)
    if res.modality == Modality.AUDIO:
        return read_wav(payload)
    if res.modality == Modality.TEXT:
        return payload.decode("utf-8", errors="replace")
    return payload  # image / score / event / video stay as raw payloads


def _persist_stub_result(
    result: stubs.StubResult,
    desc: ToolDescriptor,
    store: ResourceStore,
    origin: Origin,
) -> ToolOutput:
    out = ToolOutput(
        events=result.events, text=result.text, posterior=result.posterior,
        categories=list(result.categories), diagnostics=result.diagnostics,
    )
    for i, buf in enumerate(result.audio):
        res = store.store_resource(write_wav(buf), f"{desc.id}-out{i}.wav", origin)
        out.resources.append(res)
    if result.text is not None:
        res = store.store_resource(
            result.text.encode("utf-8"), f"{desc.id}-out.txt", origin, modality=Modality.TEXT,
        )
        out.resources.append(res)
    if result.events is not None:
        doc = {
            "categories": list(result.categories),
            "events": [e.to_dict() for e in result.events],
            "posterior": [] if result.posterior is None else [
                [round(float(v), 6) for v in row] for row in result.posterior
            ],
        }
        res = store.store_resource(
            json.dumps(doc, sort_keys=True).encode("utf-8"),
            f"{desc.id}-events.json", origin, modality=Modality.EVENT,
        )
        out.resources.append(res)
    if result.frames:
        frame_ids = []
        for i, payload in enumerate(result.frames):
            res = store.store_resource(payload, f"{desc.id}-frame{i:04d}.pgm", origin)
            frame_ids.append(res.id)
        manifest = {"fps": result.fps, "frames": frame_ids}
        res = store.store_resource(
            json.dumps(manifest, sort_keys=True).encode("utf-8"),
            f"{desc.id}-video.json", origin, modality=Modality.VIDEO,
        )
        out.resources.append(res)
    return out


def _run_subprocess_tool(
    desc: ToolDescriptor, input_payloads: list[bytes], params: dict,
) -> list[bytes]:
    with tempfile.TemporaryDirectory(prefix="audiohub-exec-") as tmp:
        tmpdir = Path(tmp)
        mapping: dict[str, str] = {"params": json.dumps(params, sort_keys=True)}
        for i, (payload, mod) in enumerate(zip(input_payloads, desc.input_sig)):
            p = tmpdir / f"in{i}{_EXTENSIONS[mod]}"
            p.write_bytes(payload)
            mapping[f"in{i}"] = str(p)
        out_paths = []
        for i, mod in enumerate(desc.output_sig):
            p = tmpdir / f"out{i}{_EXTENSIONS[mod]}"
            mapping[f"out{i}"] = str(p)
            out_paths.append(p)
        argv = [_expand_argv_token(a).format(**mapping) for a in desc.executor.argv]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=SUBPROCESS_TIMEOUT_S)
        except subprocess.TimeoutExpired:
            raise OrchestratorError(
                ErrorCode.TOOL_EXECUTION_FAILED,
                f"{desc.id} timed out after {SUBPROCESS_TIMEOUT_S:.0f} s",
            )
        if proc.returncode != 0:
            raise OrchestratorError(
                ErrorCode.TOOL_EXECUTION_FAILED,
                f"{desc.id} exited {proc.returncode}: {proc.stderr.decode(errors='replace')[:500]}",
            )
        payloads = []
        for p in out_paths:
            if not p.exists():
                raise OrchestratorError(
                    ErrorCode.TOOL_EXECUTION_FAILED, f"{desc.id} did not write {p.name}",
                )
            payloads.append(p.read_bytes())
        return payloads


def _run_http_tool(desc: ToolDescriptor, input_payloads: list[bytes], params: dict) -> tuple[list[bytes], str | None]:
    import httpx

    files = {}
    for i, (payload, mod) in enumerate(zip(input_payloads, desc.input_sig)):
        files[f"in{i}"] = (f"in{i}{_EXTENSIONS[mod]}", payload)
    data = {"params": json.dumps(params, sort_keys=True)}
    try:
        resp = httpx.post(desc.executor.url, files=files, data=data, timeout=HTTP_TIMEOUT_S)
        resp.raise_for_status()
        manifest = resp.json()
    except Exception as exc:
        raise OrchestratorError(ErrorCode.TOOL_EXECUTION_FAILED, f"{desc.id} call failed: {exc}")
    payloads = [base64.b64decode(entry["b64"]) for entry in manifest.get("outputs", [])]
    return payloads, manifest.get("text")


def assign_and_execute(
    args: StructuredArguments,
    store: ResourceStore,
    registry: Registry,
    context: Context,
    turn_index: int,
    pending_uploads: list[Resource] | None = None,
) -> ToolOutput:
    """Load inputs, invoke the executor, persist outputs with provenance."""
    desc = registry.get(args.tool_id)
    if not desc.enabled:
        raise OrchestratorError(
            ErrorCode.TOOL_EXECUTION_FAILED,
            f"tool {desc.id} is disabled: {desc.diagnostics}",
            "Fix the executor backing this tool or pick another.",
        )
    origin = Origin.tool(turn_index, desc.id)

    resource_slots = [m for m in desc.input_sig if m != Modality.TEXT]
    refs = args.input_refs()
    if len(refs) < len(resource_slots):
        raise OrchestratorError(
            ErrorCode.MISSING_RESOURCE,
            f"{desc.id} needs {len(resource_slots)} input(s), got {len(refs)}",
        )
    resolved: list[Resource] = []
    for slot_mod, ref in zip(resource_slots, refs):
        resolved.append(resolve_reference(ref, context, slot_mod, store, pending_uploads))

    start = time.perf_counter()
    if desc.executor.kind == "builtin":
        typed = [_load_typed_input(r, store) for r in resolved]
        try:
            result = _run_builtin(desc.executor.name, typed, args.params)
        except OrchestratorError:
            raise
        except Exception as exc:
            raise OrchestratorError(
                ErrorCode.TOOL_EXECUTION_FAILED, f"{desc.id} failed: {exc}",
                "Check the input format and parameters, then retry.",
            )
        out = _persist_stub_result(result, desc, store, origin)
    else:
        payloads_in = [store.load(r.id) for r in resolved]
        if desc.executor.kind == "subprocess":
            payloads = _run_subprocess_tool(desc, payloads_in, args.params)
            text = None
        else:
            payloads, text = _run_http_tool(desc, payloads_in, args.params)
        if len(payloads) != len(desc.output_sig):
            raise OrchestratorError(
                ErrorCode.TOOL_EXECUTION_FAILED,
                f"{desc.id} produced {len(payloads)} outputs, descriptor promises {len(desc.output_sig)}",
            )
        out = ToolOutput()
        for i, (payload, mod) in enumerate(zip(payloads, desc.output_sig)):
            res = store.store_resource(payload, f"{desc.id}-out{i}{_EXTENSIONS[mod]}", origin, modality=mod)
            out.resources.append(res)
            if mod == Modality.TEXT and out.text is None:
                out.text = payload.decode("utf-8", errors="replace")
        if text is not None:
            out.text = text
    out.elapsed_ms = (time.perf_counter() - start) * 1000.0

    got = [r.modality for r in out.resources]
    if got != list(desc.output_sig):
        raise OrchestratorError(
            ErrorCode.TOOL_EXECUTION_FAILED,
            f"{desc.id} output modalities {[m.value for m in got]} differ from "
            f"descriptor {[m.value for m in desc.output_sig]}",
        )
    return out


def _bind_chain_refs(
    args: StructuredArguments, prev: ToolOutput, prev_desc: ToolDescriptor, desc: ToolDescriptor,
) -> StructuredArguments:
    """Bind a chain stage to the previous stage's outputs, or fail loudly."""
    prev_mods = {r.modality for r in prev.resources}

    def mismatch(needed: str) -> OrchestratorError:
        produced = "+".join(m.value for m in prev_desc.output_sig) or "nothing"
        return OrchestratorError(
            ErrorCode.PIPELINE_MODALITY_MISMATCH,
            f"{prev_desc.id} produces {produced}, but {desc.id} needs {needed}",
            "Reorder the chain so each step consumes what the previous one produces.",
        )

    bound = list(args.inputs)
    resource_slots = [m for m in desc.input_sig if m != Modality.TEXT]
    for i, (slot_mod, ref_s) in enumerate(zip(resource_slots, bound)):
        if not isinstance(ref_from_str(ref_s), RefLatest):
            continue
        if slot_mod not in prev_mods:
            raise mismatch(slot_mod.value)
        latest = [r for r in prev.resources if r.modality == slot_mod][-1]
        bound[i] = ref_to_str(RefExplicit(latest.id))

    params = dict(args.params)
    needs_text = desc.executor.kind == "builtin" and desc.executor.name in ("tts", "text2audio")
    if needs_text and not params.get("text"):
        if prev.text is None:
            raise mismatch(Modality.TEXT.value)
        params["text"] = prev.text
    return StructuredArguments(
        tool_id=args.tool_id, task=args.task, inputs=bound, params=params, chain=[],
    )


def run_pipeline(
    chain: list[StructuredArguments],
    store: ResourceStore,
    registry: Registry,
    context: Context,
    turn_index: int,
    pending_uploads: list[Resource] | None = None,
) -> tuple[list[ToolOutput], OrchestratorError | None]:
    """Execute 1..4 stages; aborts at the first failure with partial outputs."""
    if not 1 <= len(chain) <= 4:
        raise OrchestratorError(
            ErrorCode.UNSUPPORTED_TASK, f"pipeline length {len(chain)} outside 1..4",
            "Split the request into shorter chains.",
        )
    outputs: list[ToolOutput] = []
    prev_out: ToolOutput | None = None
    prev_desc: ToolDescriptor | None = None
    for stage in chain:
        desc = registry.get(stage.tool_id)
        try:
            if prev_out is not None:
                stage = _bind_chain_refs(stage, prev_out, prev_desc, desc)
            out = assign_and_execute(stage, store, registry, context, turn_index, pending_uploads)
        except OrchestratorError as exc:
            return outputs, exc
        outputs.append(out)
        prev_out, prev_desc = out, desc
    return outputs, None
