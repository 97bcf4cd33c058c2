"""Stage 4: turn tool output into a user-facing response.

Audio results ship as a playable file plus a rendered waveform image;
text results come back as text; detection results add a posteriorgram CSV;
video results reference the frame manifest plus three representative frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .analysis import TaskKind, family_list_suggestion, kind_family, TaskFamily
from .core import (
    Attachment,
    ErrorCode,
    ErrorReport,
    Modality,
    Origin,
    OrchestratorError,
    ResourceStore,
)
from .execution import ToolOutput
from .modality import AudioBuffer, read_wav

WAVEFORM_WIDTH = 512
WAVEFORM_HEIGHT = 128
POSTERIOR_STEP_S = 0.01

RENDERER_ID = "response-renderer"


@dataclass
class Response:
    text: str
    attachments: list[Attachment] = field(default_factory=list)


def render_waveform_image(buf: AudioBuffer) -> bytes:
    """512x128 binary PGM: per-column peak bars centered on row 64."""
    n = buf.num_samples
    peaks = np.zeros(WAVEFORM_WIDTH)
    flat = np.max(np.abs(buf.samples), axis=0)
    for j in range(WAVEFORM_WIDTH):
        lo = j * n // WAVEFORM_WIDTH
        hi = (j + 1) * n // WAVEFORM_WIDTH
        if hi > lo:
            peaks[j] = float(np.max(flat[lo:hi]))
    img = np.zeros((WAVEFORM_HEIGHT, WAVEFORM_WIDTH), dtype=np.uint8)
    center = WAVEFORM_HEIGHT // 2
    for j, peak in enumerate(peaks):
        h = int(round(63 * min(1.0, peak)))
        img[center - h:center + h + 1, j] = 255
    header = f"P5\n{WAVEFORM_WIDTH} {WAVEFORM_HEIGHT}\n255\n".encode("ascii")
    return header + img.tobytes()


def render_posteriorgram(posterior, categories: list[str]) -> bytes:
    """CSV: header ``time_s,<category...>``, one row per 10 ms frame."""
    rows = [list(r) for r in posterior]
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValueError(f"ragged posterior matrix: row widths {sorted(widths)}")
    if rows and widths and widths != {len(categories)}:
        raise ValueError(f"{len(categories)} categories but rows have {widths.pop()} values")
    lines = ["time_s," + ",".join(categories)]
    for i, row in enumerate(rows):
        lines.append(f"{i * POSTERIOR_STEP_S:.2f}," + ",".join(f"{float(v):.4f}" for v in row))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _audio_response(output: ToolOutput, store: ResourceStore, turn_index: int) -> Response:
    origin = Origin.tool(turn_index, RENDERER_ID)
    attachments = []
    durations = []
    for res in output.resources:
        if res.modality != Modality.AUDIO:
            continue
        buf = read_wav(store.load(res.id))
        durations.append(buf.duration_s)
        attachments.append(Attachment(res.id, "AudioFile"))
        wf = store.store_resource(render_waveform_image(buf), f"waveform-{res.id}.pgm", origin)
        attachments.append(Attachment(wf.id, "WaveformImage"))
    if len(durations) == 1:
        text = f"Here is the audio ({durations[0]:.1f} s)."
    else:
        text = f"Here are {len(durations)} audio files (" + ", ".join(f"{d:.1f} s" for d in durations) + ")."
    return Response(text=text, attachments=attachments)


def _text_response(output: ToolOutput) -> Response:
    attachments = [Attachment(r.id, "TextBlock") for r in output.resources if r.modality == Modality.TEXT]
    return Response(text=output.text or "", attachments=attachments)


def _event_response(output: ToolOutput, store: ResourceStore, turn_index: int) -> Response:
    origin = Origin.tool(turn_index, RENDERER_ID)
    posterior = output.posterior if output.posterior is not None else []
    csv_payload = render_posteriorgram(posterior, output.categories or ["sound"])
    csv_res = store.store_resource(csv_payload, "posteriorgram.csv", origin, modality=Modality.TEXT)
    attachments = [Attachment(csv_res.id, "PosteriorgramCsv")]
    events = output.events or []
    if events:
        spans = "; ".join(f"{e.label} {e.onset_s:.2f}-{e.offset_s:.2f} s (score {e.score:.2f})" for e in events)
        text = f"Detected {len(events)} event(s): {spans}."
    else:
        text = "Detected no events."
    return Response(text=text, attachments=attachments)


def _video_response(output: ToolOutput, store: ResourceStore) -> Response:
    manifest_res = next(r for r in output.resources if r.modality == Modality.VIDEO)
    manifest = json.loads(store.load(manifest_res.id).decode("utf-8"))
    frames = manifest.get("frames", [])
    attachments = [Attachment(manifest_res.id, "VideoFrames")]
    if frames:
        picks = sorted({0, len(frames) // 2, len(frames) - 1})
        attachments.extend(Attachment(frames[i], "VideoFrames") for i in picks)
    text = f"Rendered {len(frames)} frames at {manifest.get('fps', 0)} fps."
    return Response(text=text, attachments=attachments)


def render_response(
    task: TaskKind,
    output: ToolOutput,
    store: ResourceStore,
    turn_index: int,
) -> Response:
    family = kind_family(task)
    if family in (TaskFamily.AUDIO_TO_AUDIO, TaskFamily.TEXT_TO_AUDIO,
                  TaskFamily.IMAGE_TO_AUDIO, TaskFamily.SCORE_TO_AUDIO):
        return _audio_response(output, store, turn_index)
    if family == TaskFamily.AUDIO_TO_TEXT:
        return _text_response(output)
    if family == TaskFamily.AUDIO_TO_EVENT:
        return _event_response(output, store, turn_index)
    if family == TaskFamily.AUDIO_TO_VIDEO:
        return _video_response(output, store)
    raise ValueError(f"no attachment recipe for task {task!r}")


def render_error(error: ErrorReport, registry=None) -> Response:
    suggestion = error.suggestion
    if error.code == ErrorCode.UNSUPPORTED_TASK and "Supported task families" not in suggestion:
        suggestion = (suggestion + " " + family_list_suggestion()).strip()
    return Response(text=f"{error.message}. {suggestion}", attachments=[])
