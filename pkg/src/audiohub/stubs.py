"""Deterministic stub executors for every registered task.

Each stub is a small, exactly-specified DSP procedure so that chains and
cross-turn references can be verified bit-for-bit in tests. All tunable
constants live in :data:`DSP` as the single source of truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .core import ErrorCode, Modality, OrchestratorError, fnv1a64
from .modality import (
    SAMPLE_RATE,
    AudioBuffer,
    decode_audio_text,
    encode_text_audio,
)

DSP = SimpleNamespace(
    frame_len=400,            # event detector analysis frame
    frame_hop=160,            # 10 ms at 16 kHz
    event_rms_threshold=0.1,
    event_min_frames=5,
    posterior_rms_full=0.5,
    enhance_peak=0.9,
    enhance_silence_eps=1e-6,
    binaural_delay=16,        # samples
    separation_alpha=0.1,     # single-pole filter coefficient
    head_fps=10,
    head_size=64,
    head_face_lo=8,
    head_face_hi=55,
    head_face_value=128,
    head_mouth_width=24,
    head_mouth_row=44,
    head_mouth_max=20,
    head_rms_full=0.5,
    tone_count=4,
    tone_seconds=0.5,
    tone_amplitude=0.4,
    midi_lo=21,
    midi_hi=108,
    sing_amplitude=0.5,
)

_TRANSLATIONS_CACHE: dict[str, str] | None = None


def translation_table() -> dict[str, str]:
    global _TRANSLATIONS_CACHE
    if _TRANSLATIONS_CACHE is None:
        from .analysis import DATA_DIR

        with open(DATA_DIR / "translations.json", "r", encoding="utf-8") as f:
            _TRANSLATIONS_CACHE = json.load(f)
    return _TRANSLATIONS_CACHE


@dataclass
class Event:
    onset_s: float
    offset_s: float
    label: str
    score: float

    def to_dict(self) -> dict:
        return {"onset_s": self.onset_s, "offset_s": self.offset_s, "label": self.label, "score": self.score}


@dataclass
class StubResult:
    """What a stub hands back before persistence: payload-level outputs."""

    audio: list[AudioBuffer] = field(default_factory=list)
    text: str | None = None
    events: list[Event] | None = None
    posterior: np.ndarray | None = None  # frames x categories, values in [0, 1]
    categories: list[str] = field(default_factory=lambda: ["sound"])
    frames: list[bytes] = field(default_factory=list)  # PGM payloads (video tasks)
    fps: int = 0
    diagnostics: str = ""


def _require_mono(buf: AudioBuffer, who: str) -> np.ndarray:
    if buf.channels != 1:
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT,
            f"{who} needs mono audio, got {buf.channels} channels",
            "Pick a mono resource or separate the channels first.",
        )
    return buf.samples[0]


def _require_nonempty(buf: AudioBuffer, who: str) -> None:
    if buf.num_samples == 0:
        raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, f"{who} got zero-length audio")


def frame_rms(x: np.ndarray, frame_len: int = DSP.frame_len, hop: int = DSP.frame_hop) -> np.ndarray:
    n_frames = max(0, (len(x) - frame_len) // hop + 1) if len(x) >= frame_len else 0
    out = np.empty(n_frames, dtype=np.float64)
    for i in range(n_frames):
        seg = x[i * hop:i * hop + frame_len]
        out[i] = math.sqrt(float(np.mean(seg * seg)))
    return out


def stub_tts(text: str) -> StubResult:
    return StubResult(audio=[encode_text_audio(text)])


def stub_asr(buf: AudioBuffer) -> StubResult:
    _require_nonempty(buf, "speech recognition")
    return StubResult(text=decode_audio_text(buf))


def stub_translate(buf: AudioBuffer) -> StubResult:
    _require_nonempty(buf, "speech translation")
    table = translation_table()
    words = decode_audio_text(buf).split(" ")
    return StubResult(text=" ".join(table.get(w, w) for w in words))


def stub_event_detect(buf: AudioBuffer) -> StubResult:
    x = _require_mono(buf, "sound detection")
    _require_nonempty(buf, "sound detection")
    rms = frame_rms(x)
    hop_s = DSP.frame_hop / SAMPLE_RATE
    active = rms > DSP.event_rms_threshold
    events: list[Event] = []
    run_start = None
    for i, a in enumerate(list(active) + [False]):
        if a and run_start is None:
            run_start = i
        elif not a and run_start is not None:
            if i - run_start >= DSP.event_min_frames:
                events.append(Event(
                    onset_s=round(run_start * hop_s, 6),
                    offset_s=round((i - 1) * hop_s, 6),
                    label="sound",
                    score=round(float(np.mean(rms[run_start:i])), 6),
                ))
            run_start = None
    posterior = np.minimum(rms / DSP.posterior_rms_full, 1.0)[:, np.newaxis]
    return StubResult(events=events, posterior=posterior,
                      diagnostics=f"{len(rms)} frames, {len(events)} events")


def stub_enhance(buf: AudioBuffer) -> StubResult:
    x = _require_mono(buf, "speech enhancement")
    _require_nonempty(buf, "speech enhancement")
    centered = x - float(np.mean(x))
    peak = float(np.max(np.abs(centered))) if len(centered) else 0.0
    if peak < DSP.enhance_silence_eps:
        y = np.zeros_like(x)
    else:
        y = centered * (DSP.enhance_peak / peak)
    return StubResult(audio=[AudioBuffer(buf.sample_rate, y[np.newaxis, :])])


def stub_mono2binaural(buf: AudioBuffer) -> StubResult:
    x = _require_mono(buf, "mono-to-binaural")
    _require_nonempty(buf, "mono-to-binaural")
    d = DSP.binaural_delay
    right = np.concatenate([np.zeros(d), x])[:len(x)]
    return StubResult(audio=[AudioBuffer(buf.sample_rate, np.stack([x, right]))])


def stub_inpaint(buf: AudioBuffer, mask: list[float] | None) -> StubResult:
    x = _require_mono(buf, "audio inpainting")
    _require_nonempty(buf, "audio inpainting")
    if not mask or len(mask) != 2:
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT, "inpainting needs a mask",
            'Phrase the span as "from 0.5 s to 1.5 s".',
        )
    t0, t1 = float(mask[0]), float(mask[1])
    dur = buf.duration_s
    if not (0.0 <= t0 < t1 <= dur):
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT,
            f"mask [{t0} s, {t1} s) is inverted or outside the 0-{dur:.2f} s clip",
            "Give an increasing span inside the clip duration.",
        )
    s0 = int(round(t0 * buf.sample_rate))
    s1 = int(round(t1 * buf.sample_rate))
    y = x.copy()
    a = x[s0 - 1] if s0 > 0 else 0.0
    b = x[s1] if s1 < len(x) else 0.0
    span = s1 - s0 + 1
    for i in range(s0, s1):
        y[i] = a + (b - a) * (i - s0 + 1) / span
    return StubResult(audio=[AudioBuffer(buf.sample_rate, y[np.newaxis, :])])


def stub_extract(buf: AudioBuffer) -> StubResult:
    x = _require_mono(buf, "sound extraction")
    detection = stub_event_detect(buf)
    if not detection.events:
        raise OrchestratorError(
            ErrorCode.TOOL_EXECUTION_FAILED, "no events found to extract",
            "Use audio that actually contains a salient sound.",
        )
    best = max(detection.events, key=lambda e: e.score)
    lo = int(round(best.onset_s * buf.sample_rate))
    hi = min(len(x), int(round(best.offset_s * buf.sample_rate)) + DSP.frame_len)
    return StubResult(audio=[AudioBuffer(buf.sample_rate, x[lo:hi][np.newaxis, :])],
                      diagnostics=f"cropped event {best.onset_s}-{best.offset_s}s score {best.score}")


def stub_separate(buf: AudioBuffer) -> StubResult:
    # Placeholder split: single-pole low-pass and its complement.
    x = _require_mono(buf, "speech separation")
    _require_nonempty(buf, "speech separation")
    alpha = DSP.separation_alpha
    low = np.empty_like(x)
    acc = 0.0
    for i, v in enumerate(x):
        acc = alpha * v + (1.0 - alpha) * acc
        low[i] = acc
    high = x - low
    return StubResult(audio=[
        AudioBuffer(buf.sample_rate, low[np.newaxis, :]),
        AudioBuffer(buf.sample_rate, high[np.newaxis, :]),
    ])


def stub_style_transfer(source: AudioBuffer, reference: AudioBuffer) -> StubResult:
    x = _require_mono(source, "style transfer")
    _require_nonempty(source, "style transfer")
    ref_peak = float(np.max(np.abs(reference.samples))) if reference.num_samples else 0.0
    src_peak = float(np.max(np.abs(x))) if len(x) else 0.0
    if src_peak < 1e-12:
        y = np.zeros_like(x)
    else:
        y = x * (ref_peak / src_peak)
    return StubResult(audio=[AudioBuffer(source.sample_rate, y[np.newaxis, :])])


def stub_caption(buf: AudioBuffer) -> StubResult:
    x = _require_mono(buf, "audio captioning")
    _require_nonempty(buf, "audio captioning")
    events = stub_event_detect(buf).events or []
    peak = float(np.max(np.abs(x)))
    return StubResult(text=f"Audio: {buf.duration_s:.1f}s, {len(events)} events, peak {peak:.2f}")


def _hash_tones(payload: bytes) -> AudioBuffer:
    h = fnv1a64(payload).to_bytes(8, "big")
    n = int(DSP.tone_seconds * SAMPLE_RATE)
    t = np.arange(n, dtype=np.float64)
    segs = []
    for b in h[:DSP.tone_count]:
        f = 200 + 8 * b
        segs.append(DSP.tone_amplitude * np.sin(2.0 * math.pi * f * t / SAMPLE_RATE))
    return AudioBuffer(SAMPLE_RATE, np.concatenate(segs)[np.newaxis, :])


def stub_text_to_audio(description: str) -> StubResult:
    if not description:
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT, "text-to-audio needs a description",
            "Describe the sound to generate.",
        )
    return StubResult(audio=[_hash_tones(description.encode("utf-8"))])


def stub_image_to_audio(image_payload: bytes) -> StubResult:
    if not image_payload:
        raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, "image-to-audio got an empty image")
    return StubResult(audio=[_hash_tones(image_payload)])


def stub_sing(score_payload: bytes) -> StubResult:
    try:
        doc = json.loads(score_payload.decode("utf-8"))
        notes = doc["notes"]
    except Exception:
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT, "score is not valid JSON with a top-level notes list",
            'Upload a score like {"notes": [{"text": "la", "midi": 69, "dur": 0.5}]}.',
        )
    if not notes:
        raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, "score has no notes",
                                "Add at least one note to the score.")
    segs = []
    for note in notes:
        midi = int(note["midi"])
        dur = float(note["dur"])
        if not (DSP.midi_lo <= midi <= DSP.midi_hi):
            raise OrchestratorError(
                ErrorCode.BAD_RESOURCE_FORMAT,
                f"midi note {midi} outside the supported {DSP.midi_lo}..{DSP.midi_hi} range",
                "Keep notes within the piano range.",
            )
        freq = 440.0 * 2.0 ** ((midi - 69) / 12.0)
        n = int(round(dur * SAMPLE_RATE))
        t = np.arange(n, dtype=np.float64)
        segs.append(DSP.sing_amplitude * np.sin(2.0 * math.pi * freq * t / SAMPLE_RATE))
    return StubResult(audio=[AudioBuffer(SAMPLE_RATE, np.concatenate(segs)[np.newaxis, :])])


def _pgm(width: int, height: int, pixels: np.ndarray) -> bytes:
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + pixels.astype(np.uint8).tobytes()


def talking_head_frame(window_rms: float) -> bytes:
    size = DSP.head_size
    img = np.zeros((size, size), dtype=np.uint8)
    lo, hi = DSP.head_face_lo, DSP.head_face_hi
    img[lo:hi + 1, lo:hi + 1] = DSP.head_face_value
    h = int(round(DSP.head_mouth_max * min(1.0, window_rms / DSP.head_rms_full)))
    if h > 0:
        col0 = (size - DSP.head_mouth_width) // 2
        row0 = DSP.head_mouth_row - h // 2
        img[row0:row0 + h, col0:col0 + DSP.head_mouth_width] = 255
    return _pgm(size, size, img)


def stub_talking_head(buf: AudioBuffer) -> StubResult:
    x = _require_mono(buf, "talking head synthesis")
    _require_nonempty(buf, "talking head synthesis")
    window = SAMPLE_RATE // DSP.head_fps
    n_frames = math.ceil(buf.duration_s * DSP.head_fps)
    frames = []
    for i in range(n_frames):
        seg = x[i * window:(i + 1) * window]
        rms = math.sqrt(float(np.mean(seg * seg))) if len(seg) else 0.0
        frames.append(talking_head_frame(rms))
    return StubResult(frames=frames, fps=DSP.head_fps,
                      diagnostics=f"{n_frames} frames at {DSP.head_fps} fps")
