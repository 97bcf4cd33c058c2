"""Modality transformation: sniffing, the WAV codec, and the sine codec.

The sine codec is the deterministic stand-in for TTS/ASR: every UTF-8 byte
becomes a 100 ms pure tone, and decoding counts zero crossings. Encoding
then decoding is exactly the identity on byte strings up to 4096 bytes,
which is what makes multi-turn chains verifiable in tests.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .core import ErrorCode, Modality, OrchestratorError, Query

SAMPLE_RATE = 16000
SEGMENT_SAMPLES = 1600  # 100 ms per encoded byte
BASE_FREQ_HZ = 200
FREQ_STEP_HZ = 8
MAX_TEXT_BYTES = 4096


@dataclass
class AudioBuffer:
    """PCM audio: ``samples`` has shape (channels, n), values in [-1, 1]."""

    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate

    def mono(self) -> np.ndarray:
        if self.channels != 1:
            raise OrchestratorError(
                ErrorCode.BAD_RESOURCE_FORMAT,
                f"mono audio required, got {self.channels} channels",
                "Downmix or pick a mono resource.",
            )
        return self.samples[0]


class Transcriber(Protocol):
    def transcribe(self, audio: AudioBuffer) -> str: ...


class SineCodecTranscriber:
    """Built-in transcriber: decodes sine-codec framed audio."""

    def transcribe(self, audio: AudioBuffer) -> str:
        return decode_audio_text(audio)


def sniff_modality(payload: bytes, name: str = "") -> Modality:
    """Magic-byte dispatch; the declared name is never trusted."""
    if payload[:4] == b"RIFF":
        if len(payload) < 12 or payload[8:12] != b"WAVE":
            raise OrchestratorError(
                ErrorCode.BAD_RESOURCE_FORMAT,
                f"{name or 'payload'}: RIFF header without a WAVE form",
                "Supply a PCM WAV file.",
            )
        return Modality.AUDIO
    if payload[:2] == b"P5":
        if len(payload) < 7:
            raise OrchestratorError(
                ErrorCode.BAD_RESOURCE_FORMAT,
                f"{name or 'payload'}: truncated PGM header",
                "Supply a complete binary PGM file.",
            )
        return Modality.IMAGE
    if payload[:8] == b"\x89PNG\r\n\x1a\n":
        return Modality.IMAGE
    stripped = payload.lstrip()
    if stripped[:1] == b"{":
        try:
            doc = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return Modality.TEXT
        if isinstance(doc, dict) and "notes" in doc:
            return Modality.SCORE
    return Modality.TEXT


def transform_query(q: Query, transcriber: Transcriber, store=None) -> Query:
    """Stage 1: make the query description textual.

    Text descriptions pass through untouched; an audio description is
    replaced by its transcription. The resource list is never modified.
    """
    if q.description_audio_id is None:
        return q
    if store is None:
        raise ValueError("an audio description needs a store to load from")
    payload = store.load(q.description_audio_id)
    try:
        text = transcriber.transcribe(read_wav(payload))
    except OrchestratorError:
        raise
    except Exception as exc:
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT,
            f"could not transcribe the audio description: {exc}",
            "Record again or type the request as text.",
        )
    return Query(description=text, resources=list(q.resources), description_audio_id=q.description_audio_id)


# --- WAV (PCM 16-bit little-endian, 1-2 channels) ---------------------------

def read_wav(payload: bytes) -> AudioBuffer:
    if len(payload) < 12 or payload[:4] != b"RIFF" or payload[8:12] != b"WAVE":
        raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, "not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(payload):
        chunk_id = payload[pos:pos + 4]
        (size,) = struct.unpack_from("<I", payload, pos + 4)
        body = payload[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, "truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if fmt is None:
                raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, "data chunk before fmt chunk")
            data = body
            break
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or data is None:
        raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, "missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT, f"compressed WAV (format tag {audio_format}) is not supported",
            "Export as uncompressed 16-bit PCM.",
        )
    if bits != 16:
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT, f"{bits}-bit WAV is not supported",
            "Export as 16-bit PCM.",
        )
    if channels not in (1, 2):
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT, f"{channels}-channel WAV is not supported",
            "Export mono or stereo.",
        )
    frame = 2 * channels
    usable = len(data) - (len(data) % frame)
    ints = np.frombuffer(data[:usable], dtype="<i2").astype(np.float64)
    samples = ints.reshape(-1, channels).T / 32768.0
    return AudioBuffer(sample_rate=sample_rate, samples=samples)


def write_wav(buf: AudioBuffer) -> bytes:
    if buf.channels not in (1, 2):
        raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, f"cannot write {buf.channels}-channel WAV")
    ints = np.clip(np.rint(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    data = ints.T.reshape(-1).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, 1, buf.channels, buf.sample_rate,
        buf.sample_rate * buf.channels * 2, buf.channels * 2, 16,
        b"data", len(data),
    )
    return header + data


# --- sine codec --------------------------------------------------------------

def byte_freq(b: int) -> int:
    return BASE_FREQ_HZ + FREQ_STEP_HZ * b


def encode_text_audio(text: str) -> AudioBuffer:
    """Each UTF-8 byte becomes a 1600-sample tone at 200 + 8*byte Hz."""
    data = text.encode("utf-8")
    if not data:
        raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, "cannot synthesize empty text",
                                "Provide some text to speak.")
    if len(data) > MAX_TEXT_BYTES:
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT, f"text is {len(data)} bytes; the synthesizer caps at {MAX_TEXT_BYTES}",
            "Split the text into shorter requests.",
        )
    t = np.arange(SEGMENT_SAMPLES, dtype=np.float64)
    segments = [0.5 * np.sin(2.0 * math.pi * byte_freq(b) * t / SAMPLE_RATE) for b in data]
    return AudioBuffer(sample_rate=SAMPLE_RATE, samples=np.concatenate(segments)[np.newaxis, :])


def _count_sign_changes(seg: np.ndarray) -> int:
    pos = seg > 0.0
    return int(np.count_nonzero(pos[1:] != pos[:-1]))


def decode_audio_text(audio: AudioBuffer) -> str:
    """Zero-crossing decode; inverse of :func:`encode_text_audio`.

    Each segment starts exactly on a crossing, so the counted changes
    overshoot the nominal 0.2*f by up to 4 Hz worth and never undershoot
    past 1; byte recovery must therefore break .5 ties downward.
    """
    x = audio.mono()
    if audio.num_samples == 0:
        raise OrchestratorError(ErrorCode.BAD_RESOURCE_FORMAT, "cannot decode zero-length audio")
    if audio.sample_rate != SAMPLE_RATE:
        raise OrchestratorError(
            ErrorCode.BAD_RESOURCE_FORMAT,
            f"decoder expects {SAMPLE_RATE} Hz audio, got {audio.sample_rate}",
            "Resample or use codec-framed audio.",
        )
    out = bytearray()
    for i in range(audio.num_samples // SEGMENT_SAMPLES):
        seg = x[i * SEGMENT_SAMPLES:(i + 1) * SEGMENT_SAMPLES]
        freq = 5 * _count_sign_changes(seg)
        b = (freq - BASE_FREQ_HZ + 3) // FREQ_STEP_HZ  # round half down of (freq-200)/8
        out.append(max(0, min(255, b)))
    return out.decode("utf-8", errors="replace")
