import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiohub.core import ErrorCode, Modality, Origin, OrchestratorError, Query, ResourceStore
from audiohub.modality import (
    SEGMENT_SAMPLES,
    AudioBuffer,
    SineCodecTranscriber,
    decode_audio_text,
    encode_text_audio,
    read_wav,
    sniff_modality,
    transform_query,
    write_wav,
)


# --- sniffing --------------------------------------------------------------------

def test_sniff_wav_magic():
    assert sniff_modality(write_wav(encode_text_audio("x")), "anything.bin") == Modality.AUDIO


def test_sniff_pgm_and_png():
    assert sniff_modality(b"P5\n2 2\n255\n1234", "img") == Modality.IMAGE
    assert sniff_modality(b"\x89PNG\r\n\x1a\n" + b"0" * 8, "img") == Modality.IMAGE


def test_sniff_score_json():
    assert sniff_modality(b'{"notes": []}', "s.json") == Modality.SCORE
    assert sniff_modality(b'{"other": 1}', "s.json") == Modality.TEXT


def test_sniff_plain_text():
    assert sniff_modality(b"transcribe this", "q.txt") == Modality.TEXT


def test_sniff_truncated_riff_rejected():
    with pytest.raises(OrchestratorError) as exc:
        sniff_modality(b"RIFF1234", "x.wav")
    assert exc.value.code == ErrorCode.BAD_RESOURCE_FORMAT


def test_sniff_truncated_pgm_rejected():
    with pytest.raises(OrchestratorError):
        sniff_modality(b"P5\n1", "x.pgm")


# --- WAV codec --------------------------------------------------------------------

def test_wav_silence_roundtrip():
    buf = AudioBuffer(16000, np.zeros((1, 16000)))
    back = read_wav(write_wav(buf))
    assert back.sample_rate == 16000
    assert back.channels == 1
    assert back.num_samples == 16000
    assert np.all(back.samples == 0.0)


def test_wav_byte_identity_on_arbitrary_pcm():
    rng = np.random.default_rng(7)
    ints = rng.integers(-32768, 32768, size=333, dtype=np.int16)
    buf = AudioBuffer(8000, (ints / 32768.0)[np.newaxis, :])
    payload = write_wav(buf)
    assert write_wav(read_wav(payload)) == payload


def test_wav_stereo_roundtrip():
    rng = np.random.default_rng(8)
    ints = rng.integers(-32768, 32768, size=(2, 100), dtype=np.int16)
    buf = AudioBuffer(44100, ints / 32768.0)
    back = read_wav(write_wav(buf))
    assert back.channels == 2
    assert np.array_equal(back.samples, buf.samples)


def test_wav_rejects_24bit():
    import struct

    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + 6, b"WAVE", b"fmt ", 16, 1, 1, 16000,
        16000 * 3, 3, 24, b"data", 6,
    ) + b"\x00" * 6
    with pytest.raises(OrchestratorError) as exc:
        read_wav(header)
    assert exc.value.code == ErrorCode.BAD_RESOURCE_FORMAT


def test_wav_rejects_compressed_and_many_channels():
    import struct

    def make(fmt_tag, channels, bits):
        return struct.pack(
            "<4sI4s4sIHHIIHH4sI",
            b"RIFF", 36, b"WAVE", b"fmt ", 16, fmt_tag, channels, 16000,
            16000 * 2 * channels, 2 * channels, bits, b"data", 0,
        )

    with pytest.raises(OrchestratorError):
        read_wav(make(3, 1, 16))  # float format tag
    with pytest.raises(OrchestratorError):
        read_wav(make(1, 4, 16))


# --- sine codec --------------------------------------------------------------------

def test_encode_length_law():
    assert encode_text_audio("hi").num_samples == 2 * SEGMENT_SAMPLES
    assert encode_text_audio("a").num_samples == SEGMENT_SAMPLES


def test_encode_amplitude_bound():
    buf = encode_text_audio("loudness check")
    assert float(np.max(np.abs(buf.samples))) <= 0.5


def test_encode_rejects_empty_and_oversize():
    with pytest.raises(OrchestratorError):
        encode_text_audio("")
    with pytest.raises(OrchestratorError):
        encode_text_audio("x" * 4097)


def test_byte_65_is_720hz_with_144_crossings():
    buf = encode_text_audio("A")
    x = buf.samples[0]
    nz = x[x != 0.0]
    crossings = int(np.count_nonzero(np.sign(nz[1:]) != np.sign(nz[:-1])))
    assert abs(crossings - 144) <= 1  # 720 Hz over 100 ms
    assert decode_audio_text(buf) == "A"


def test_decode_all_zero_segment_gives_nul_byte():
    buf = AudioBuffer(16000, np.zeros((1, SEGMENT_SAMPLES)))
    assert decode_audio_text(buf) == "\x00"


def test_decode_trailing_partial_segment_ignored():
    buf = encode_text_audio("ok")
    padded = AudioBuffer(16000, np.concatenate([buf.samples[0], np.zeros(100)])[np.newaxis, :])
    assert decode_audio_text(padded) == "ok"


def test_decode_rejects_empty():
    with pytest.raises(OrchestratorError):
        decode_audio_text(AudioBuffer(16000, np.zeros((1, 0))))


def test_roundtrip_exhaustive_printable_ascii_singletons():
    for ch in string.printable:
        assert decode_audio_text(encode_text_audio(ch)) == ch


def test_roundtrip_survives_wav_quantization():
    s = "the quick brown fox jumps over the lazy dog 0123456789"
    buf = read_wav(write_wav(encode_text_audio(s)))
    assert decode_audio_text(buf) == s


@given(st.text(alphabet=string.printable, min_size=1, max_size=64))
@settings(max_examples=200, deadline=None)
def test_roundtrip_property_printable(s):
    assert decode_audio_text(encode_text_audio(s)) == s


@given(st.text(min_size=1, max_size=32).filter(lambda s: 1 <= len(s.encode()) <= 4096))
@settings(max_examples=100, deadline=None)
def test_roundtrip_property_any_utf8(s):
    assert decode_audio_text(encode_text_audio(s)) == s


# --- transform_query ---------------------------------------------------------------

def test_transform_text_query_unchanged(tmp_path):
    q = Query("denoise this", resources=["r1"])
    out = transform_query(q, SineCodecTranscriber())
    assert out.description == "denoise this"
    assert out.resources == ["r1"]
    assert out is q  # identity branch


def test_transform_audio_description(tmp_path):
    store = ResourceStore(tmp_path)
    payload = write_wav(encode_text_audio("transcribe it"))
    res = store.store_resource(payload, "desc.wav", Origin.upload(1))
    q = Query("", resources=["r9"], description_audio_id=res.id)
    out = transform_query(q, SineCodecTranscriber(), store)
    assert out.description == "transcribe it"
    assert out.resources == ["r9"]  # resource list untouched
    assert out.description_audio_id == res.id


def test_transform_empty_resources_passthrough():
    q = Query("x")
    out = transform_query(q, SineCodecTranscriber())
    assert out.description == "x"
    assert out.resources == []
