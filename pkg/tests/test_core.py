import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiohub.core import (
    Context,
    ErrorCode,
    Modality,
    Origin,
    OrchestratorError,
    Query,
    RefExplicit,
    RefFromTurn,
    RefLatest,
    RefUploaded,
    ResourceStore,
    Turn,
    append_turn,
    fnv1a64,
    journal_append,
    journal_load,
    resource_id,
    resolve_reference,
)
from audiohub.modality import encode_text_audio, write_wav


def wav_bytes(text="hello"):
    return write_wav(encode_text_audio(text))


# --- content addressing -----------------------------------------------------

def test_fnv1a64_known_vectors():
    # independent reference values for the standard FNV-1a 64-bit parameters
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_resource_id_shape():
    rid = resource_id(b"abc")
    assert len(rid) == 24
    assert rid.endswith(f"{3:08x}")
    int(rid, 16)  # all hex


def test_store_is_idempotent(tmp_path):
    store = ResourceStore(tmp_path)
    payload = wav_bytes("same")
    r1 = store.store_resource(payload, "a.wav", Origin.upload(1))
    r2 = store.store_resource(payload, "b.wav", Origin.upload(2))
    assert r1.id == r2.id
    files = [p for p in tmp_path.rglob("*") if p.is_file() and not p.name.endswith(".meta.json")]
    assert len(files) == 1


def test_store_sniffs_and_fills_audio_meta(tmp_path):
    store = ResourceStore(tmp_path)
    res = store.store_resource(wav_bytes("abc"), "x.wav", Origin.upload(1))
    assert res.modality == Modality.AUDIO
    assert res.meta is not None
    assert res.meta.sample_rate == 16000
    assert res.meta.num_samples == 3 * 1600

    txt = store.store_resource(b"hello", "x.txt", Origin.upload(1))
    assert txt.modality == Modality.TEXT
    assert txt.meta is None


def test_store_rejects_empty_payload(tmp_path):
    store = ResourceStore(tmp_path)
    with pytest.raises(OrchestratorError) as exc:
        store.store_resource(b"", "x.txt", Origin.upload(1))
    assert exc.value.code == ErrorCode.BAD_RESOURCE_FORMAT


def test_store_layout_and_reload(tmp_path):
    store = ResourceStore(tmp_path)
    res = store.store_resource(b"payload", "x.txt", Origin.upload(1))
    assert (tmp_path / res.id[:2] / res.id).exists()
    assert store.load(res.id) == b"payload"
    # a second store instance sees the sidecar record
    fresh = ResourceStore(tmp_path)
    rec = fresh.get_record(res.id)
    assert rec is not None and rec.modality == Modality.TEXT


@given(st.binary(min_size=1, max_size=200))
@settings(max_examples=50, deadline=None)
def test_resource_id_pure_function_of_bytes(payload):
    assert resource_id(payload) == resource_id(bytes(payload))


# --- context / reference resolution ---------------------------------------------

def build_context(store):
    """turn1: upload audio; turn2: chat; turn3: tool output audio + text."""
    ctx = Context("s")
    up = store.store_resource(wav_bytes("upload one"), "u1.wav", Origin.upload(1))
    append_turn(ctx, Turn(index=1, query=Query("here is a file", resources=[up.id]), response_text="ok"))
    append_turn(ctx, Turn(index=2, query=Query("how are you?"), response_text="fine"))
    out_a = store.store_resource(wav_bytes("generated"), "g.wav", Origin.tool(3, "tts-stub"))
    out_t = store.store_resource(b"generated", "g.txt", Origin.tool(3, "asr-stub"), modality=Modality.TEXT)
    append_turn(ctx, Turn(index=3, query=Query("say 'generated'"), outputs=[out_a.id, out_t.id], response_text="ok"))
    return ctx, up, out_a, out_t


def brute_force_latest(ctx, store, required):
    """Independent oracle: flatten everything, sort by (turn, kind, index)."""
    rows = []
    for turn in ctx.turns:
        for i, rid in enumerate(turn.query.resources):
            rows.append((turn.index, 0, i, rid))
        for i, rid in enumerate(turn.outputs):
            rows.append((turn.index, 1, i, rid))
    rows.sort()
    for _, _, _, rid in reversed(rows):
        rec = store.get_record(rid)
        if rec is not None and rec.modality == required:
            return rec.id
    return None


def test_latest_prefers_tool_output_over_upload(tmp_path):
    store = ResourceStore(tmp_path)
    ctx, up, out_a, _ = build_context(store)
    got = resolve_reference(RefLatest(), ctx, Modality.AUDIO, store)
    assert got.id == out_a.id
    assert got.id == brute_force_latest(ctx, store, Modality.AUDIO)


def test_latest_matches_brute_force_for_every_modality(tmp_path):
    store = ResourceStore(tmp_path)
    ctx, *_ = build_context(store)
    for mod in (Modality.AUDIO, Modality.TEXT):
        expected = brute_force_latest(ctx, store, mod)
        got = resolve_reference(RefLatest(), ctx, mod, store)
        assert got.id == expected


def test_latest_missing_modality(tmp_path):
    store = ResourceStore(tmp_path)
    ctx, *_ = build_context(store)
    with pytest.raises(OrchestratorError) as exc:
        resolve_reference(RefLatest(), ctx, Modality.VIDEO, store)
    assert exc.value.code == ErrorCode.MISSING_RESOURCE
    assert exc.value.suggestion


def test_from_turn_and_uploaded(tmp_path):
    store = ResourceStore(tmp_path)
    ctx, up, out_a, _ = build_context(store)
    assert resolve_reference(RefFromTurn(1), ctx, Modality.AUDIO, store).id == up.id
    assert resolve_reference(RefFromTurn(3), ctx, Modality.AUDIO, store).id == out_a.id
    assert resolve_reference(RefUploaded(1), ctx, Modality.AUDIO, store).id == up.id
    with pytest.raises(OrchestratorError):
        resolve_reference(RefUploaded(2), ctx, Modality.AUDIO, store)


def test_explicit_wrong_modality_is_format_error(tmp_path):
    store = ResourceStore(tmp_path)
    ctx, up, *_ = build_context(store)
    with pytest.raises(OrchestratorError) as exc:
        resolve_reference(RefExplicit(up.id), ctx, Modality.IMAGE, store)
    assert exc.value.code == ErrorCode.BAD_RESOURCE_FORMAT


def test_pending_uploads_rank_newest(tmp_path):
    store = ResourceStore(tmp_path)
    ctx, _, out_a, _ = build_context(store)
    pending = [store.store_resource(wav_bytes("pending"), "p.wav", Origin.upload(4))]
    got = resolve_reference(RefLatest(), ctx, Modality.AUDIO, store, pending_uploads=pending)
    assert got.id == pending[0].id


# --- append-only context -------------------------------------------------------

def test_append_turn_contiguity():
    ctx = Context("s")
    append_turn(ctx, Turn(index=1, query=Query("a")))
    append_turn(ctx, Turn(index=2, query=Query("b")))
    with pytest.raises(ValueError):
        append_turn(ctx, Turn(index=4, query=Query("gap")))
    assert len(ctx.turns) == 2


# --- journal ---------------------------------------------------------------------

def test_journal_round_trip(tmp_path):
    path = tmp_path / "s.jsonl"
    ctx = Context("s")
    t1 = Turn(index=1, query=Query("say 'x'"), outputs=["abc"], response_text="done")
    t2 = Turn(index=2, query=Query("chat"), response_text="hi")
    for t in (t1, t2):
        append_turn(ctx, t)
        journal_append(path, t)
    loaded = journal_load(path, "s")
    assert [t.to_dict() for t in loaded.turns] == [t.to_dict() for t in ctx.turns]


def test_journal_stops_at_corrupt_line(tmp_path):
    path = tmp_path / "s.jsonl"
    journal_append(path, Turn(index=1, query=Query("a"), response_text="ok"))
    journal_append(path, Turn(index=2, query=Query("b"), response_text="ok"))
    with open(path, "a") as f:
        f.write('{"index": 3, "query": {"description"')  # truncated write
    loaded = journal_load(path, "s")
    assert len(loaded.turns) == 2


def test_journal_every_byte_prefix_restores(tmp_path):
    path = tmp_path / "s.jsonl"
    for i in range(1, 4):
        journal_append(path, Turn(index=i, query=Query(f"q{i}"), response_text="ok"))
    raw = path.read_bytes()
    for cut in range(len(raw) + 1):
        prefix_path = tmp_path / "prefix.jsonl"
        prefix_path.write_bytes(raw[:cut])
        loaded = journal_load(prefix_path, "s")
        # a valid context: contiguous prefix of the original
        assert [t.index for t in loaded.turns] == list(range(1, len(loaded.turns) + 1))
        for t in loaded.turns:
            assert t.query.description == f"q{t.index}"


def test_turn_serialization_includes_error_and_args():
    from audiohub.analysis import StructuredArguments, TaskKind
    from audiohub.core import ErrorReport

    turn = Turn(
        index=1,
        query=Query("transcribe it"),
        args=StructuredArguments(tool_id="asr-stub", task=TaskKind.SPEECH_RECOGNITION, inputs=["latest"]),
        error=ErrorReport(ErrorCode.MISSING_RESOURCE, "no audio", "upload one"),
    )
    restored = Turn.from_dict(json.loads(json.dumps(turn.to_dict())))
    assert restored.args.tool_id == "asr-stub"
    assert restored.error.code == ErrorCode.MISSING_RESOURCE
    assert restored.error.suggestion == "upload one"
