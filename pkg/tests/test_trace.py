import json
import random

import pytest

from blockmask.trace import (
    AnnotatedTrace,
    MarkerKind,
    MarkerVocabulary,
    Segment,
    TraceParseError,
    TraceStructureError,
    TraceToken,
    flatten,
    parse_trace_record,
    serialize_trace_record,
)

from conftest import make_annotated_trace, plain


def test_marker_surfaces_fixed():
    assert MarkerKind.BLOCK_START.surface == "<|block_start|>"
    assert MarkerKind.BLOCK_END.surface == "<|block_end|>"
    assert MarkerKind.SUMMARY_START.surface == "<|summary_start|>"
    assert MarkerKind.SUMMARY_END.surface == "<|summary_end|>"
    assert len({k.surface for k in MarkerKind}) == 4


def test_parse_minimal_record():
    line = json.dumps(
        {
            "problem_id": "p1",
            "prompt": [10, 11],
            "segments": [{"block": [20, 21, 22], "summary": [30]}],
            "answer": [40],
            "meta": {"domain": "math"},
        }
    )
    trace = parse_trace_record(line)
    assert len(trace.segments) == 1
    assert len(trace.segments[0].block_tokens) == 3
    assert len(trace.segments[0].memento_tokens) == 1
    assert trace.metadata["domain"] == "math"


def test_parse_zero_segments_is_legal():
    line = json.dumps({"problem_id": "p", "prompt": [1], "segments": [], "answer": [2]})
    trace = parse_trace_record(line)
    assert trace.segments == ()


def test_segment_missing_summary_is_structure_error():
    line = json.dumps(
        {"problem_id": "p", "prompt": [1], "segments": [{"block": [5]}], "answer": []}
    )
    with pytest.raises(TraceStructureError, match="summary"):
        parse_trace_record(line)


def test_parse_error_names_field():
    with pytest.raises(TraceParseError, match="prompt"):
        parse_trace_record(json.dumps({"problem_id": "p", "segments": [], "answer": []}))
    with pytest.raises(TraceParseError, match="answer"):
        parse_trace_record(
            json.dumps({"problem_id": "p", "prompt": [], "segments": [], "answer": ["x"]})
        )


def test_marker_inside_interior_rejected_with_vocab(vocab):
    bad = json.dumps(
        {
            "problem_id": "p",
            "prompt": [10],
            "segments": [{"block": [vocab.id_of(MarkerKind.SUMMARY_END)], "summary": [11]}],
            "answer": [],
        }
    )
    with pytest.raises(TraceStructureError):
        parse_trace_record(bad, vocab)
    # without a vocabulary the ids are opaque and pass
    parse_trace_record(bad)


def test_round_trip_preserves_unknown_fields():
    line = json.dumps(
        {
            "problem_id": "p",
            "prompt": [1],
            "segments": [],
            "answer": [],
            "meta": {},
            "custom_field": {"a": [1, 2]},
        }
    )
    trace = parse_trace_record(line)
    again = parse_trace_record(serialize_trace_record(trace))
    assert again.extra == {"custom_field": {"a": [1, 2]}}


@pytest.mark.parametrize("seed", range(30))
def test_round_trip_random_traces(seed):
    trace = make_annotated_trace(random.Random(seed))
    again = parse_trace_record(serialize_trace_record(trace))
    assert again.problem_id == trace.problem_id
    assert [t.id for t in again.prompt_tokens] == [t.id for t in trace.prompt_tokens]
    assert len(again.segments) == len(trace.segments)
    for s1, s2 in zip(again.segments, trace.segments):
        assert [t.id for t in s1.block_tokens] == [t.id for t in s2.block_tokens]
        assert [t.id for t in s1.memento_tokens] == [t.id for t in s2.memento_tokens]
    assert [t.id for t in again.answer_tokens] == [t.id for t in trace.answer_tokens]
    assert again.metadata == trace.metadata


def test_streamed_equals_whole_file_parse(tmp_path):
    rng = random.Random(7)
    lines = [
        serialize_trace_record(make_annotated_trace(rng, problem_id=f"p{i}"))
        for i in range(1000)
    ]
    path = tmp_path / "corpus.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    whole = [parse_trace_record(l) for l in path.read_text().splitlines() if l]
    streamed = []
    with open(path) as f:
        for line in f:
            if line.strip():
                streamed.append(parse_trace_record(line))
    assert len(whole) == len(streamed) == 1000
    for a, b in zip(whole, streamed):
        assert serialize_trace_record(a) == serialize_trace_record(b)


def test_flatten_fixed_lengths(vocab):
    trace = AnnotatedTrace(
        problem_id="p",
        prompt_tokens=tuple(plain(10)),
        segments=(Segment(tuple(plain(20)), tuple(plain(5))),),
        answer_tokens=tuple(plain(3)),
    )
    flat = flatten(trace, vocab)
    assert len(flat) == 42  # 10 + 20 + 5 + 3 + 4 markers

    empty = AnnotatedTrace("p", tuple(plain(2)), (), tuple(plain(1)))
    assert len(flatten(empty, vocab)) == 3


@pytest.mark.parametrize("seed", range(50))
def test_flatten_length_formula(seed, vocab):
    trace = make_annotated_trace(random.Random(1000 + seed))
    flat = flatten(trace, vocab)
    assert len(flat) == trace.flat_length()
    for kind in MarkerKind:
        count = sum(1 for t in flat if t.marker is kind)
        assert count == len(trace.segments)


def test_flatten_marker_order(vocab):
    trace = AnnotatedTrace(
        "p", tuple(plain(1)), (Segment(tuple(plain(2)), tuple(plain(1))),), ()
    )
    kinds = [t.marker for t in flatten(trace, vocab)]
    assert kinds == [
        None,
        MarkerKind.BLOCK_START,
        None,
        None,
        MarkerKind.BLOCK_END,
        MarkerKind.SUMMARY_START,
        None,
        MarkerKind.SUMMARY_END,
    ]


def test_interior_markers_rejected_at_construction(vocab):
    with pytest.raises(TraceStructureError):
        Segment((vocab.token(MarkerKind.BLOCK_START),), ())


def test_vocabulary_sidecar_round_trip(tmp_path):
    vocab = MarkerVocabulary(
        {
            MarkerKind.BLOCK_START: 151665,
            MarkerKind.BLOCK_END: 151666,
            MarkerKind.SUMMARY_START: 151667,
            MarkerKind.SUMMARY_END: 151668,
        }
    )
    path = tmp_path / "vocab.json"
    vocab.to_file(path)
    again = MarkerVocabulary.from_file(path)
    for kind in MarkerKind:
        assert again.id_of(kind) == vocab.id_of(kind)
    assert again.classify(151668) is MarkerKind.SUMMARY_END
    assert again.classify(42) is None


def test_vocabulary_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        MarkerVocabulary({k: 7 for k in MarkerKind})


def test_masking_forbids_prefix_caching():
    from blockmask.trace import BlockMaskingConfig

    with pytest.raises(ValueError, match="prefix_caching"):
        BlockMaskingConfig(keep_last_n_blocks=0, prefix_caching_enabled=True)
    BlockMaskingConfig(keep_last_n_blocks=-1, prefix_caching_enabled=True)
    with pytest.raises(ValueError):
        BlockMaskingConfig(keep_last_n_blocks=-2)
    with pytest.raises(ValueError):
        BlockMaskingConfig(block_token_cap=0)


def test_model_shape_requires_positive_fields():
    from blockmask.trace import ModelShape

    with pytest.raises(ValueError):
        ModelShape(0, 8, 128, 2)
    with pytest.raises(ValueError):
        ModelShape(36, 8, 128, 0)
