import json
import random

import pytest

from blockmask.cli import main, parse_shape
from blockmask.trace import ModelShape, serialize_trace_record

from conftest import make_annotated_trace


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestShapeParsing:
    def test_presets(self):
        assert parse_shape("qwen3-8b") == ModelShape(36, 8, 128, 2)
        assert parse_shape("qwen3-32b") == ModelShape(64, 8, 128, 2)
        assert parse_shape("phi4") == ModelShape(40, 10, 128, 2)

    def test_explicit_quadruple(self):
        assert parse_shape("12,4,64,2") == ModelShape(12, 4, 64, 2)

    def test_unknown_is_error(self):
        with pytest.raises(Exception):
            parse_shape("llama-70b")


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0


def test_unknown_subcommand_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_config_show_layering(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "output_dir": "/from-file"}))
    monkeypatch.setenv("BLOCKMASK_OUTPUT_DIR", "/from-env")
    code, out, _ = run_cli(
        capsys, "--config", str(cfg), "--seed", "9", "config", "show"
    )
    assert code == 0
    shown = json.loads(out)
    assert shown["seed"] == 9  # flag wins
    assert shown["output_dir"] == "/from-env"  # env beats file


def test_split_and_segment_pipeline(capsys, tmp_path):
    text = tmp_path / "doc.txt"
    text.write_text(
        "First we set up the problem and define every quantity we will need. "
        "Then we work out the main calculation in full detail, step by step. "
        "Finally we check the result against the sample case and conclude."
    )
    sents = tmp_path / "sents.jsonl"
    code, out, _ = run_cli(capsys, "split", "--input", str(text), "--output", str(sents))
    assert code == 0
    rows = [json.loads(l) for l in sents.read_text().splitlines()]
    assert len(rows) == 3
    assert all({"text", "tokens", "atomic", "span"} <= set(r) for r in rows)

    for row in rows:
        row["score_after"] = 3.0
    sents.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    code, out, _ = run_cli(
        capsys, "segment", "--input", str(sents), "--lambda", "0.5",
        "--min-block-tokens", "10",
    )
    assert code == 0
    result = json.loads(out)
    assert set(result) == {"cuts", "lengths", "objective", "fallback"}
    assert sum(result["lengths"]) == sum(r["tokens"] for r in rows)


def test_replay_kv_smoke(capsys, tmp_path):
    rng = random.Random(0)
    traces = tmp_path / "t.jsonl"
    with open(traces, "w") as f:
        for i in range(3):
            f.write(serialize_trace_record(make_annotated_trace(rng, problem_id=f"p{i}")) + "\n")
    out_dir = tmp_path / "out"
    code, out, _ = run_cli(
        capsys, "replay-kv", "--traces", str(traces), "--shape", "qwen3-8b",
        "--keep", "0", "--out", str(out_dir),
    )
    assert code == 0
    assert (out_dir / "kv_report.json").exists()
    assert (out_dir / "kv_trace_p0.csv").exists()
    rows = json.loads(out)
    assert rows and "mean_peak_gb" in rows[0]


def test_replay_kv_missing_file_gives_error_json(capsys, tmp_path):
    code, out, err = run_cli(
        capsys, "replay-kv", "--traces", str(tmp_path / "nope.jsonl"), "--shape", "qwen3-8b"
    )
    assert code == 1
    payload = json.loads(err)
    assert payload["error"]
    assert "message" in payload


def test_serve_sim_smoke(capsys, tmp_path):
    rng = random.Random(1)
    trace = make_annotated_trace(rng, problem_id="p0", max_segments=3)
    while not trace.segments:
        trace = make_annotated_trace(rng, problem_id="p0", max_segments=3)
    trace_file = tmp_path / "t.jsonl"
    trace_file.write_text(serialize_trace_record(trace) + "\n")
    workload = {
        "pool": {"pages": 4000, "page_size": 4},
        "shape": "1,1,1,1",
        "masking": {"keep_last_n_blocks": 0},
        "requests": [
            {"trace_file": "t.jsonl", "arrival": 0, "id": "a"},
            {"trace_file": "t.jsonl", "arrival": 2, "id": "b"},
        ],
    }
    wpath = tmp_path / "w.json"
    wpath.write_text(json.dumps(workload))
    out_dir = tmp_path / "sim"
    code, out, _ = run_cli(
        capsys, "serve-sim", "--workload", str(wpath), "--mode", "memento",
        "--out", str(out_dir),
    )
    assert code == 0
    report = json.loads((out_dir / "sim_report.json").read_text())
    assert report["mode"] == "memento"
    assert set(report["requests"]) == {"a", "b"}
    assert (out_dir / "kv_trace_a.csv").exists()


def test_annotate_mock_offline(capsys, tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    text = (
        "We define the key variables and constraints for this problem now. "
        "Then we derive the main recurrence and solve it completely here. "
        "Finally we verify the answer on the given example and conclude."
    )
    corpus.write_text(
        json.dumps(
            {"problem_id": "p0", "problem": "prob", "cot": text, "answer": "42", "domain": "math"}
        )
        + "\n"
    )
    script = tmp_path / "mock.jsonl"
    rows = [
        {"stage": "score", "trace_id": "p0", "call_index": 0, "response_text": json.dumps({"scores": [3, 3]})},
        {"stage": "compress", "trace_id": "p0", "call_index": 0, "response_text": "m0 a b"},
        {"stage": "judge", "trace_id": "p0", "call_index": 0, "response_text": json.dumps({"score": 9})},
        {"stage": "compress", "trace_id": "p0", "call_index": 1, "response_text": "m1 c d"},
        {"stage": "judge", "trace_id": "p0", "call_index": 1, "response_text": json.dumps({"score": 9})},
        {"stage": "compress", "trace_id": "p0", "call_index": 2, "response_text": "m2 e f"},
        {"stage": "judge", "trace_id": "p0", "call_index": 2, "response_text": json.dumps({"score": 9})},
    ]
    script.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    out_dir = tmp_path / "anno"
    code, out, _ = run_cli(
        capsys, "annotate", "--input", str(corpus), "--output", str(out_dir),
        "--mock", str(script), "--min-block-tokens", "8",
    )
    assert code == 0
    assert json.loads(out)["n_traces"] == 1
    assert (out_dir / "traces.jsonl").exists()
    stats = json.loads((out_dir / "stats.json").read_text())
    assert stats["n_traces"] == 1

    code, out, _ = run_cli(capsys, "stats", "--stats", str(out_dir / "stats.json"))
    assert code == 0
    assert "median_blocks_per_sample" in json.loads(out)["all"]


def test_evalstats_cli(capsys, tmp_path):
    runs = tmp_path / "runs.jsonl"
    runs.write_text(
        "\n".join(
            json.dumps(
                {
                    "problem_id": f"p{i}",
                    "generations": [
                        {"answer": "7", "correct": i % 2 == 0},
                        {"answer": "7", "correct": i % 2 == 0},
                    ],
                }
            )
            for i in range(4)
        )
        + "\n"
    )
    code, out, _ = run_cli(
        capsys, "evalstats", "--runs", str(runs), "--maj-k", "1,2", "--seed", "3"
    )
    assert code == 0
    report = json.loads(out)
    assert report["pass_at_1"] == 50.0
    assert report["maj_at_2"] == 50.0
    code, out, _ = run_cli(
        capsys, "evalstats", "--runs", str(runs), "--compare", str(runs)
    )
    assert json.loads(out)["compare"]["jaccard_solved"] == 1.0
