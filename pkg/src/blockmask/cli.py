"""Command-line interface: one binary, one subcommand per workflow.

Exit codes: 0 success, 1 domain error (machine-readable JSON on stderr),
2 usage error. Global options resolve in layers: config file < environment
(BLOCKMASK_*) < flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .annotation.clients import MockClient, EndpointConfig, OpenAICompatClient
from .annotation.pipeline import (
    PipelineClients,
    PipelineParams,
    corpus_stats,
    run_corpus,
)
from .evalstats import RunMatrix, summary_report
from .kv_metrics import aggregate, replay, report as kv_report, write_kv_trace_csv
from .segmentation import BoundaryScores, objective, optimize, split_sentences
from .serving import Mode, PoolConfig, Request, Workload, export_sawtooth, run as run_sim
from .trace import (
    BlockMaskingConfig,
    MarkerVocabulary,
    ModelShape,
    SHAPE_PRESETS,
    flatten,
    read_trace_file,
)

ENV_PREFIX = "BLOCKMASK_"


class CliError(Exception):
    pass


@dataclass
class GlobalConfig:
    verbosity: int = 0
    output_dir: str = "."
    seed: int = 0
    config_file: str | None = None

    def as_dict(self) -> dict:
        return {
            "verbosity": self.verbosity,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "config_file": self.config_file,
        }


def resolve_config(args: argparse.Namespace) -> GlobalConfig:
    """Layered resolution: file < env < flags."""
    cfg = GlobalConfig()
    path = args.config or os.environ.get(ENV_PREFIX + "CONFIG")
    if path:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg.verbosity = int(data.get("verbosity", cfg.verbosity))
        cfg.output_dir = str(data.get("output_dir", cfg.output_dir))
        cfg.seed = int(data.get("seed", cfg.seed))
        cfg.config_file = path
    if ENV_PREFIX + "VERBOSITY" in os.environ:
        cfg.verbosity = int(os.environ[ENV_PREFIX + "VERBOSITY"])
    if ENV_PREFIX + "OUTPUT_DIR" in os.environ:
        cfg.output_dir = os.environ[ENV_PREFIX + "OUTPUT_DIR"]
    if ENV_PREFIX + "SEED" in os.environ:
        cfg.seed = int(os.environ[ENV_PREFIX + "SEED"])
    if args.verbose:
        cfg.verbosity = args.verbose
    if args.out_dir is not None:
        cfg.output_dir = args.out_dir
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def parse_shape(text: str) -> ModelShape:
    """Named preset (qwen3-8b, qwen3-32b, phi4) or 'layers,kv_heads,head_dim,bytes'."""
    key = text.strip().lower()
    if key in SHAPE_PRESETS:
        return SHAPE_PRESETS[key]
    parts = [p for p in key.replace("/", ",").split(",") if p]
    if len(parts) != 4:
        raise CliError(
            f"unknown shape {text!r}: use a preset ({', '.join(SHAPE_PRESETS)}) "
            "or an explicit 'layers,kv_heads,head_dim,bytes_per_elem'"
        )
    return ModelShape(*(int(p) for p in parts))


def _load_vocab(path: str | None) -> MarkerVocabulary:
    return MarkerVocabulary.from_file(path) if path else MarkerVocabulary()


def cmd_split(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    text = Path(args.input).read_text(encoding="utf-8") if args.input != "-" else sys.stdin.read()
    sentences = split_sentences(text)
    out = sys.stdout if args.output is None else open(args.output, "w", encoding="utf-8")
    try:
        for s in sentences:
            out.write(
                json.dumps(
                    {"text": s.text, "tokens": s.token_count, "atomic": s.atomic, "span": list(s.span)},
                    ensure_ascii=False,
                )
                + "\n"
            )
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_segment(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    lengths: list[int] = []
    scores: list[float] = []
    with open(args.input, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            lengths.append(int(row["tokens"]))
            scores.append(float(row.get("score_after", 0.0)))
    if not lengths:
        raise CliError("no sentences in input")
    boundary_scores = BoundaryScores(tuple(scores[:-1]))
    partition = optimize(
        lengths,
        boundary_scores,
        min_block_tokens=args.min_block_tokens,
        lam=args.lam,
        exact_threshold=args.exact_threshold,
    )
    result = {
        "cuts": list(partition.cut_indices),
        "lengths": list(partition.block_lengths),
        "objective": objective(partition, boundary_scores, args.lam),
        "fallback": partition.fallback,
    }
    print(json.dumps(result))
    return 0


def cmd_annotate(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    out_dir = Path(args.output or cfg.output_dir)
    if args.mock:
        client = MockClient.from_file(args.mock)
        clients = PipelineClients.single(client)
    else:
        if not args.base_url:
            raise CliError("--base-url is required without --mock")
        out_dir.mkdir(parents=True, exist_ok=True)
        endpoint = EndpointConfig(
            base_url=args.base_url,
            model=args.scorer_model,
            api_key_env=args.api_key_env,
            max_in_flight=args.concurrency,
            audit_path=out_dir / "audit.jsonl",
        )
        clients = PipelineClients.single(OpenAICompatClient(endpoint))
    params = PipelineParams(
        window=args.window,
        overlap=args.overlap,
        tau=args.tau,
        max_rounds=args.max_rounds,
        min_block_tokens=args.min_block_tokens,
        concurrency=args.concurrency,
    )
    summary = run_corpus(args.input, out_dir, clients, params)
    print(json.dumps({"n_traces": summary["n_traces"], "n_errors": summary["n_errors"]}))
    return 0


def cmd_replay_kv(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    shape = parse_shape(args.shape)
    vocab = _load_vocab(args.vocab)
    config = BlockMaskingConfig(
        keep_last_n_blocks=args.keep,
        mask_delimiters=args.mask_delimiters,
        block_token_cap=args.block_cap,
    )
    out_dir = Path(args.out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    reports = []
    labels = []
    for trace in read_trace_file(args.traces, vocab):
        tokens = flatten(trace, vocab)
        occ = replay(tokens, config, shape, prompt_len=len(trace.prompt_tokens), vocab=vocab)
        rep = kv_report(occ)
        reports.append(rep)
        labels.append(trace.metadata.get("domain", "all") or "all")
        write_kv_trace_csv(occ, out_dir / f"kv_trace_{trace.problem_id}.csv")
    if not reports:
        raise CliError("no traces in input")
    rows = aggregate(reports, labels, baseline_label=args.baseline)
    (out_dir / "kv_report.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    with open(out_dir / "kv_report.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps(rows))
    return 0


def cmd_serve_sim(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    spec = json.loads(Path(args.workload).read_text(encoding="utf-8"))
    vocab = _load_vocab(spec.get("vocab"))
    shape = parse_shape(spec["shape"]) if isinstance(spec["shape"], str) else ModelShape(**spec["shape"])
    config = BlockMaskingConfig(**spec.get("masking", {"keep_last_n_blocks": 0}))
    requests = []
    base = Path(args.workload).parent
    for i, entry in enumerate(spec["requests"]):
        trace_path = Path(entry["trace_file"])
        if not trace_path.is_absolute():
            trace_path = base / trace_path
        records = list(read_trace_file(trace_path, vocab))
        record = records[entry.get("record", 0)]
        tokens = flatten(record, vocab)
        requests.append(
            Request(
                request_id=entry.get("id", f"req{i}"),
                tokens=tokens,
                prompt_len=len(record.prompt_tokens),
                arrival_step=int(entry.get("arrival", 0)),
            )
        )
    workload = Workload(
        requests=requests,
        config=config,
        shape=shape,
        prefill_chunk=int(spec.get("prefill_chunk", 512)),
        vocab=vocab,
    )
    pool = PoolConfig(total_pages=spec["pool"]["pages"], page_size=spec["pool"]["page_size"])
    mode = args.mode or spec.get("mode", "memento")
    report = run_sim(workload, pool, Mode(mode))
    out_dir = Path(args.out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sim_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    for rid in report.occupancy:
        export_sawtooth(report, rid, out_dir / f"kv_trace_{rid}.csv")
    print(json.dumps({"total_engine_steps": report.total_engine_steps}))
    return 0


def cmd_evalstats(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    matrix = RunMatrix.from_jsonl(args.runs)
    compare = RunMatrix.from_jsonl(args.compare) if args.compare else None
    maj_ks = [int(k) for k in args.maj_k.split(",") if k] if args.maj_k else []
    result = summary_report(matrix, maj_ks=maj_ks, seed=args.seed or cfg.seed, compare=compare)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_stats(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    stats = json.loads(Path(args.stats).read_text(encoding="utf-8"))
    report = corpus_stats(stats["per_trace"])
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_config_show(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    print(json.dumps(cfg.as_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockmask", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--out-dir", default=None, help="default output directory")
    parser.add_argument("--seed", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split text into sentences")
    p.add_argument("--input", required=True, help="text file or - for stdin")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("segment", help="optimize block boundaries over scored sentences")
    p.add_argument("--input", required=True, help="sentence JSONL with tokens/score_after")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--min-block-tokens", type=int, default=200)
    p.add_argument("--exact-threshold", type=int, default=200)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("annotate", help="run the annotation pipeline over a corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--mock", default=None, help="scripted mock responses JSONL (offline)")
    p.add_argument("--base-url", default=None)
    p.add_argument("--scorer-model", default="gpt-judge")
    p.add_argument("--api-key-env", default="OPENAI_API_KEY")
    p.add_argument("--window", type=int, default=12)
    p.add_argument("--overlap", type=int, default=2)
    p.add_argument("--tau", type=float, default=8.0)
    p.add_argument("--max-rounds", type=int, default=2)
    p.add_argument("--min-block-tokens", type=int, default=200)
    p.add_argument("--concurrency", type=int, default=1)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("replay-kv", help="replay traces into KV occupancy metrics")
    p.add_argument("--traces", required=True)
    p.add_argument("--vocab", default=None, help="marker vocabulary sidecar JSON")
    p.add_argument("--shape", required=True)
    p.add_argument("--keep", type=int, default=0)
    p.add_argument("--mask-delimiters", action="store_true")
    p.add_argument("--block-cap", type=int, default=None)
    p.add_argument("--baseline", default=None, help="group name for ratio columns")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_replay_kv)

    p = sub.add_parser("serve-sim", help="simulate multi-request serving over a KV pool")
    p.add_argument("--workload", required=True)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=None,
                   help="defaults to the workload file's mode, else memento")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_serve_sim)

    p = sub.add_parser("evalstats", help="pass@k, maj@k and solved-set overlap")
    p.add_argument("--runs", required=True)
    p.add_argument("--compare", default=None)
    p.add_argument("--maj-k", default=None, help="comma-separated k values")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_evalstats)

    p = sub.add_parser("stats", help="corpus distribution report from a stats.json")
    p.add_argument("--stats", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("config", help="configuration")
    config_sub = p.add_subparsers(dest="config_command", required=True)
    pc = config_sub.add_parser("show", help="print the effective configuration")
    pc.set_defaults(func=cmd_config_show)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except Exception as e:
        payload = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
