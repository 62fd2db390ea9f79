"""Command-line driver: trace -> similarity -> group, plus analyses.

Exit codes: 0 ok, 2 config, 3 trace/similarity input, 4 grouping
infeasible, 5 label mismatch, 6 corpus.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from gradgroup import analysis, grouping, similarity, trainer
from gradgroup.errors import (
    ConfigError,
    EmptyCorpus,
    GradGroupError,
    GroupingError,
    LabelMismatch,
    TraceError,
    ZeroVariance,
)

EXIT_OK, EXIT_CONFIG, EXIT_TRACE, EXIT_GROUPING, EXIT_LABELS, EXIT_CORPUS = 0, 2, 3, 4, 5, 6


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _exit_code(err: GradGroupError) -> int:
    if isinstance(err, LabelMismatch):
        return EXIT_LABELS
    if isinstance(err, EmptyCorpus):
        return EXIT_CORPUS
    if isinstance(err, GroupingError):
        return EXIT_GROUPING
    if isinstance(err, (TraceError, ZeroVariance)):
        return EXIT_TRACE
    return EXIT_CONFIG


def _need_file(path, code):
    if not Path(path).is_file():
        raise CommandError(f"no such file: {path}", code)


def _need_out(path):
    if path is not None and path != "-" and not Path(path).resolve().parent.is_dir():
        raise CommandError(f"output directory does not exist: {Path(path).parent}", EXIT_CONFIG)


def _emit(text: str, path):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _read_matrix(path):
    _need_file(path, EXIT_TRACE)
    return similarity.read_matrix(path)


# -- commands ---------------------------------------------------------------

def cmd_trace(args):
    _need_file(args.config, EXIT_CONFIG)
    _need_out(args.output)
    _need_out(args.planted_out)
    cfg, specs, concept_seed = trainer.load_config(args.config)
    datasets = trainer.generate_synthetic_tasks(specs, concept_seed=concept_seed)
    result = trainer.train_and_capture(datasets, cfg)
    similarity.write_traces(args.output, result.traces)
    if args.planted_out:
        similarity.write_matrix(args.planted_out, trainer.planted_similarity(datasets))
    for epoch, losses in enumerate(result.epoch_losses):
        per_task = " ".join(f"{t}={v:.4f}" for t, v in losses.items())
        mean = sum(losses.values()) / len(losses)
        print(f"epoch {epoch}: mean loss {mean:.4f} ({per_task})")
    print(f"wrote {len(result.traces)} trace records")


def cmd_similarity(args):
    _need_file(args.traces, EXIT_TRACE)
    _need_out(args.output)
    traces = similarity.read_traces(args.traces)
    tasks = list(dict.fromkeys(t.task for t in traces))
    layers = sorted({t.layer for t in traces})
    if args.layer not in layers:
        raise CommandError(f"layer {args.layer!r} not in trace file (available: {', '.join(layers)})",
                           EXIT_TRACE)
    try:
        common, dropped = similarity.common_epochs(traces, args.layer, tasks)
    except GradGroupError as e:
        raise CommandError(str(e), EXIT_TRACE) from None
    if not common:
        listing = "; ".join(
            f"{t}: {sorted({tr.epoch for tr in traces if tr.task == t and tr.layer == args.layer})}"
            for t in tasks)
        raise CommandError(f"no epoch is shared by all tasks at layer {args.layer!r} ({listing})",
                           EXIT_TRACE)
    if dropped:
        listing = "; ".join(f"{t}: {eps}" for t, eps in dropped.items())
        if args.strict:
            raise CommandError(f"epochs missing for some tasks ({listing})", EXIT_TRACE)
        print(f"warning: dropped epochs not recorded for every task ({listing})", file=sys.stderr)
    S = similarity.epoch_similarity_average(traces, args.layer, tasks)
    _emit(json.dumps(S.to_json(), allow_nan=False) + "\n", args.output)


def _search_config(args, k):
    return grouping.SearchConfig(k, args.max_group_size, args.mode, args.workers)


def cmd_group(args):
    _need_out(args.output)
    S = _read_matrix(args.similarity)
    if args.k > len(S):
        raise CommandError(f"k={args.k} exceeds the number of tasks ({len(S)})", EXIT_GROUPING)
    result = grouping.find_best_grouping(S, _search_config(args, args.k))
    _emit(_dump(result.to_json()), args.output)


def cmd_sweep_k(args):
    _need_out(args.output)
    S = _read_matrix(args.similarity)
    k_max = len(S) if args.k_max is None else args.k_max
    if not 1 <= args.k_min <= k_max <= len(S):
        raise CommandError(f"k range [{args.k_min}, {k_max}] must lie within [1, {len(S)}]", EXIT_CONFIG)
    rows = grouping.sweep_k(S, range(args.k_min, k_max + 1), args.mode,
                            args.max_group_size, args.workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "overall_score"])
    for k, score in rows:
        w.writerow([k, repr(score)])
    _emit(buf.getvalue(), args.output)


def cmd_correlate(args):
    _need_out(args.csv)
    A = _read_matrix(args.a)
    B = _read_matrix(args.b)
    r = analysis.correlate_measures(A, B)
    print(repr(r))
    if args.csv:
        name_a = args.name_a or Path(args.a).stem
        name_b = args.name_b or Path(args.b).stem
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["measure_a", "measure_b", "r"])
        w.writerow([name_a, name_b, repr(r)])
        _emit(buf.getvalue(), args.csv)


def cmd_keywords(args):
    _need_out(args.output)
    if not Path(args.corpus).is_dir():
        raise CommandError(f"corpus directory does not exist: {args.corpus}", EXIT_CORPUS)
    stop = set()
    if args.stopwords:
        _need_file(args.stopwords, EXIT_CORPUS)
        stop = analysis.read_stopwords(args.stopwords)
    docs = analysis.read_corpus_dir(args.corpus)
    keywords = analysis.tfidf_keywords(docs, args.top_k, stop)
    _emit(json.dumps(keywords, indent=2, ensure_ascii=False) + "\n", args.output)


def cmd_assign(args):
    _need_out(args.output)
    _need_file(args.grouping, EXIT_GROUPING)
    S = _read_matrix(args.similarity)
    try:
        with open(args.grouping, encoding="utf-8") as fh:
            obj = json.load(fh)
        groups = obj["groups"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CommandError(f"{args.grouping}: not a grouping file ({e})", EXIT_GROUPING) from None
    members = {t for g in groups for t in g}
    if not members <= set(S.labels):
        raise CommandError(f"grouping names tasks missing from the matrix: "
                           f"{sorted(members - set(S.labels))}", EXIT_LABELS)
    result = grouping.evaluate_grouping(grouping.Grouping(tuple(map(tuple, groups)), S.labels), S)
    _emit(_dump(result.to_json()), args.output)


# -- parser -----------------------------------------------------------------

TRACE_HELP = """\
Train the small multi-task model and write gradient traces.

Config file (JSON; unknown keys are rejected):
  {"concept_seed": 0,
   "train": {"epochs": 20, "batch_size": 32, "learning_rate": 0.5,
             "hidden_dim": 16, "seed": 0, "sample_fraction": 1.0},
   "tasks": [{"task": "a", "cluster_id": 0, "n_train": 500, "input_dim": 10,
              "n_classes": 3, "noise_sigma": 0.1, "seed": 1}, ...]}

Trace file (JSON Lines), one record per (task, epoch, layer):
  {"task": str, "epoch": int, "layer": "encoder"|"classifier", "vector": [float, ...]}
"""

MATRIX_HELP = """\
Similarity matrix file (JSON):
  {"labels": [str, ...], "kind": "gradient-cosine"|"negated-distance"|"raw",
   "values": [[float, ...], ...]}
"""

GROUP_HELP = MATRIX_HELP + """
Grouping file (JSON):
  {"k": int, "groups": [[str, ...], ...], "overall_score": float,
   "per_task_collective": {task: float}, "assignment": {task: group index}}
"""


def _add_search_args(p):
    p.add_argument("--mode", choices=grouping.MODES, default="branch-and-bound")
    p.add_argument("--max-group-size", type=int, default=None,
                   help="largest group considered (default: no cap)")
    p.add_argument("--workers", type=int, default=1,
                   help="processes for the branch-and-bound search (result is identical)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradgroup",
        description="Group tasks by gradient similarity.",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    raw = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("trace", help="train on a synthetic config and write gradient traces",
                       description=TRACE_HELP, formatter_class=raw)
    p.add_argument("config")
    p.add_argument("-o", "--output", required=True, help="trace file (JSONL)")
    p.add_argument("--planted-out", help="also write the planted-cluster indicator matrix here")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("similarity", help="average per-epoch gradient cosines into a matrix",
                       description=MATRIX_HELP, formatter_class=raw)
    p.add_argument("traces")
    p.add_argument("--layer", default="classifier")
    p.add_argument("--strict", action="store_true",
                   help="fail instead of dropping epochs missing for some task")
    p.add_argument("-o", "--output", help="matrix file (default: stdout)")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("group", help="find the best K groups",
                       description=GROUP_HELP, formatter_class=raw)
    p.add_argument("similarity")
    p.add_argument("-k", type=int, required=True)
    _add_search_args(p)
    p.add_argument("-o", "--output", help="grouping file (default: stdout)")
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("sweep-k", help="best overall score for a range of K (CSV: k,overall_score)",
                       description=MATRIX_HELP, formatter_class=raw)
    p.add_argument("similarity")
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=None, help="default: number of tasks")
    _add_search_args(p)
    p.add_argument("-o", "--output", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("correlate", help="Pearson r between two matrices' off-diagonal entries",
                       description=MATRIX_HELP + "\nCSV: measure_a,measure_b,r\n", formatter_class=raw)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--csv", help="also write a CSV row here")
    p.add_argument("--name-a")
    p.add_argument("--name-b")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("keywords", help="top TF-IDF keywords per task",
                       description="Corpus: a directory with one <task>.txt file per task.\n"
                                   "Stopwords: one token per line.\n"
                                   "Output (JSON): {task: [keyword, ...]}",
                       formatter_class=raw)
    p.add_argument("corpus")
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--stopwords")
    p.add_argument("-o", "--output", help="keywords file (default: stdout)")
    p.set_defaults(func=cmd_keywords)

    p = sub.add_parser("assign", help="recompute scores and inference groups for a grouping file",
                       description=GROUP_HELP, formatter_class=raw)
    p.add_argument("grouping")
    p.add_argument("similarity")
    p.add_argument("-o", "--output", help="grouping file (default: stdout)")
    p.set_defaults(func=cmd_assign)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CommandError as e:
        print(f"gradgroup {args.command}: error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"gradgroup {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except GradGroupError as e:
        print(f"gradgroup {args.command}: error: {e}", file=sys.stderr)
        return _exit_code(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
