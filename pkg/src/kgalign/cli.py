"""Command-line entry point: ``kgalign <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 annotator backend error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from typing import Optional, Sequence

from .annotator import Budget, LabelCache, annotate_batch
from .errors import BackendError, ConfigError, DataError
from .kg import functionality_table, load_openea, save_openea
from .matcher import EmbeddingMatcher, confident_pairs, evaluate, evaluate_confident
from .pipeline import VARIANTS, PipelineAborted, RunConfig, ablate, load_config, make_backend, run
from .reasoning import AlignmentState
from .refiner import label_tpr, read_labels, refine, trace_against_truth, write_labels
from .selection import STRATEGIES, score_entities, select_entities
from .synth import synth_pair

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3
_DEFAULTS = RunConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)  # --api-key must not resolve to --api-key-env
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# (flag, RunConfig field, type, help)
_RUN_FLAGS = [
    ("--iterations", "iterations", int, "active-learning iterations n"),
    ("--budget", "budget_fraction", float, "query budget as a fraction of source entities"),
    ("--k", "k", int, "candidates offered per query"),
    ("--delta0", "delta0", float, "seed probability of pseudo-labels"),
    ("--delta1", "delta1", float, "confidence threshold of the refiner"),
    ("--n-lr", "n_lr", int, "refinement iterations"),
    ("--strategy", "strategy", str, f"selection strategy, one of {', '.join(STRATEGIES)}"),
    ("--ur-weight", "ur_weight", str, "edge weight of relational uncertainty: fun or inv-fun"),
    ("--backend", "backend", str, "annotator: oracle, noisy-oracle or llm"),
    ("--p-true", "p_true", float, "accuracy of the noisy oracle"),
    ("--endpoint", "endpoint", str, "chat-completion URL for the llm backend"),
    ("--model", "model", str, "model name sent to the llm backend"),
    ("--api-key-env", "api_key_env", str, "environment variable holding the API key"),
    ("--retries", "retries", int, "transport retries of the llm backend"),
    ("--parallelism", "parallelism", int, "in-flight llm requests"),
    ("--max-tokens", "max_tokens", int, "optional token ceiling"),
    ("--label-cache", "label_cache", str, "tab-separated cache of annotator answers"),
    ("--dim", "embedding_dim", int, "embedding dimension"),
    ("--epochs", "epochs", int, "training epochs"),
    ("--lr", "learning_rate", float, "learning rate"),
    ("--margin", "margin", float, "margin of the ranking loss"),
    ("--negatives", "negatives", int, "negatives per positive and side"),
    ("--rounds", "aggregation_rounds", int, "neighbour aggregation rounds"),
    ("--optimizer", "optimizer", str, "matcher optimizer (adam or sgd)"),
    ("--data", "data", str, "OpenEA directory; a synthetic pair is used when empty"),
    ("--entities", "synth_entities", int, "entities of the synthetic pair"),
    ("--relations", "synth_relations", int, "relations of the synthetic pair"),
    ("--degree", "synth_degree", float, "mean degree of the synthetic pair"),
    ("--dropout", "synth_dropout", float, "edge dropout of the synthetic target graph"),
    ("--noise", "synth_noise", float, "fraction of perturbed target names"),
]


def _add_flags(p: argparse.ArgumentParser, names: Sequence[str]) -> None:
    for flag, fname, ftype, text in _RUN_FLAGS:
        if fname in names:
            default = getattr(_DEFAULTS, fname)
            shown = "none" if default in (None, "") else default
            p.add_argument(flag, dest=fname, type=ftype, default=None, help=f"{text} (default: {shown})")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it (default: none)")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: {_DEFAULTS.seed})")
    p.add_argument("--json", action="store_true", help="print a JSON result as the final line (default: off)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgalign", description="Entity alignment with budgeted noisy annotation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    all_fields = [f for _, f, _, _ in _RUN_FLAGS]

    p = sub.add_parser("run", help="run the full active-learning loop")
    _add_common(p)
    _add_flags(p, all_fields)
    p.add_argument("--no-refiner", action="store_true", help="train on raw labels (default: off)")
    p.add_argument("--report-csv", help="per-iteration report CSV (default: none)")
    p.add_argument("--report-json", help="JSON report (default: none)")
    p.add_argument("--timing", action="store_true", help="include wall times in reports (default: off)")

    p = sub.add_parser("ablate", help="run one ablation variant")
    _add_common(p)
    _add_flags(p, all_fields)
    p.add_argument("--variant", required=True, choices=sorted(VARIANTS), help="component to replace")
    p.add_argument("--report-csv", help="per-iteration report CSV (default: none)")
    p.add_argument("--report-json", help="JSON report (default: none)")

    p = sub.add_parser("synth", help="write a synthetic pair in OpenEA format")
    _add_common(p)
    _add_flags(p, ["synth_entities", "synth_relations", "synth_degree", "synth_dropout", "synth_noise"])
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("refine", help="refine a pseudo-label file")
    _add_common(p)
    _add_flags(p, ["data", "delta0", "delta1", "n_lr"])
    p.add_argument("--labels", required=True, help="source_id<TAB>target_id[<TAB>provenance] file")
    p.add_argument("--out", help="refined label file (default: none)")
    p.add_argument("--trace", help="per-iteration trace CSV (default: none)")
    p.add_argument("--state", help="dump of the final best-match probabilities (default: none)")

    p = sub.add_parser("select", help="pick source entities to annotate")
    _add_common(p)
    _add_flags(p, ["data", "strategy", "ur_weight", "delta0", "delta1", "n_lr"])
    p.add_argument("--count", type=int, default=10, help="entities to select (default: 10)")
    p.add_argument("--labels", help="existing labels: their sources are excluded and refined into the state")
    p.add_argument("--scores", help="score dump CSV (default: none)")

    p = sub.add_parser("annotate", help="query an annotator for source entities")
    _add_common(p)
    _add_flags(p, ["data", "k", "backend", "p_true", "endpoint", "model", "api_key_env", "retries",
                   "parallelism", "max_tokens", "label_cache"])
    p.add_argument("--sources", required=True, help="file with one source entity id per line")
    p.add_argument("--queries", type=int, default=None, help="query budget (default: one per source)")
    p.add_argument("--out", required=True, help="output label file")

    p = sub.add_parser("eval", help="train the matcher on labels and evaluate against ent_links")
    _add_common(p)
    _add_flags(p, ["data", "embedding_dim", "epochs", "learning_rate", "margin", "negatives", "aggregation_rounds", "optimizer"])
    p.add_argument("--labels", required=True, help="training label file")
    p.add_argument("--emb-out", help="embedding dump (default: none)")
    p.add_argument("--topk-out", help="top-k score CSV (default: none)")

    p = sub.add_parser("inspect", help="print statistics of a dataset")
    _add_common(p)
    _add_flags(p, ["data"])
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {}
    for _, fname, _, _ in _RUN_FLAGS:
        value = getattr(args, fname, None)
        if value is not None:
            updates[fname] = value
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "no_refiner", False):
        updates["use_refiner"] = False
    return dataclasses.replace(cfg, **updates)


def _pair(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("--data is required")
    return load_openea(cfg.data, cfg.reverse_relations)


def _cmd_run(args, cfg) -> dict:
    timing = getattr(args, "timing", False)
    try:
        report = ablate(cfg, args.variant) if args.command == "ablate" else run(cfg)
    except PipelineAborted as exc:
        exc.report.write(args.report_csv, args.report_json, include_timing=timing)
        raise
    report.write(args.report_csv, args.report_json, include_timing=timing)
    if not args.json:
        sys.stdout.write(report.to_csv(timing))
    return report.to_dict(timing)


def _cmd_synth(args, cfg) -> dict:
    pair = synth_pair(cfg.synth_spec())
    save_openea(pair, args.out)
    return {
        "out": args.out,
        "source_entities": pair.source.num_entities,
        "target_entities": pair.target.num_entities,
        "source_triples": pair.source.num_triples,
        "target_triples": pair.target.num_triples,
    }


def _cmd_refine(args, cfg) -> dict:
    pair = _pair(cfg)
    labels = read_labels(args.labels)
    result = refine(labels, pair, cfg.refiner_config())
    if args.out:
        write_labels(args.out, result.labels)
    if args.state:
        result.state.dump(args.state)
    out = {"labels": len(labels), "refined": len(result.labels), "admitted": result.trace.sizes[-1]}
    truth = pair.ground_truth or None
    if args.trace:
        result.trace.write_csv(args.trace, labels, truth)
    if truth:
        tpr, recall = trace_against_truth(result.trace, labels, truth)[-1]
        out.update(tpr_input=label_tpr([lab.pair for lab in labels], truth), tpr=tpr, recall=recall,
                   tpr_refined=label_tpr(result.pairs, truth))
    if not args.json:
        for key, value in out.items():
            print(f"{key}\t{value}")
    return out


def _cmd_select(args, cfg) -> dict:
    pair = _pair(cfg)
    state, done = AlignmentState(), []
    if args.labels:
        labels = read_labels(args.labels)
        state = refine(labels, pair, cfg.refiner_config()).state
        done = sorted({lab.source for lab in labels})
    picks = select_entities(pair, state, done, args.count, cfg.strategy, cfg.ur_weight)
    if args.scores:
        score_entities(pair, state, done, cfg.ur_weight).write_csv(args.scores, pair)
    if not args.json:
        for e in picks:
            print(f"{e}\t{pair.source.entity_names[e]}")
    return {"selected": picks}


def _read_ids(path: str) -> list[int]:
    ids = []
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if line.strip():
                    try:
                        ids.append(int(line.split("\t")[0]))
                    except ValueError as exc:
                        raise DataError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    return ids


def _cmd_annotate(args, cfg) -> dict:
    pair = _pair(cfg)
    sources = _read_ids(args.sources)
    for s in sources:
        if not 0 <= s < pair.source.num_entities:
            raise DataError(f"unknown source entity {s}")
    backend = make_backend(cfg, pair)
    budget = Budget(args.queries if args.queries is not None else len(sources), cfg.max_tokens)
    cache = LabelCache(cfg.label_cache) if cfg.label_cache else None
    result = annotate_batch(backend, sources, pair, cfg.k, budget, seed=cfg.seed, cache=cache)
    write_labels(args.out, result.labels)
    out = {
        "queries": budget.spent_queries,
        "tokens": budget.spent_tokens,
        "labels": len(result.labels),
        "skipped": result.skipped,
    }
    if pair.ground_truth:
        out["tpr"] = label_tpr([lab.pair for lab in result.labels], pair.ground_truth)
    if result.error is not None:
        raise BackendError(f"{result.error} ({len(result.labels)} labels written before the failure)")
    if not args.json:
        for key, value in out.items():
            print(f"{key}\t{value}")
    return out


def _cmd_eval(args, cfg) -> dict:
    pair = _pair(cfg)
    if not pair.ground_truth:
        raise DataError("evaluation needs ent_links")
    labels = read_labels(args.labels)
    matcher = EmbeddingMatcher(cfg.matcher_config()).train(pair, labels)
    ev = evaluate(matcher, pair.ground_truth)
    precision, recall, f1 = evaluate_confident(confident_pairs(matcher), pair.ground_truth)
    if args.emb_out:
        matcher.dump_embeddings(args.emb_out)
    if args.topk_out:
        matcher.write_topk_csv(args.topk_out)
    out = {"hit1": ev.hit1, "hit10": ev.hit10, "mrr": ev.mrr, "precision": precision, "recall": recall, "f1": f1}
    if not args.json:
        for key, value in out.items():
            print(f"{key}\t{value}")
    return out


def _cmd_inspect(args, cfg) -> dict:
    pair = _pair(cfg)
    out = {"links": len(pair.ground_truth or {}), **pair.load_report}
    for side, kg in (("source", pair.source), ("target", pair.target)):
        out[f"{side}_entities"] = kg.num_entities
        out[f"{side}_relations"] = kg.num_relations
        out[f"{side}_triples"] = kg.num_triples
    if not args.json:
        for key, value in out.items():
            print(f"{key}\t{value}")
        for side, kg in (("source", pair.source), ("target", pair.target)):
            print(f"# {side} relations: name\tF\tF^-1\ttriples")
            for name, (f, finv, size) in functionality_table(kg).items():
                print(f"{name}\t{f:.4f}\t{finv:.4f}\t{size}")
    return out


_COMMANDS = {
    "run": _cmd_run,
    "ablate": _cmd_run,
    "synth": _cmd_synth,
    "refine": _cmd_refine,
    "select": _cmd_select,
    "annotate": _cmd_annotate,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        result = _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"kgalign: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"kgalign: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"kgalign: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    if args.json:
        print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
