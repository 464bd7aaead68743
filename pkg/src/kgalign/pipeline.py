"""The iterative select, annotate, refine, train and feedback loop."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .annotator import (
    DEFAULT_API_KEY_ENV,
    DEFAULT_K,
    Budget,
    LabelCache,
    LlmBackend,
    NoisyOracleBackend,
    OracleBackend,
    annotate_batch,
)
from .errors import BackendError, ConfigError, DataError
from .kg import KgPair, load_openea
from .matcher import EmbeddingMatcher, MatcherConfig, confident_pairs, evaluate
from .reasoning import DEFAULT_THETA_MIN, AlignmentState, reasoning_round, seed
from .refiner import RefinerConfig, as_pairs, label_tpr, refine
from .selection import STRATEGIES, UR_WEIGHTS, select_entities
from .synth import SynthSpec, synth_pair

BACKENDS = ("oracle", "noisy-oracle", "llm")
VARIANTS = {
    "full": {},
    "no-refiner": {"use_refiner": False},
    "no-active": {"strategy": "random"},
    "random-select": {"strategy": "random"},
    "ur-only": {"strategy": "ur"},
    "nu-only": {"strategy": "un"},
    "degree": {"strategy": "degree"},
    "funcSum": {"strategy": "funcsum"},
}


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; field names double as config-file keys."""

    budget_fraction: float = 0.1
    iterations: int = 3
    k: int = DEFAULT_K
    delta0: float = 0.5
    delta1: float = 0.9
    n_lr: int = 10
    theta_min: float = DEFAULT_THETA_MIN
    use_refiner: bool = True
    strategy: str = "combined"
    ur_weight: str = "fun"
    embedding_dim: int = 64
    epochs: int = 200
    learning_rate: float = 0.01
    margin: float = 1.0
    negatives: int = 5
    aggregation_rounds: int = 2
    optimizer: str = "adam"
    backend: str = "noisy-oracle"
    p_true: float = 0.6
    endpoint: str = ""
    model: str = ""
    api_key_env: str = DEFAULT_API_KEY_ENV
    retries: int = 3
    parallelism: int = 4
    max_tokens: Optional[int] = None
    label_cache: str = ""
    seed: int = 0
    data: str = ""
    reverse_relations: bool = True
    synth_entities: int = 500
    synth_relations: int = 20
    synth_degree: float = 6.0
    synth_dropout: float = 0.3
    synth_noise: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.budget_fraction <= 1.0:
            raise ConfigError("budget_fraction must lie in (0, 1]")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.ur_weight not in UR_WEIGHTS:
            raise ConfigError(f"ur_weight must be one of {UR_WEIGHTS}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        self.refiner_config()
        self.matcher_config()

    def refiner_config(self) -> RefinerConfig:
        return RefinerConfig(self.delta0, self.delta1, self.n_lr, self.theta_min)

    def matcher_config(self, offset: int = 0) -> MatcherConfig:
        return MatcherConfig(
            self.embedding_dim,
            self.epochs,
            self.learning_rate,
            self.margin,
            self.negatives,
            self.aggregation_rounds,
            self.optimizer,
            self.seed + offset,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            self.synth_entities, self.synth_relations, self.synth_degree, self.synth_dropout, self.synth_noise, self.seed
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(name: str, raw: str, ftype) -> object:
    text = raw.strip()
    ftype = str(ftype)
    try:
        if "Optional[int]" in ftype:
            return None if text.lower() in ("", "none") else int(text)
        if ftype == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from exc
    return text


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) on top of ``base``."""
    known = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        updates[key] = _convert(key, value, known[key])
    return dataclasses.replace(base or RunConfig(), **updates)


def load_config(path: str, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc.strerror}") from exc
    return parse_config_text(text, base)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


@dataclass
class IterationRecord:
    iteration: int
    queries: int
    labels: int
    refined: int
    tpr_labels: Optional[float] = None
    tpr_refined: Optional[float] = None
    recall_refined: Optional[float] = None
    hit1: Optional[float] = None
    hit10: Optional[float] = None
    mrr: Optional[float] = None
    confident: int = 0
    wall_time: float = 0.0


CSV_COLUMNS = [f.name for f in fields(IterationRecord)]


@dataclass
class RunReport:
    config: dict
    iterations: list[IterationRecord] = field(default_factory=list)
    budget: int = 0
    spent_queries: int = 0
    spent_tokens: int = 0
    annotated: list[int] = field(default_factory=list)
    aborted: Optional[str] = None

    @property
    def final(self) -> Optional[IterationRecord]:
        return self.iterations[-1] if self.iterations else None

    def to_dict(self, include_timing: bool = False) -> dict:
        rows = []
        for rec in self.iterations:
            row = dataclasses.asdict(rec)
            if not include_timing:
                row.pop("wall_time")
            rows.append(row)
        final = dict(rows[-1]) if rows else None
        return {
            "config": self.config,
            "budget": self.budget,
            "spent_queries": self.spent_queries,
            "spent_tokens": self.spent_tokens,
            "iterations": rows,
            "final": final,
            "aborted": self.aborted,
        }

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def to_csv(self, include_timing: bool = False) -> str:
        cols = [c for c in CSV_COLUMNS if include_timing or c != "wall_time"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for rec in self.iterations:
            row = dataclasses.asdict(rec)
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols])
        return buf.getvalue()

    def write(self, csv_path: Optional[str] = None, json_path: Optional[str] = None, include_timing: bool = False):
        if csv_path:
            with open(csv_path, "w", encoding="utf-8", newline="") as f:
                f.write(self.to_csv(include_timing))
        if json_path:
            with open(json_path, "w", encoding="utf-8") as f:
                f.write(self.to_json(include_timing))


class PipelineAborted(BackendError):
    """The annotator failed mid-run; ``report`` holds the iterations completed so far."""

    def __init__(self, message: str, report: RunReport):
        super().__init__(message)
        self.report = report


def load_pair(cfg: RunConfig) -> KgPair:
    if cfg.data:
        return load_openea(cfg.data, cfg.reverse_relations)
    return synth_pair(cfg.synth_spec(), cfg.reverse_relations)


def make_backend(cfg: RunConfig, kg_pair: KgPair):
    if cfg.backend == "llm":
        if not cfg.endpoint or not cfg.model:
            raise ConfigError("the llm backend needs endpoint and model")
        return LlmBackend(
            cfg.endpoint,
            cfg.model,
            kg_pair.target,
            api_key_env=cfg.api_key_env,
            retries=cfg.retries,
            parallelism=cfg.parallelism,
        )
    if kg_pair.ground_truth is None:
        raise ConfigError(f"the {cfg.backend} backend needs ground-truth links")
    if cfg.backend == "oracle":
        return OracleBackend(kg_pair.ground_truth)
    return NoisyOracleBackend(kg_pair.ground_truth, cfg.p_true, seed=cfg.seed)


def budget_schedule(total: int, n: int) -> list[int]:
    """``total // n`` per iteration with the remainder added to the last one."""
    per = [total // n] * n
    per[-1] += total - sum(per)
    return per


def run(cfg: RunConfig, kg_pair: Optional[KgPair] = None, backend=None) -> RunReport:
    """Run the full loop and return its report.

    ``kg_pair`` and ``backend`` default to what ``cfg`` describes.
    """
    pair = kg_pair if kg_pair is not None else load_pair(cfg)
    backend = backend if backend is not None else make_backend(cfg, pair)
    n_src = pair.source.num_entities
    total = math.floor(cfg.budget_fraction * n_src)
    if total == 0:
        raise ConfigError(f"budget_fraction {cfg.budget_fraction} gives no queries for {n_src} entities")
    budget = Budget(total, cfg.max_tokens)
    cache = LabelCache(cfg.label_cache) if cfg.label_cache else None
    truth = pair.ground_truth
    rng = np.random.default_rng(cfg.seed)
    ref_cfg = cfg.refiner_config()

    report = RunReport(cfg.to_dict(), budget=total)
    state = AlignmentState()
    annotated: list[int] = []
    labels: list[tuple[int, int]] = []
    for i, quota in enumerate(budget_schedule(total, cfg.iterations)):
        started = time.perf_counter()
        picks = select_entities(pair, state, annotated, quota, cfg.strategy, cfg.ur_weight, rng) if quota else []
        before = budget.spent_queries
        batch = annotate_batch(backend, picks, pair, cfg.k, budget, seed=cfg.seed, cache=cache)
        annotated.extend(a.source for a in batch.annotations)
        labels = as_pairs(labels + [lab.pair for lab in batch.labels])
        report.spent_queries, report.spent_tokens = budget.spent_queries, budget.spent_tokens
        report.annotated = list(annotated)
        _check_budget(report, annotated)
        if batch.error is not None:
            report.aborted = str(batch.error)
            raise PipelineAborted(f"annotation failed in iteration {i + 1}: {batch.error}", report) from batch.error

        rec = IterationRecord(i + 1, budget.spent_queries - before, len(labels), 0)
        if cfg.use_refiner and labels:
            result = refine(labels, pair, ref_cfg)
            train_labels, state = result.pairs, result.state
            admitted = result.trace.members[-1]
        else:
            train_labels = labels
            state = reasoning_round(seed(state, labels, cfg.delta0), pair, cfg.theta_min) if labels else state
            admitted = frozenset(labels)
        rec.refined = len(train_labels)
        if truth is not None:
            rec.tpr_labels = label_tpr(labels, truth)
            rec.tpr_refined = label_tpr(train_labels, truth)
            correct_in = sum(truth.get(s) == t for s, t in labels)
            if correct_in:
                rec.recall_refined = sum(truth.get(s) == t for s, t in admitted) / correct_in

        if train_labels:
            matcher = EmbeddingMatcher(cfg.matcher_config(i)).train(pair, train_labels)
            if truth:
                ev = evaluate(matcher, truth)
                rec.hit1, rec.hit10, rec.mrr = ev.hit1, ev.hit10, ev.mrr
            conf = sorted(confident_pairs(matcher))
            rec.confident = len(conf)
            # seeding keeps the max, so stronger refined labels are never overwritten
            if conf:
                state = reasoning_round(seed(state, conf, cfg.delta0), pair, cfg.theta_min)
        rec.wall_time = time.perf_counter() - started
        report.iterations.append(rec)
    # a token ceiling may stop spending early; otherwise the budget is used up when the pool allows
    if cfg.max_tokens is None and n_src >= total and report.spent_queries != total:
        raise AssertionError(f"spent {report.spent_queries} of {total} queries with {n_src} candidates")
    return report


def _check_budget(report: RunReport, annotated: list[int]) -> None:
    if report.spent_queries > report.budget:
        raise AssertionError(f"spent {report.spent_queries} queries over a budget of {report.budget}")
    if len(set(annotated)) != len(annotated):
        raise AssertionError("a source entity was annotated twice")


def ablate(cfg: RunConfig, variant: str, kg_pair: Optional[KgPair] = None, backend=None) -> RunReport:
    """Run the loop with one component swapped out.

    ``no-active`` and ``random-select`` both select uniformly at random.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return run(dataclasses.replace(cfg, **VARIANTS[variant]), kg_pair, backend)
