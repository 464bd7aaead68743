"""Greedy refinement of noisy pseudo-labels by structural compatibility.

All labels are seeded at ``delta0``; each iteration then runs one reasoning
round, admits labels whose probability rose above ``delta0``, drops labels that
are beaten by another pair on either side, and lifts the survivors to at least
``delta1`` so that they steer the next round.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

from .errors import ConfigError, DataError
from .kg import KgPair
from .reasoning import (
    DEFAULT_SUBREL_PRIOR,
    DEFAULT_THETA_MIN,
    AlignmentState,
    raise_pairs,
    reasoning_round,
    seed,
    warm_start,
)


class Provenance(str, enum.Enum):
    ANNOTATED = "annotated"
    INFERRED = "inferred"


@dataclass(frozen=True, order=True)
class PseudoLabel:
    source: int
    target: int
    provenance: Provenance = Provenance.ANNOTATED

    @property
    def pair(self) -> tuple[int, int]:
        return (self.source, self.target)


LabelLike = Union[PseudoLabel, tuple[int, int]]


def as_pairs(labels: Iterable[LabelLike]) -> list[tuple[int, int]]:
    """Sorted, deduplicated ``(source, target)`` pairs."""
    out = set()
    for lab in labels:
        if isinstance(lab, PseudoLabel):
            out.add(lab.pair)
        else:
            s, t = lab
            out.add((int(s), int(t)))
    return sorted(out)


@dataclass(frozen=True)
class RefinerConfig:
    delta0: float = 0.5
    delta1: float = 0.9
    n_lr: int = 10
    theta_min: float = DEFAULT_THETA_MIN
    seed_admit: bool = True  # start with every label admitted
    augment_inferred: bool = True  # add non-label pairs with P > delta1 to the output
    subrel_prior: float = DEFAULT_SUBREL_PRIOR

    def __post_init__(self):
        if not 0.0 < self.delta0 < 1.0:
            raise ConfigError(f"delta0 must lie in (0, 1), got {self.delta0}")
        if not self.delta0 < self.delta1 < 1.0:
            raise ConfigError(f"delta1 must lie in (delta0, 1), got {self.delta1}")
        if self.n_lr < 1:
            raise ConfigError("n_lr must be >= 1")


@dataclass
class RefinerTrace:
    """Per-iteration snapshots of the admitted label set (iteration 0 = before reasoning)."""

    members: list[frozenset] = field(default_factory=list)
    phi: list[int] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [len(m) for m in self.members]

    def write_csv(self, path: str, labels: Iterable[LabelLike], truth: Optional[Mapping[int, int]] = None) -> None:
        """One row per iteration: ``iter,size_Lprime,tpr,recall,phi`` (blank when undefined)."""
        rates = trace_against_truth(self, labels, truth) if truth is not None else [(None, None)] * len(self.members)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iter", "size_Lprime", "tpr", "recall", "phi"])
            for i, (members, phi, (tpr, rec)) in enumerate(zip(self.members, self.phi, rates)):
                w.writerow([i, len(members), "" if tpr is None else repr(tpr), "" if rec is None else repr(rec), phi])


@dataclass
class RefineResult:
    labels: list[PseudoLabel]
    state: AlignmentState
    trace: RefinerTrace

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [lab.pair for lab in self.labels]

    @property
    def annotated_pairs(self) -> list[tuple[int, int]]:
        return [lab.pair for lab in self.labels if lab.provenance is Provenance.ANNOTATED]


def _is_beaten(state: AlignmentState, s: int, t: int) -> tuple[bool, bool]:
    p = state.pair_prob(s, t)
    return p < state.prob_of_target(t), p < state.prob_of(s)


def incompatibility(labels: Iterable[LabelLike], state: AlignmentState) -> int:
    """Count labels that are not their target's best match plus those not their source's.

    Ties with the maximum are compatible.
    """
    total = 0
    for s, t in as_pairs(labels):
        by_target, by_source = _is_beaten(state, s, t)
        total += int(by_target) + int(by_source)
    return total


def refine(labels: Iterable[LabelLike], kg_pair: KgPair, cfg: Optional[RefinerConfig] = None) -> RefineResult:
    """Run the greedy refinement loop and return refined labels, final state and trace."""
    cfg = cfg or RefinerConfig()
    pairs = as_pairs(labels)
    label_set = set(pairs)

    state = seed(AlignmentState(), pairs, cfg.delta0, kg_pair)
    state = warm_start(state, kg_pair, cfg.theta_min, cfg.subrel_prior)
    admitted: set[tuple[int, int]] = set(pairs) if cfg.seed_admit else set()
    trace = RefinerTrace()
    trace.members.append(frozenset(admitted))
    trace.phi.append(incompatibility(admitted, state))

    for _ in range(cfg.n_lr):
        state = reasoning_round(state, kg_pair, cfg.theta_min)
        admitted |= {(s, t) for s, t in pairs if state.pair_prob(s, t) > cfg.delta0}
        admitted = {
            (s, t)
            for s, t in admitted
            if state.pair_prob(s, t) >= max(state.prob_of_target(t), state.prob_of(s))
        }
        state = raise_pairs(state, admitted, cfg.delta1)
        trace.members.append(frozenset(admitted))
        trace.phi.append(incompatibility(admitted, state))

    refined = [PseudoLabel(s, t) for s, t in sorted(admitted)]
    if cfg.augment_inferred:
        # only pairs that are the best match on both sides; a pair beaten on
        # one side would give that entity a second, conflicting label
        extra = {
            (s, t): p
            for (s, t), p in state.stored_pairs().items()
            if p > cfg.delta1 and (s, t) not in admitted and not any(_is_beaten(state, s, t))
        }
        for s, t in sorted(extra):
            prov = Provenance.ANNOTATED if (s, t) in label_set else Provenance.INFERRED
            refined.append(PseudoLabel(s, t, prov))
        refined.sort()
    return RefineResult(refined, state, trace)


def trace_against_truth(
    trace: RefinerTrace, labels: Iterable[LabelLike], truth: Mapping[int, int]
) -> list[tuple[Optional[float], Optional[float]]]:
    """Per-iteration ``(TPR, recall)`` of the admitted set.

    TPR = |A ∩ L'| / |L'| and recall = |A ∩ L'| / |A ∩ L|; either is ``None``
    when its denominator is zero.
    """
    truth_pairs = set(truth.items())
    correct_input = len(truth_pairs.intersection(as_pairs(labels)))
    out = []
    for members in trace.members:
        hit = len(truth_pairs & members)
        tpr = hit / len(members) if members else None
        recall = hit / correct_input if correct_input else None
        out.append((tpr, recall))
    return out


def label_tpr(pairs: Iterable[tuple[int, int]], truth: Mapping[int, int]) -> Optional[float]:
    pairs = list(pairs)
    if not pairs:
        return None
    return sum(truth.get(s) == t for s, t in pairs) / len(pairs)


def read_labels(path: str) -> list[PseudoLabel]:
    """Read ``source_id<TAB>target_id[<TAB>provenance]`` lines."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
            try:
                s, t = int(fields[0]), int(fields[1])
                prov = Provenance(fields[2]) if len(fields) == 3 else Provenance.ANNOTATED
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            out.append(PseudoLabel(s, t, prov))
    return out


def write_labels(path: str, labels: Iterable[LabelLike]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for lab in labels:
            if isinstance(lab, PseudoLabel):
                f.write(f"{lab.source}\t{lab.target}\t{lab.provenance.value}\n")
            else:
                f.write(f"{lab[0]}\t{lab[1]}\n")
