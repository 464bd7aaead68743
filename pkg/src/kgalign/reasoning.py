"""Probabilistic reasoning over entity and subrelation alignment probabilities.

Only each entity's single most probable counterpart is stored, in both
directions (lazy storage). Every probability that is not stored is treated as
zero. Updates never mutate their input: each returns a fresh snapshot built
exclusively from the previous one.

Products are evaluated over sorted factor lists and sums with ``math.fsum`` so
that the result does not depend on iteration order.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ConfigError, DataError
from .kg import KgPair, KnowledgeGraph

DEFAULT_THETA_MIN = 1e-4
DEFAULT_SUBREL_PRIOR = 0.1
DENSE_SIZE_LIMIT = 10_000


def _better(p: float, idx: int, cur: Optional[tuple[int, float]]) -> bool:
    """Whether ``(idx, p)`` beats the stored entry ``cur`` (higher p, then smaller id)."""
    if cur is None:
        return True
    return p > cur[1] or (p == cur[1] and idx < cur[0])


@dataclass(frozen=True)
class AlignmentState:
    """Sparse best-match alignment probabilities plus subrelation probabilities.

    ``best_of_source[e] = (e', p)`` and ``best_of_target[e'] = (e, p)``. The two
    maps need not agree: a source's best target may prefer another source.
    ``subrel_fwd[(r, r')]`` is P(r ⊆ r'); ``subrel_bwd[(r', r)]`` is P(r' ⊆ r).
    """

    best_of_source: Mapping[int, tuple[int, float]] = field(default_factory=dict)
    best_of_target: Mapping[int, tuple[int, float]] = field(default_factory=dict)
    subrel_fwd: Mapping[tuple[int, int], float] = field(default_factory=dict)
    subrel_bwd: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def pair_prob(self, s: int, t: int) -> float:
        """Stored probability of ``(s, t)``, or 0 when the pair is not stored."""
        entry = self.best_of_source.get(s)
        if entry is not None and entry[0] == t:
            return entry[1]
        entry = self.best_of_target.get(t)
        if entry is not None and entry[0] == s:
            return entry[1]
        return 0.0

    def prob_of(self, e: int) -> float:
        """max over targets of P(e ≡ e'), i.e. the best-match probability of a source entity."""
        entry = self.best_of_source.get(e)
        return entry[1] if entry is not None else 0.0

    def prob_of_target(self, e: int) -> float:
        entry = self.best_of_target.get(e)
        return entry[1] if entry is not None else 0.0

    def stored_pairs(self) -> dict[tuple[int, int], float]:
        """Union of both best-match maps as ``{(source, target): p}``."""
        pairs = {(s, t): p for s, (t, p) in self.best_of_source.items()}
        for t, (s, p) in self.best_of_target.items():
            pairs.setdefault((s, t), p)
        return pairs

    def partners_of_source(self) -> dict[int, dict[int, float]]:
        out: dict[int, dict[int, float]] = defaultdict(dict)
        for (s, t), p in self.stored_pairs().items():
            out[s][t] = p
        return dict(out)

    def partners_of_target(self) -> dict[int, dict[int, float]]:
        out: dict[int, dict[int, float]] = defaultdict(dict)
        for (s, t), p in self.stored_pairs().items():
            out[t][s] = p
        return dict(out)

    def transposed(self) -> "AlignmentState":
        """The state seen from the other side (source and target swapped)."""
        return AlignmentState(
            dict(self.best_of_target),
            dict(self.best_of_source),
            dict(self.subrel_bwd),
            dict(self.subrel_fwd),
        )

    def dump(self, path: str) -> None:
        """Write ``source_id<TAB>target_id<TAB>probability`` lines, sorted."""
        with open(path, "w", encoding="utf-8") as f:
            for (s, t), p in sorted(self.stored_pairs().items()):
                f.write(f"{s}\t{t}\t{p!r}\n")


@dataclass(frozen=True)
class ReasoningConfig:
    n_lr: int = 10
    theta_min: float = DEFAULT_THETA_MIN

    def __post_init__(self):
        if self.n_lr < 1:
            raise ConfigError("n_lr must be >= 1")
        if not 0.0 <= self.theta_min < 1.0:
            raise ConfigError("theta_min must lie in [0, 1)")


def _put(m: dict, key: int, other: int, p: float) -> None:
    cur = m.get(key)
    if cur is not None and cur[0] == other:
        if p > cur[1]:
            m[key] = (other, p)
    elif _better(p, other, cur):
        m[key] = (other, p)


def raise_pairs(state: AlignmentState, pairs: Iterable[tuple[int, int]], p: float) -> AlignmentState:
    """Set each pair's probability to ``max(current, p)`` in both maps."""
    bos, bot = dict(state.best_of_source), dict(state.best_of_target)
    for s, t in sorted(set(pairs)):
        value = max(state.pair_prob(s, t), p)
        _put(bos, s, t, value)
        _put(bot, t, s, value)
    return AlignmentState(bos, bot, state.subrel_fwd, state.subrel_bwd)


def seed(
    state: AlignmentState,
    pairs: Iterable[tuple[int, int]],
    p0: float,
    kg_pair: Optional[KgPair] = None,
) -> AlignmentState:
    """Initialise ``pairs`` at probability ``p0`` (keeping stronger existing values)."""
    if not 0.0 < p0 < 1.0:
        raise ConfigError(f"seed probability must lie in (0, 1), got {p0}")
    pairs = list(pairs)
    for s, t in pairs:
        if not (isinstance(s, (int, np.integer)) and isinstance(t, (int, np.integer))) or s < 0 or t < 0:
            raise DataError(f"invalid entity handles in pair ({s!r}, {t!r})")
        if kg_pair is not None and (s >= kg_pair.source.num_entities or t >= kg_pair.target.num_entities):
            raise DataError(f"pair ({s}, {t}) is out of range for the given graphs")
    return raise_pairs(state, ((int(s), int(t)) for s, t in pairs), p0)


def retain_best(
    probs: Mapping[tuple[int, int], float], theta_min: float = DEFAULT_THETA_MIN
) -> tuple[dict[int, tuple[int, float]], dict[int, tuple[int, float]]]:
    """Keep the single best pair per source and per target (ties: smaller id)."""
    bos: dict[int, tuple[int, float]] = {}
    bot: dict[int, tuple[int, float]] = {}
    for (s, t), p in probs.items():
        if p <= 0.0 or p < theta_min:
            continue
        if _better(p, t, bos.get(s)):
            bos[s] = (t, p)
        if _better(p, s, bot.get(t)):
            bot[t] = (s, p)
    return bos, bot


def entity_candidates(state: AlignmentState, kg_pair: KgPair) -> dict[tuple[int, int], float]:
    """Evaluate the neighbourhood propagation rule for every pair with evidence.

    For heads ``h`` and ``h'`` with triples ``(h, r, t)`` and ``(h', r', t')``
    whose tails are currently aligned, each triple pair contributes the factor
    ``(1 - F^-1(r) P(r⊆r') P(t≡t')) (1 - F^-1(r') P(r'⊆r) P(t≡t'))`` and the
    pair probability is one minus the product of its factors.
    """
    src, tgt = kg_pair.source, kg_pair.target
    finv_s, finv_t = src.inv_functionality_all.tolist(), tgt.inv_functionality_all.tolist()
    fwd, bwd = state.subrel_fwd, state.subrel_bwd
    src_in, tgt_in = src.in_index, tgt.in_index
    factors: dict[tuple[int, int], list[float]] = defaultdict(list)
    for (x, x2), p in state.stored_pairs().items():
        tgt_edges = tgt_in[x2]
        if not tgt_edges:
            continue
        for r, h in src_in[x]:
            fr = finv_s[r]
            for r2, h2 in tgt_edges:
                a = fwd.get((r, r2), 0.0)
                b = bwd.get((r2, r), 0.0)
                if a == 0.0 and b == 0.0:
                    continue
                factors[(h, h2)].append((1.0 - fr * a * p) * (1.0 - finv_t[r2] * b * p))
    return {k: 1.0 - math.prod(sorted(v)) for k, v in factors.items()}


def update_entity_probs(
    state: AlignmentState, kg_pair: KgPair, theta_min: float = DEFAULT_THETA_MIN
) -> AlignmentState:
    """One round of entity-probability propagation; returns a fresh snapshot."""
    bos, bot = retain_best(entity_candidates(state, kg_pair), theta_min)
    return AlignmentState(bos, bot, state.subrel_fwd, state.subrel_bwd)


def _directional_subrel(
    kg_a: KnowledgeGraph,
    kg_b: KnowledgeGraph,
    partners: Mapping[int, Mapping[int, float]],
    theta_min: float,
) -> dict[tuple[int, int], float]:
    """P(r ⊆ r') for r in ``kg_a`` and r' in ``kg_b`` given partners of ``kg_a`` entities.

    Numerator: sum over triples (h, r, t) of 1 - prod over (h', r', t') of
    (1 - P(h'≡h) P(t'≡t)). Denominator: the same sum with the product over all
    (h', t') partner combinations regardless of relation.
    """
    num: dict[tuple[int, int], list[float]] = defaultdict(list)
    den: dict[int, list[float]] = defaultdict(list)
    out_a, out_b = kg_a.out_index, kg_b.out_index
    for h in sorted(partners):
        ph = partners[h]
        for r, t in out_a[h]:
            pt = partners.get(t)
            if not pt:
                continue
            den[r].append(1.0 - math.prod(sorted(1.0 - p1 * p2 for p1 in ph.values() for p2 in pt.values())))
            per_rel: dict[int, list[float]] = defaultdict(list)
            for h2, p1 in ph.items():
                for r2, t2 in out_b[h2]:
                    p2 = pt.get(t2)
                    if p2 is not None:
                        per_rel[r2].append(1.0 - p1 * p2)
            for r2, fs in per_rel.items():
                num[(r, r2)].append(1.0 - math.prod(sorted(fs)))
    result = {}
    for (r, r2), terms in num.items():
        d = math.fsum(den[r])
        if d <= 0.0:
            continue
        value = math.fsum(terms) / d
        if value > 0.0 and value >= theta_min:
            result[(r, r2)] = value
    return result


def update_subrel_probs(
    state: AlignmentState, kg_pair: KgPair, theta_min: float = DEFAULT_THETA_MIN
) -> AlignmentState:
    """Recompute both subrelation maps from the entity probabilities in ``state``.

    Only relation pairs co-occurring on at least one aligned neighbour pair are
    evaluated; all others are zero.
    """
    fwd = _directional_subrel(kg_pair.source, kg_pair.target, state.partners_of_source(), theta_min)
    bwd = _directional_subrel(kg_pair.target, kg_pair.source, state.partners_of_target(), theta_min)
    return AlignmentState(state.best_of_source, state.best_of_target, fwd, bwd)


def reasoning_round(state: AlignmentState, kg_pair: KgPair, theta_min: float = DEFAULT_THETA_MIN) -> AlignmentState:
    """Entity update followed by subrelation update."""
    state = update_entity_probs(state, kg_pair, theta_min)
    return update_subrel_probs(state, kg_pair, theta_min)


def warm_start(
    state: AlignmentState,
    kg_pair: KgPair,
    theta_min: float = DEFAULT_THETA_MIN,
    prior: float = DEFAULT_SUBREL_PRIOR,
) -> AlignmentState:
    """Estimate subrelations from the seeded pairs; pairs without an estimate get ``prior``.

    The prior lets the first round propagate through relation pairs that the
    seeds alone cannot connect. Later rounds re-estimate every value.
    """
    if not 0.0 <= prior <= 1.0:
        raise ConfigError("subrelation prior must lie in [0, 1]")
    state = update_subrel_probs(state, kg_pair, theta_min)
    if prior == 0.0:
        return state
    n_s, n_t = kg_pair.source.num_relations_total, kg_pair.target.num_relations_total
    fwd = {(r, r2): state.subrel_fwd.get((r, r2), prior) for r in range(n_s) for r2 in range(n_t)}
    bwd = {(r2, r): state.subrel_bwd.get((r2, r), prior) for r2 in range(n_t) for r in range(n_s)}
    return AlignmentState(state.best_of_source, state.best_of_target, fwd, bwd)


def propagate(
    kg_pair: KgPair,
    seeds: Iterable[tuple[int, int]],
    rounds: int,
    p0: float = 0.5,
    theta_min: float = DEFAULT_THETA_MIN,
    subrel_prior: float = DEFAULT_SUBREL_PRIOR,
) -> AlignmentState:
    """Seed, warm-start subrelations, then run ``rounds`` rounds."""
    state = seed(AlignmentState(), seeds, p0, kg_pair)
    state = warm_start(state, kg_pair, theta_min, subrel_prior)
    for _ in range(rounds):
        state = reasoning_round(state, kg_pair, theta_min)
    return state


def prob_of(state: AlignmentState, e: int) -> float:
    return state.prob_of(e)


@dataclass
class DenseResult:
    table: np.ndarray  # raw propagation values of the final round, |E| x |E'|
    subrel_fwd: np.ndarray  # |R| x |R'|
    subrel_bwd: np.ndarray  # |R'| x |R|


def dense_reference(
    kg_pair: KgPair,
    seeds: Iterable[tuple[int, int]],
    n_lr: int,
    p0: float = 0.5,
    subrel_prior: float = DEFAULT_SUBREL_PRIOR,
) -> DenseResult:
    """Brute-force evaluation of the same reasoning over the full pair table.

    Every entity pair, every relation pair and the complete target-pair
    product in the subrelation denominator are enumerated. Between rounds the
    table is reduced to one best entry per row and per column, which is the
    information the lazy engine keeps. Intended as a test oracle for small
    graphs only.
    """
    src, tgt = kg_pair.source, kg_pair.target
    n, m = src.num_entities, tgt.num_entities
    if n * m > DENSE_SIZE_LIMIT:
        raise ConfigError(f"dense reference limited to {DENSE_SIZE_LIMIT} pairs, got {n * m}")

    table = [[0.0] * m for _ in range(n)]
    for s, t in seeds:
        table[s][t] = p0
    P = _dense_retain(table)
    S, S2 = _dense_subrel(kg_pair, P)
    S = [[v if v > 0.0 else subrel_prior for v in row] for row in S]
    S2 = [[v if v > 0.0 else subrel_prior for v in row] for row in S2]
    raw = table  # zero rounds: the seeded table itself
    for _ in range(n_lr):
        raw = _dense_entity(kg_pair, P, S, S2)
        P = _dense_retain(raw)
        S, S2 = _dense_subrel(kg_pair, P)
    return DenseResult(np.array(raw, dtype=float).reshape(n, m), np.array(S).reshape(src.num_relations_total, -1),
                       np.array(S2).reshape(tgt.num_relations_total, -1))


def _dense_retain(table: list[list[float]]) -> list[list[float]]:
    n = len(table)
    m = len(table[0]) if n else 0
    keep = [[0.0] * m for _ in range(n)]
    for s in range(n):
        best, best_p = -1, 0.0
        for t in range(m):
            if table[s][t] > best_p:
                best, best_p = t, table[s][t]
        if best >= 0:
            keep[s][best] = best_p
    for t in range(m):
        best, best_p = -1, 0.0
        for s in range(n):
            if table[s][t] > best_p:
                best, best_p = s, table[s][t]
        if best >= 0:
            keep[best][t] = best_p
    return keep


def _dense_entity(kg_pair: KgPair, P, S, S2) -> list[list[float]]:
    src, tgt = kg_pair.source, kg_pair.target
    finv_s, finv_t = src.inv_functionality_all.tolist(), tgt.inv_functionality_all.tolist()
    n, m = src.num_entities, tgt.num_entities
    out = [[0.0] * m for _ in range(n)]
    for h in range(n):
        edges = src.neighbors_out(h)
        for h2 in range(m):
            fs = []
            for r, t in edges:
                for r2, t2 in tgt.neighbors_out(h2):
                    p = P[t][t2]
                    fs.append((1.0 - finv_s[r] * S[r][r2] * p) * (1.0 - finv_t[r2] * S2[r2][r] * p))
            out[h][h2] = 1.0 - math.prod(sorted(fs))
    return out


def _dense_subrel(kg_pair: KgPair, P) -> tuple[list[list[float]], list[list[float]]]:
    src, tgt = kg_pair.source, kg_pair.target
    PT = [list(col) for col in zip(*P)] if P else []
    if not PT:
        PT = [[] for _ in range(tgt.num_entities)]
    fwd = _dense_subrel_dir(src, tgt, P)
    bwd = _dense_subrel_dir(tgt, src, PT)
    return fwd, bwd


def _dense_subrel_dir(kg_a: KnowledgeGraph, kg_b: KnowledgeGraph, P) -> list[list[float]]:
    Ra, Rb = kg_a.num_relations_total, kg_b.num_relations_total
    mb = kg_b.num_entities
    edges_a = [(h, r, t) for h in range(kg_a.num_entities) for r, t in kg_a.neighbors_out(h)]
    edges_b = [(h, r, t) for h in range(mb) for r, t in kg_b.neighbors_out(h)]
    den = [[] for _ in range(Ra)]
    num = [[[] for _ in range(Rb)] for _ in range(Ra)]
    for h, r, t in edges_a:
        den[r].append(1.0 - math.prod(sorted(1.0 - P[h][h2] * P[t][t2] for h2 in range(mb) for t2 in range(mb))))
        per_rel = [[] for _ in range(Rb)]
        for h2, r2, t2 in edges_b:
            per_rel[r2].append(1.0 - P[h][h2] * P[t][t2])
        for r2 in range(Rb):
            num[r][r2].append(1.0 - math.prod(sorted(per_rel[r2])))
    out = [[0.0] * Rb for _ in range(Ra)]
    for r in range(Ra):
        d = math.fsum(den[r])
        if d <= 0.0:
            continue
        for r2 in range(Rb):
            out[r][r2] = math.fsum(num[r][r2]) / d
    return out
