"""Uncertainty-driven choice of source entities to annotate."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError
from .kg import KgPair
from .reasoning import AlignmentState

STRATEGIES = ("combined", "ur", "un", "degree", "funcsum", "random")
UR_WEIGHTS = ("fun", "inv-fun")


@dataclass
class UncertaintyScores:
    """Per-entity scores over a pool of source entities (``entities`` ascending)."""

    entities: list[int]
    u_r: list[float]
    u_n: list[float]
    rank_ur: list[int]
    rank_un: list[int]
    u: list[float]

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.entities, self.u))

    def write_csv(self, path: str, kg_pair: KgPair) -> None:
        names = kg_pair.source.entity_names
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["entity_id", "name", "u_r", "u_n", "rank_ur", "rank_un", "u"])
            for i, e in enumerate(self.entities):
                w.writerow([e, names[e], repr(self.u_r[i]), repr(self.u_n[i]), self.rank_ur[i], self.rank_un[i], repr(self.u[i])])


def _weights(kg_pair: KgPair, ur_weight: str) -> list[float]:
    kg = kg_pair.source
    if ur_weight == "fun":
        arr = kg.functionality_all
    elif ur_weight == "inv-fun":
        arr = kg.inv_functionality_all
    else:
        raise ConfigError(f"ur_weight must be one of {UR_WEIGHTS}, got {ur_weight!r}")
    # relations without triples never appear on an edge, so NaN is never read
    return arr.tolist()


def _uncertainty(kg_pair: KgPair, state: AlignmentState, weights: Optional[list[float]]) -> list[float]:
    kg = kg_pair.source
    p = [state.prob_of(e) for e in range(kg.num_entities)]
    out = []
    for e in range(kg.num_entities):
        terms = [1.0 - p[e]]
        for r, t in kg.out_index[e]:
            w = 1.0 if weights is None else weights[r]
            terms.append(w * (1.0 - p[t]))
        out.append(math.fsum(terms))
    return out


def relational_uncertainty(kg_pair: KgPair, state: AlignmentState, ur_weight: str = "fun") -> list[float]:
    """``(1 - P(e)) + sum of w(r) * (1 - P(t))`` over the edges of each source entity."""
    return _uncertainty(kg_pair, state, _weights(kg_pair, ur_weight))


def neighbor_uncertainty(kg_pair: KgPair, state: AlignmentState) -> list[float]:
    """Like :func:`relational_uncertainty` with every edge weighted 1."""
    return _uncertainty(kg_pair, state, None)


def ordinal_ranks(values: list[float]) -> list[int]:
    """Rank 1 for the largest value; ties go to the earlier position."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    ranks = [0] * len(values)
    for rank, i in enumerate(order, start=1):
        ranks[i] = rank
    return ranks


def aggregate(entities: list[int], u_r: list[float], u_n: list[float]) -> UncertaintyScores:
    """Combine both scores by the sum of reciprocal ranks, ``u = 2 (1/r_ur + 1/r_un)``.

    ``entities`` must be ascending so position order matches id order.
    """
    if not (len(entities) == len(u_r) == len(u_n)):
        raise ConfigError("score vectors must cover the same entities")
    r_ur, r_un = ordinal_ranks(u_r), ordinal_ranks(u_n)
    u = [2.0 * (1.0 / a + 1.0 / b) for a, b in zip(r_ur, r_un)]
    return UncertaintyScores(list(entities), list(u_r), list(u_n), r_ur, r_un, u)


def score_entities(
    kg_pair: KgPair,
    state: AlignmentState,
    already_annotated: Iterable[int] = (),
    ur_weight: str = "fun",
) -> UncertaintyScores:
    """Scores for every source entity not yet annotated.

    Annotated entities are removed before ranking, so ranks run over the pool.
    """
    done = set(already_annotated)
    ur = relational_uncertainty(kg_pair, state, ur_weight)
    un = neighbor_uncertainty(kg_pair, state)
    pool = [e for e in range(kg_pair.source.num_entities) if e not in done]
    return aggregate(pool, [ur[e] for e in pool], [un[e] for e in pool])


def select(scores: UncertaintyScores, already_annotated: Iterable[int], k: int) -> list[int]:
    """Top-``k`` entities by ``u`` outside ``already_annotated``; ties by ascending id."""
    return _top_k(scores.entities, scores.u, already_annotated, k)


def _top_k(entities: list[int], values: list[float], exclude: Iterable[int], k: int) -> list[int]:
    if k < 1:
        raise ConfigError("k must be >= 1")
    done = set(exclude)
    order = sorted((i for i, e in enumerate(entities) if e not in done), key=lambda i: (-values[i], entities[i]))
    return [entities[i] for i in order[:k]]


def select_entities(
    kg_pair: KgPair,
    state: AlignmentState,
    already_annotated: Iterable[int],
    k: int,
    strategy: str = "combined",
    ur_weight: str = "fun",
    rng: Optional[np.random.Generator] = None,
) -> list[int]:
    """Pick ``k`` new sources with the named strategy.

    ``ur`` and ``un`` use a single score, ``degree`` ranks by ``1 + degree`` and
    ``funcsum`` by ``1 + sum of F(r)`` over the entity's edges (both ignore the
    state), ``random`` draws uniformly from the pool.
    """
    done = set(already_annotated)
    if strategy == "combined":
        return select(score_entities(kg_pair, state, done, ur_weight), done, k)
    if strategy == "random":
        if k < 1:
            raise ConfigError("k must be >= 1")
        pool = [e for e in range(kg_pair.source.num_entities) if e not in done]
        rng = rng if rng is not None else np.random.default_rng(0)
        picked = rng.permutation(len(pool))[:k]
        return [pool[i] for i in picked]
    entities = list(range(kg_pair.source.num_entities))
    if strategy == "ur":
        values = relational_uncertainty(kg_pair, state, ur_weight)
    elif strategy == "un":
        values = neighbor_uncertainty(kg_pair, state)
    elif strategy == "degree":
        values = neighbor_uncertainty(kg_pair, AlignmentState())
    elif strategy == "funcsum":
        values = relational_uncertainty(kg_pair, AlignmentState(), ur_weight)
    else:
        raise ConfigError(f"unknown selection strategy {strategy!r}; expected one of {STRATEGIES}")
    return _top_k(entities, values, done, k)
