"""Synthetic knowledge-graph pairs with known alignment, for tests and demos."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .kg import KgPair, KnowledgeGraph

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"
_LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic pair.

    ``mean_degree`` is the average number of triples touching an entity
    (in + out), so the source graph has ``entity_count * mean_degree / 2``
    triples.
    """

    entity_count: int = 500
    relation_count: int = 20
    mean_degree: float = 10.0
    edge_dropout: float = 0.0
    name_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.entity_count < 2 or self.relation_count < 1:
            raise ConfigError("entity_count must be >= 2 and relation_count >= 1")
        if self.mean_degree <= 0:
            raise ConfigError("mean_degree must be positive")
        if not 0.0 <= self.edge_dropout < 1.0:
            raise ConfigError("edge_dropout must lie in [0, 1)")
        if not 0.0 <= self.name_noise < 1.0:
            raise ConfigError("name_noise must lie in [0, 1)")


def _random_name(rng: np.random.Generator) -> str:
    words = []
    for _ in range(int(rng.integers(1, 3))):
        n_syl = int(rng.integers(2, 4))
        words.append("".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(n_syl)))
    return " ".join(w.capitalize() for w in words)


def _unique_names(rng: np.random.Generator, n: int) -> list[str]:
    names, seen = [], set()
    while len(names) < n:
        name = _random_name(rng)
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def _perturb(rng: np.random.Generator, name: str) -> str:
    chars = list(name)
    positions = [i for i, c in enumerate(chars) if c != " "]
    n_sub = max(1, len(positions) // 4)
    for i in rng.choice(positions, size=min(n_sub, len(positions)), replace=False):
        chars[i] = rng.choice(list(_LETTERS))
    return "".join(chars)


def _sample_triples(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    n, n_rel = spec.entity_count, spec.relation_count
    target_count = max(1, int(round(n * spec.mean_degree / 2)))
    popularity = rng.pareto(2.0, size=n) + 1.0
    popularity /= popularity.sum()
    rel_weight = 1.0 / np.arange(1, n_rel + 1) ** 0.8
    rel_weight /= rel_weight.sum()
    # 0: many-to-many, 1: one tail per head, 2: one head per tail
    kind = rng.integers(0, 3, size=n_rel)

    triples: set[tuple[int, int, int]] = set()
    head_used: set[tuple[int, int]] = set()
    tail_used: set[tuple[int, int]] = set()

    def try_add(h, r, t) -> bool:
        if h == t or (h, r, t) in triples:
            return False
        if kind[r] == 1 and (r, h) in head_used:
            return False
        if kind[r] == 2 and (r, t) in tail_used:
            return False
        triples.add((h, r, t))
        head_used.add((r, h))
        tail_used.add((r, t))
        return True

    # every entity gets at least one triple before popularity takes over
    for e in rng.permutation(n):
        if len(triples) >= target_count:
            break
        for _ in range(20):
            other = int(rng.choice(n, p=popularity))
            r = int(rng.choice(n_rel, p=rel_weight))
            h, t = (int(e), other) if rng.random() < 0.5 else (other, int(e))
            if try_add(h, r, t):
                break

    attempts = 0
    max_attempts = 50 * target_count
    while len(triples) < target_count and attempts < max_attempts:
        attempts += 1
        h = int(rng.choice(n, p=popularity))
        t = int(rng.choice(n, p=popularity))
        r = int(rng.choice(n_rel, p=rel_weight))
        try_add(h, r, t)
    return sorted(triples)


def synth_pair(spec: SynthSpec, reverse_relations: bool = True) -> KgPair:
    """Sample a source graph and a renamed, permuted, partially dropped copy.

    Target entity ids are a random permutation of the source ids so that
    id-based tie-breaking never favours the true counterpart.
    """
    rng = np.random.default_rng(spec.seed)
    n, n_rel = spec.entity_count, spec.relation_count
    names = _unique_names(rng, n)
    triples = _sample_triples(spec, rng)

    ent_perm = rng.permutation(n)
    rel_perm = rng.permutation(n_rel)
    tgt_names = [""] * n
    noisy = rng.random(n) < spec.name_noise
    taken = set()
    for e in range(n):
        name = names[e]
        if noisy[e]:
            for _ in range(20):
                cand = _perturb(rng, names[e])
                if cand not in taken and cand not in names:
                    name = cand
                    break
        taken.add(name)
        tgt_names[int(ent_perm[e])] = name

    keep = rng.random(len(triples)) >= spec.edge_dropout
    tgt_triples = [
        (int(ent_perm[h]), int(rel_perm[r]), int(ent_perm[t])) for (h, r, t), k in zip(triples, keep) if k
    ]
    tgt_triples.sort()

    source = KnowledgeGraph(names, [f"rel_{i}" for i in range(n_rel)], triples, reverse_relations)
    target = KnowledgeGraph(tgt_names, [f"prop_{i}" for i in range(n_rel)], tgt_triples, reverse_relations)
    for kg, side in ((source, "source"), (target, "target")):
        isolated = sum(1 for e in range(kg.num_entities) if not kg.out_index[e])
        if isolated > kg.num_entities / 2:
            warnings.warn(f"{side} graph has {isolated} of {kg.num_entities} entities without triples")
    truth = {e: int(ent_perm[e]) for e in range(n)}
    return KgPair(source, target, truth)


def synth_noisy_labels(
    pair: KgPair,
    n_labels: int,
    tpr: float,
    seed: int = 0,
) -> list[tuple[int, int]]:
    """Labels for ``n_labels`` distinct random sources, ``round(tpr * n_labels)`` of them correct.

    Wrong labels point to a uniformly random non-counterpart target. This is the
    fixed-budget scheme; see :func:`fixed_tp_label_count` for the fixed-TP one.
    """
    if not 0.0 <= tpr <= 1.0:
        raise ConfigError("tpr must lie in [0, 1]")
    truth = pair.ground_truth or {}
    rng = np.random.default_rng(seed)
    sources = sorted(truth)
    n_labels = min(n_labels, len(sources))
    chosen = rng.choice(sources, size=n_labels, replace=False)
    n_true = int(round(tpr * n_labels))
    m = pair.target.num_entities
    labels = []
    for i, s in enumerate(chosen):
        s = int(s)
        if i < n_true:
            labels.append((s, truth[s]))
        else:
            t = int(rng.integers(m - 1))
            if t >= truth[s]:
                t += 1
            labels.append((s, t))
    return sorted(labels)


def fixed_tp_label_count(n_true: int, tpr: float) -> int:
    """Total labels needed to hold ``n_true`` correct ones at the given TPR."""
    if not 0.0 < tpr <= 1.0:
        raise ConfigError("tpr must lie in (0, 1]")
    return int(round(n_true / tpr))
