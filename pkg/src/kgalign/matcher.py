"""Embedding matcher trained on pseudo-labels, plus ranking metrics.

Both graphs are embedded in one space. Entities joined by a label share a
parameter row, so labels act as anchors. Representations are smoothed by
``aggregation_rounds`` steps of mean aggregation over each graph's undirected
adjacency (self loops included), and trained with a margin ranking loss
against uniformly drawn negatives. Scores are negative Euclidean distances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError
from .kg import KgPair, KnowledgeGraph

_EPS = 1e-12
_BLOCK = 1024
OPTIMIZERS = ("adam", "sgd")
_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class MatcherConfig:
    embedding_dim: int = 64
    epochs: int = 200
    learning_rate: float = 0.01
    margin: float = 1.0
    negatives_per_positive: int = 5
    aggregation_rounds: int = 2
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")
        if self.epochs < 1 or self.negatives_per_positive < 1:
            raise ConfigError("epochs and negatives_per_positive must be >= 1")
        if self.learning_rate <= 0 or self.margin <= 0:
            raise ConfigError("learning_rate and margin must be positive")
        if self.aggregation_rounds < 0:
            raise ConfigError("aggregation_rounds must be >= 0")


def _mean_operator(kg: KnowledgeGraph) -> sp.csr_matrix:
    """Row-normalised ``A + I`` over the undirected simple graph of ``kg``."""
    n = kg.num_entities
    if len(kg.triples):
        h, t = kg.triples[:, 0], kg.triples[:, 2]
        rows = np.concatenate([h, t, np.arange(n)])
        cols = np.concatenate([t, h, np.arange(n)])
    else:
        rows = cols = np.arange(n)
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0  # collapse parallel edges
    deg = np.asarray(a.sum(axis=1)).ravel()
    return sp.csr_matrix(sp.diags(1.0 / deg) @ a)


def _tie_parameters(n_src: int, n_tgt: int, labels: list[tuple[int, int]]) -> tuple[np.ndarray, int]:
    """Map every node (sources, then targets) to a shared parameter row."""
    parent = list(range(n_src + n_tgt))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s, t in labels:
        a, b = find(s), find(n_src + t)
        if a != b:
            parent[max(a, b)] = min(a, b)
    roots = np.array([find(x) for x in range(n_src + n_tgt)])
    _, index = np.unique(roots, return_inverse=True)
    return index.astype(np.int64), int(index.max()) + 1


class _Objective:
    """Margin loss as a function of the shared parameter matrix."""

    def __init__(self, kg_pair: KgPair, labels: list[tuple[int, int]], cfg: MatcherConfig):
        self.cfg = cfg
        self.n_src = kg_pair.source.num_entities
        self.n_tgt = kg_pair.target.num_entities
        self.node_param, self.n_params = _tie_parameters(self.n_src, self.n_tgt, labels)
        self.op = sp.block_diag([_mean_operator(kg_pair.source), _mean_operator(kg_pair.target)], format="csr")
        self.op_t = sp.csr_matrix(self.op.T)
        self.pos = np.asarray(labels, dtype=np.int64).reshape(-1, 2)

    def forward(self, theta: np.ndarray) -> np.ndarray:
        h = theta[self.node_param]
        for _ in range(self.cfg.aggregation_rounds):
            h = self.op @ h
        return h

    def embeddings(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.forward(theta)
        return h[: self.n_src], h[self.n_src :]

    def sample_negatives(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Per positive and per negative slot: a corrupted target and a corrupted source."""
        shape = (len(self.pos), self.cfg.negatives_per_positive)
        return rng.integers(self.n_tgt, size=shape), rng.integers(self.n_src, size=shape)

    def loss_and_grad(self, theta: np.ndarray, neg_t: np.ndarray, neg_s: np.ndarray) -> tuple[float, np.ndarray]:
        """Sum of all active hinge terms, and its gradient in ``theta``."""
        hs, ht = self.embeddings(theta)
        s, t = self.pos[:, 0], self.pos[:, 1]

        def dist(a, b):
            diff = a - b
            return np.sqrt((diff * diff).sum(axis=-1) + _EPS), diff

        d_pos, diff_pos = dist(hs[s], ht[t])
        d_nt, diff_nt = dist(hs[s][:, None, :], ht[neg_t])
        d_ns, diff_ns = dist(hs[neg_s], ht[t][:, None, :])
        m = self.cfg.margin
        viol_t = m + d_pos[:, None] - d_nt
        viol_s = m + d_pos[:, None] - d_ns
        act_t, act_s = viol_t > 0, viol_s > 0
        loss = np.where(act_t, viol_t, 0.0).sum() + np.where(act_s, viol_s, 0.0).sum()

        g_hs = np.zeros_like(hs)
        g_ht = np.zeros_like(ht)
        w_pos = act_t.sum(axis=1) + act_s.sum(axis=1)
        u_pos = diff_pos / d_pos[:, None] * w_pos[:, None]
        np.add.at(g_hs, s, u_pos)
        np.add.at(g_ht, t, -u_pos)
        u_nt = diff_nt / d_nt[..., None] * act_t[..., None]
        np.add.at(g_hs, s, -u_nt.sum(axis=1))
        np.add.at(g_ht, neg_t.ravel(), u_nt.reshape(-1, u_nt.shape[-1]))
        u_ns = diff_ns / d_ns[..., None] * act_s[..., None]
        np.add.at(g_hs, neg_s.ravel(), -u_ns.reshape(-1, u_ns.shape[-1]))
        np.add.at(g_ht, t, u_ns.sum(axis=1))

        g = np.vstack([g_hs, g_ht])
        for _ in range(self.cfg.aggregation_rounds):
            g = self.op_t @ g
        g_theta = np.zeros((self.n_params, theta.shape[1]))
        np.add.at(g_theta, self.node_param, g)
        return float(loss), g_theta

    def mean_positive_distance(self, theta: np.ndarray) -> float:
        hs, ht = self.embeddings(theta)
        diff = hs[self.pos[:, 0]] - ht[self.pos[:, 1]]
        return float(np.sqrt((diff * diff).sum(axis=1) + _EPS).mean())


def _check_labels(kg_pair: KgPair, labels) -> list[tuple[int, int]]:
    pairs = sorted({(int(s), int(t)) for s, t in (getattr(x, "pair", x) for x in labels)})
    if not pairs:
        raise DataError("cannot train a matcher without labels")
    for s, t in pairs:
        if not (0 <= s < kg_pair.source.num_entities and 0 <= t < kg_pair.target.num_entities):
            raise DataError(f"label ({s}, {t}) references an unknown entity")
    return pairs


class EmbeddingMatcher:
    """``score(e, e') = -||h(e) - h(e')||`` after :meth:`train`."""

    def __init__(self, cfg: Optional[MatcherConfig] = None):
        self.cfg = cfg or MatcherConfig()
        self.src_emb: Optional[np.ndarray] = None
        self.tgt_emb: Optional[np.ndarray] = None
        self.loss_history: list[float] = []
        self.initial_pos_distance = math.nan
        self.final_pos_distance = math.nan

    def train(self, kg_pair: KgPair, labels: Iterable) -> "EmbeddingMatcher":
        pairs = _check_labels(kg_pair, labels)
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        obj = _Objective(kg_pair, pairs, cfg)
        theta = rng.normal(0.0, 1.0 / math.sqrt(cfg.embedding_dim), size=(obj.n_params, cfg.embedding_dim))
        self.initial_pos_distance = obj.mean_positive_distance(theta)
        self.loss_history = []
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        for step in range(1, cfg.epochs + 1):
            neg_t, neg_s = obj.sample_negatives(rng)
            loss, grad = obj.loss_and_grad(theta, neg_t, neg_s)
            if cfg.optimizer == "sgd":
                theta -= cfg.learning_rate * grad
            else:
                m = _ADAM_B1 * m + (1 - _ADAM_B1) * grad
                v = _ADAM_B2 * v + (1 - _ADAM_B2) * grad * grad
                m_hat = m / (1 - _ADAM_B1**step)
                v_hat = v / (1 - _ADAM_B2**step)
                theta -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
            self.loss_history.append(loss)
        self.final_pos_distance = obj.mean_positive_distance(theta)
        self.src_emb, self.tgt_emb = obj.embeddings(theta)
        return self

    def _ready(self) -> tuple[np.ndarray, np.ndarray]:
        if self.src_emb is None or self.tgt_emb is None:
            raise ConfigError("matcher has not been trained")
        return self.src_emb, self.tgt_emb

    def score(self, e: int, e2: int) -> float:
        hs, ht = self._ready()
        diff = hs[e] - ht[e2]
        return -float(np.sqrt(diff @ diff + _EPS))

    def score_block(self, rows: slice) -> np.ndarray:
        hs, ht = self._ready()
        a = hs[rows]
        sq = (a * a).sum(1)[:, None] + (ht * ht).sum(1)[None, :] - 2.0 * a @ ht.T
        return -np.sqrt(np.maximum(sq, 0.0) + _EPS)

    def score_matrix(self) -> np.ndarray:
        hs, _ = self._ready()
        return self.score_block(slice(0, len(hs)))

    def iter_blocks(self) -> Iterator[tuple[int, np.ndarray]]:
        hs, _ = self._ready()
        for start in range(0, len(hs), _BLOCK):
            yield start, self.score_block(slice(start, start + _BLOCK))

    def dump_embeddings(self, path: str) -> None:
        """Text header line, then little-endian float32 rows (sources, then targets)."""
        hs, ht = self._ready()
        with open(path, "wb") as f:
            f.write(f"kgalign-emb n_source={len(hs)} n_target={len(ht)} dim={hs.shape[1]} dtype=<f4\n".encode())
            f.write(np.vstack([hs, ht]).astype("<f4").tobytes())

    def write_topk_csv(self, path: str, k: int = 10) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("source_id,rank,target_id,score\n")
            for start, block in self.iter_blocks():
                order = np.argsort(-block, axis=1, kind="stable")[:, :k]
                for i, row in enumerate(order):
                    for rank, t in enumerate(row, start=1):
                        f.write(f"{start + i},{rank},{int(t)},{block[i, t]!r}\n")


def load_embeddings(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        header = f.readline().decode().split()
        fields = dict(x.split("=") for x in header[1:])
        n_s, n_t, dim = int(fields["n_source"]), int(fields["n_target"]), int(fields["dim"])
        data = np.frombuffer(f.read(), dtype="<f4").reshape(n_s + n_t, dim)
    return data[:n_s], data[n_s:]


def _blocks(scores) -> Iterator[tuple[int, np.ndarray]]:
    if isinstance(scores, np.ndarray):
        yield 0, scores
    else:
        yield from scores.iter_blocks()


def confident_pairs(scores) -> set[tuple[int, int]]:
    """Mutual best matches; argmax ties go to the smaller id.

    ``scores`` is a trained matcher or a dense ``(|E|, |E'|)`` score matrix.
    """
    row_best = []
    col_best_val = None
    col_best_idx = None
    for start, block in _blocks(scores):
        row_best.append(np.argmax(block, axis=1))
        arg = np.argmax(block, axis=0)
        val = block[arg, np.arange(block.shape[1])]
        if col_best_val is None:
            col_best_val, col_best_idx = val, arg + start
        else:
            better = val > col_best_val  # strict: earlier (smaller) source wins ties
            col_best_val = np.where(better, val, col_best_val)
            col_best_idx = np.where(better, arg + start, col_best_idx)
    if col_best_idx is None:
        return set()
    rb = np.concatenate(row_best)
    return {(int(s), int(t)) for s, t in enumerate(rb) if col_best_idx[t] == s}


@dataclass(frozen=True)
class EvalReport:
    hit1: float
    hit10: float
    mrr: float
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None


def _pessimistic_rank(row: np.ndarray, true_idx: int) -> int:
    # every other candidate scoring >= the true one is placed ahead of it
    return int((row >= row[true_idx]).sum())


def evaluate(scores, truth: Mapping[int, int]) -> EvalReport:
    """Hit@1, Hit@10 and MRR of the true counterpart, averaged over both directions."""
    if not truth:
        raise DataError("truth is empty")
    if isinstance(scores, np.ndarray):
        n_s, n_t = scores.shape
    else:
        hs, ht = scores._ready()
        n_s, n_t = len(hs), len(ht)
    for s, t in truth.items():
        if not (0 <= s < n_s and 0 <= t < n_t):
            raise DataError(f"truth pair ({s}, {t}) references an unknown entity")
    by_source = {}
    col_needed = {t: s for s, t in truth.items()}
    cols = sorted(col_needed)
    col_scores = np.empty((n_s, len(cols)))
    for start, block in _blocks(scores):
        for i in range(block.shape[0]):
            s = start + i
            if s in truth:
                by_source[s] = _pessimistic_rank(block[i], truth[s])
        col_scores[start : start + block.shape[0]] = block[:, cols]
    ranks_fwd = [by_source[s] for s in sorted(truth)]
    ranks_bwd = [_pessimistic_rank(col_scores[:, j], col_needed[t]) for j, t in enumerate(cols)]
    return EvalReport(*_metrics(ranks_fwd, ranks_bwd))


def _metrics(ranks_fwd: list[int], ranks_bwd: list[int]) -> tuple[float, float, float]:
    # correctly rounded sums keep the metrics independent of summation order
    def one(ranks):
        k = len(ranks)
        hit1 = sum(1 for r in ranks if r <= 1)
        hit10 = sum(1 for r in ranks if r <= 10)
        return hit1 / k, hit10 / k, math.fsum(1.0 / r for r in ranks) / k

    f, b = one(ranks_fwd), one(ranks_bwd)
    return tuple((x + y) / 2.0 for x, y in zip(f, b))


def evaluate_confident(
    pairs: Iterable[tuple[int, int]], truth: Mapping[int, int]
) -> tuple[Optional[float], float, Optional[float]]:
    """``(precision, recall, F1)``; precision and F1 are ``None`` when undefined."""
    pairs = set(pairs)
    truth_pairs = set(truth.items())
    hit = len(pairs & truth_pairs)
    precision = hit / len(pairs) if pairs else None
    recall = hit / len(truth_pairs) if truth_pairs else 0.0
    # 2PR / (P + R) simplifies to 2 hits / (|pairs| + |truth|), one rounding only
    f1 = None if precision is None else 2 * hit / (len(pairs) + len(truth_pairs))
    return precision, recall, f1


def train_matcher(cfg: MatcherConfig, kg_pair: KgPair, labels: Iterable) -> EmbeddingMatcher:
    return EmbeddingMatcher(cfg).train(kg_pair, labels)
