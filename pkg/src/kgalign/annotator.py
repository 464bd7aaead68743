"""Pseudo-label annotation: candidate filtering, prompts, backends and budget."""
from __future__ import annotations

import logging
import os
import random
import re
import time
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np
from rapidfuzz import process
from rapidfuzz.distance import Levenshtein

from .errors import BackendError, BudgetExhausted, ConfigError, DataError
from .kg import KgPair, KnowledgeGraph
from .refiner import PseudoLabel

log = logging.getLogger(__name__)

DEFAULT_K = 20
DEFAULT_API_KEY_ENV = "KGALIGN_API_KEY"
NEIGHBOR_SAMPLE = 3


def name_similarity(a: str, b: str) -> float:
    """``1 - lev(a, b) / max(|a|, |b|)`` on case-folded names."""
    return Levenshtein.normalized_similarity(a.casefold(), b.casefold())


@dataclass(frozen=True)
class CandidateList:
    source: int
    candidates: tuple[tuple[int, float], ...]

    @property
    def targets(self) -> list[int]:
        return [t for t, _ in self.candidates]

    def __len__(self) -> int:
        return len(self.candidates)


_folded: "weakref.WeakKeyDictionary[KnowledgeGraph, list[str]]" = weakref.WeakKeyDictionary()


def _folded_names(kg: KnowledgeGraph) -> list[str]:
    names = _folded.get(kg)
    if names is None:
        names = [n.casefold() for n in kg.entity_names]
        _folded[kg] = names
    return names


def filter_candidates(source: int, kg_pair: KgPair, k: int = DEFAULT_K) -> CandidateList:
    """The ``k`` target entities whose names are closest to the source's name."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    target = kg_pair.target
    if target.num_entities == 0:
        raise DataError("target graph has no entities")
    query = kg_pair.source.entity_names[source].casefold()
    sims = process.cdist([query], _folded_names(target), scorer=Levenshtein.normalized_similarity, dtype=np.float64)[0]
    # stable sort on -sim keeps ascending id among ties
    order = np.argsort(-sims, kind="stable")[:k]
    return CandidateList(source, tuple((int(t), float(sims[t])) for t in order))


def _render_triples(kg: KnowledgeGraph, e: int, rng: random.Random) -> list[str]:
    edges = kg.neighbors_out(e)
    picked = rng.sample(edges, min(NEIGHBOR_SAMPLE, len(edges)))
    lines = []
    for r, other in picked:
        if kg.is_inverse(r):
            h, rel, t = other, kg.relation_names[kg.base_relation(r)], e
        else:
            h, rel, t = e, kg.relation_names[r], other
        lines.append(f"({kg.entity_names[h]}, {rel}, {kg.entity_names[t]})")
    return lines


def build_prompt(source: int, candidates: CandidateList, kg_pair: KgPair, rng_seed: int) -> str:
    """Multiple-choice prompt with up to three sampled triples per entity."""
    rng = random.Random(rng_seed)
    src = kg_pair.source
    parts = [
        "Decide which candidate refers to the same real-world entity as the source entity.",
        "",
        f"Source entity: {src.entity_names[source]}",
        "Context:",
    ]
    parts.extend(_render_triples(src, source, rng))
    parts.append("")
    parts.append("Candidates:")
    for i, t in enumerate(candidates.targets, start=1):
        parts.append(f"{i}. {kg_pair.target.entity_names[t]}")
        parts.extend("   " + line for line in _render_triples(kg_pair.target, t, rng))
    parts.append("")
    parts.append("Answer with exactly one candidate number, or NONE if no candidate matches.")
    return "\n".join(parts) + "\n"


@dataclass
class Budget:
    """Query budget with an optional token ceiling; one annotate call is one query."""

    max_queries: int
    max_tokens: Optional[int] = None
    spent_queries: int = 0
    spent_tokens: int = 0

    def __post_init__(self):
        if self.max_queries < 0 or (self.max_tokens is not None and self.max_tokens < 0):
            raise ConfigError("budget limits must be non-negative")

    @property
    def remaining(self) -> int:
        return self.max_queries - self.spent_queries

    @property
    def exhausted(self) -> bool:
        if self.spent_queries >= self.max_queries:
            return True
        return self.max_tokens is not None and self.spent_tokens >= self.max_tokens

    def charge(self, tokens: int) -> None:
        self.spent_queries += 1
        self.spent_tokens += tokens


@dataclass(frozen=True)
class Annotation:
    source: int
    chosen: Optional[int]
    tokens_in: int
    tokens_out: int
    backend: str
    note: str = ""


@dataclass(frozen=True)
class Reply:
    chosen: Optional[int]
    tokens_in: int
    tokens_out: int
    note: str = ""


class Backend(Protocol):
    name: str

    def answer(self, source: int, candidates: CandidateList, prompt: str) -> Reply: ...


def _word_tokens(text: str) -> int:
    return len(text.split())


class OracleBackend:
    """Answers with the true counterpart when it is among the candidates."""

    name = "oracle"

    def __init__(self, truth: Mapping[int, int]):
        self.truth = dict(truth)

    def answer(self, source, candidates, prompt):
        t = self.truth.get(source)
        chosen = t if t is not None and t in candidates.targets else None
        return Reply(chosen, _word_tokens(prompt), 1)


class NoisyOracleBackend:
    """Right with probability ``p_true``; otherwise a uniformly random wrong candidate.

    When the truth is not offered, the correct answer is NONE, which is given
    with probability ``p_true``. A wrong answer that has no wrong candidate to
    point at degrades to NONE.
    """

    name = "noisy-oracle"

    def __init__(self, truth: Mapping[int, int], p_true: float, seed: int = 0):
        if not 0.0 <= p_true <= 1.0:
            raise ConfigError("p_true must lie in [0, 1]")
        self.truth = dict(truth)
        self.p_true = p_true
        self.rng = np.random.default_rng(seed)

    def answer(self, source, candidates, prompt):
        t = self.truth.get(source)
        targets = candidates.targets
        correct = self.rng.random() < self.p_true
        offered = t is not None and t in targets
        wrong = [c for c in targets if c != t]
        if correct:
            chosen = t if offered else None
        elif wrong:
            chosen = wrong[int(self.rng.integers(len(wrong)))]
        else:
            chosen = None
        return Reply(chosen, _word_tokens(prompt), 1)


_INT_RE = re.compile(r"^\d+$")


def parse_reply(text: str, candidates: CandidateList, target: KnowledgeGraph) -> tuple[Optional[int], str]:
    """Map a free-text reply to a candidate: an index, an exact name, or NONE."""
    reply = text.strip()
    if reply.upper() == "NONE":
        return None, ""
    targets = candidates.targets
    if _INT_RE.match(reply):
        i = int(reply)
        if 1 <= i <= len(targets):
            return targets[i - 1], ""
        return None, f"parse failure: index {i} out of range"
    for t in targets:
        if target.entity_names[t].strip() == reply:
            return t, ""
    return None, f"parse failure: {reply[:80]!r}"


class LlmBackend:
    """Chat-completion endpoint over HTTP.

    The bearer token is read from the environment variable ``api_key_env``.
    Transport errors, 429 and 5xx answers are retried ``retries`` times with
    exponential backoff before a :class:`BackendError` is raised.
    """

    name = "llm"

    def __init__(
        self,
        endpoint: str,
        model: str,
        target: KnowledgeGraph,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 60.0,
        parallelism: int = 4,
        client=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        import httpx

        if retries < 0 or parallelism < 1:
            raise ConfigError("retries must be >= 0 and parallelism >= 1")
        self.endpoint = endpoint
        self.model = model
        self.target = target
        self.api_key_env = api_key_env
        self.retries = retries
        self.backoff = backoff
        self.parallelism = parallelism
        self.client = client if client is not None else httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._httpx = httpx

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, prompt: str) -> dict:
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": "You align entities between two knowledge graphs."},
                {"role": "user", "content": prompt},
            ],
        }
        cause: Optional[BaseException] = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.endpoint, json=body, headers=self._headers())
            except self._httpx.TransportError as exc:
                cause = exc
                log.warning("annotation request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                cause = BackendError(f"HTTP {resp.status_code}")
                log.warning("annotation request got HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendError("endpoint returned invalid JSON") from exc
        raise BackendError(f"giving up after {self.retries + 1} attempts: {cause}") from cause

    def answer(self, source, candidates, prompt):
        data = self._post(prompt)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            return Reply(None, _word_tokens(prompt), 0, "parse failure: unexpected response shape")
        usage = data.get("usage") or {}
        t_in = int(usage.get("prompt_tokens", _word_tokens(prompt)))
        t_out = int(usage.get("completion_tokens", _word_tokens(text or "")))
        chosen, note = parse_reply(text or "", candidates, self.target)
        return Reply(chosen, t_in, t_out, note)


def annotate(
    backend: Backend,
    source: int,
    candidates: CandidateList,
    budget: Budget,
    kg_pair: KgPair,
    prompt_seed: int = 0,
) -> Annotation:
    """One query. Raises :class:`BudgetExhausted` when no budget is left."""
    if budget.exhausted:
        raise BudgetExhausted(f"budget exhausted ({budget.spent_queries}/{budget.max_queries} queries)")
    prompt = build_prompt(source, candidates, kg_pair, prompt_seed)
    reply = backend.answer(source, candidates, prompt)
    budget.charge(reply.tokens_in + reply.tokens_out)
    return Annotation(source, reply.chosen, reply.tokens_in, reply.tokens_out, backend.name, reply.note)


class LabelCache:
    """Tab-separated ``source_id, target_id or NONE, tokens`` file of past answers."""

    def __init__(self, path: str):
        self.path = path
        self.entries: dict[int, tuple[Optional[int], int]] = {}
        if os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                for lineno, line in enumerate(f, start=1):
                    fields = line.rstrip("\r\n").split("\t")
                    if fields == [""]:
                        continue
                    if len(fields) != 3:
                        raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
                    try:
                        chosen = None if fields[1] == "NONE" else int(fields[1])
                        self.entries[int(fields[0])] = (chosen, int(fields[2]))
                    except ValueError as exc:
                        raise DataError(f"{path}:{lineno}: {exc}") from exc

    def get(self, source: int) -> Optional[tuple[Optional[int], int]]:
        return self.entries.get(source)

    def add(self, ann: Annotation) -> None:
        tokens = ann.tokens_in + ann.tokens_out
        self.entries[ann.source] = (ann.chosen, tokens)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(f"{ann.source}\t{'NONE' if ann.chosen is None else ann.chosen}\t{tokens}\n")


@dataclass
class BatchResult:
    labels: list[PseudoLabel] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    skipped: int = 0
    error: Optional[BackendError] = None


def prompt_seed_for(seed: int, source: int) -> int:
    return seed * 1_000_003 + source


def annotate_batch(
    backend: Backend,
    sources: Sequence[int],
    kg_pair: KgPair,
    k: int,
    budget: Budget,
    seed: int = 0,
    cache: Optional[LabelCache] = None,
) -> BatchResult:
    """Annotate ``sources`` in order until the budget runs out.

    NONE answers give no label and duplicate labels are dropped. A backend
    failure stops the batch; the labels gathered so far are returned together
    with the error.
    """
    result = BatchResult()
    seen: set[tuple[int, int]] = set()
    parallel = max(1, getattr(backend, "parallelism", 1))
    i = 0
    while i < len(sources):
        if budget.exhausted:
            break
        # reserve at most what the query budget allows; tokens are checked per wave
        wave = list(sources[i : i + min(parallel, budget.remaining)])
        cands = [filter_candidates(s, kg_pair, k) for s in wave]
        anns, error = _answer_wave(backend, wave, cands, kg_pair, budget, seed, cache, parallel)
        for ann, cl in zip(anns, cands):
            result.annotations.append(ann)
            if ann.chosen is not None and ann.chosen in cl.targets:
                pair = (ann.source, ann.chosen)
                if pair not in seen:
                    seen.add(pair)
                    result.labels.append(PseudoLabel(*pair))
        if error is not None:
            result.error = error
            break
        i += len(wave)
    result.skipped = len(sources) - len(result.annotations)
    return result


def _answer_wave(backend, wave, cands, kg_pair, budget, seed, cache, parallel):
    pending = []
    out: list[Optional[Annotation]] = [None] * len(wave)
    for j, (s, cl) in enumerate(zip(wave, cands)):
        hit = cache.get(s) if cache is not None else None
        if hit is not None:
            chosen = hit[0] if hit[0] in cl.targets else None
            out[j] = Annotation(s, chosen, hit[1], 0, backend.name, "cached")
        else:
            pending.append(j)
    prompts = {j: build_prompt(wave[j], cands[j], kg_pair, prompt_seed_for(seed, wave[j])) for j in pending}
    if parallel > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = {j: pool.submit(backend.answer, wave[j], cands[j], prompts[j]) for j in pending}
            replies = {}
            first_error = None
            for j in pending:
                try:
                    replies[j] = futures[j].result()
                except BackendError as exc:
                    first_error = first_error or exc
    else:
        replies, first_error = {}, None
        for j in pending:
            try:
                replies[j] = backend.answer(wave[j], cands[j], prompts[j])
            except BackendError as exc:
                first_error = exc
                break
    # commit in request order, stopping at the first failure
    committed = []
    for j in range(len(wave)):
        if out[j] is None:
            if j not in replies:
                break
            r = replies[j]
            out[j] = Annotation(wave[j], r.chosen, r.tokens_in, r.tokens_out, backend.name, r.note)
            if cache is not None:
                cache.add(out[j])
        if budget.exhausted:
            break
        budget.charge(out[j].tokens_in + out[j].tokens_out)
        committed.append(out[j])
    if first_error is not None and len(committed) < len(wave):
        return committed, first_error
    return committed, None
