"""Knowledge graph containers, OpenEA loading and relation functionality.

Entities and relations are dense integer handles. When reverse relations are
enabled, every relation ``r`` (id ``i``) gets a synthetic inverse ``r^-1`` with
id ``i + num_relations`` so that incoming edges take part in neighbourhood
sums and in probability propagation exactly like outgoing ones.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence
from urllib.parse import quote, unquote

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

REL_TRIPLES_1 = "rel_triples_1"
REL_TRIPLES_2 = "rel_triples_2"
ENT_LINKS = "ent_links"

INVERSE_SUFFIX = "^-1"


class KnowledgeGraph:
    """Entities, relations and deduplicated relation triples of one KG.

    :param entity_names: surface name per entity id.
    :param relation_names: label per relation id.
    :param triples: ``(head, relation, tail)`` id triples. Duplicates are
        dropped (first occurrence wins) and counted in ``duplicates_dropped``.
    :param reverse_relations: materialise inverse relations for traversal.
    :param entity_uris: optional full URIs, used when writing OpenEA files.
    :param relation_uris: optional full relation URIs.
    """

    def __init__(
        self,
        entity_names: Sequence[str],
        relation_names: Sequence[str],
        triples: Iterable[tuple[int, int, int]],
        reverse_relations: bool = True,
        entity_uris: Optional[Sequence[str]] = None,
        relation_uris: Optional[Sequence[str]] = None,
    ):
        self.entity_names = list(entity_names)
        self.relation_names = list(relation_names)
        self.entity_uris = list(entity_uris) if entity_uris is not None else None
        self.relation_uris = list(relation_uris) if relation_uris is not None else None
        self.reverse_relations = reverse_relations
        for i, name in enumerate(self.entity_names):
            if not name:
                raise DataError(f"entity {i} has an empty name")

        n_ent, n_rel = len(self.entity_names), len(self.relation_names)
        seen: set[tuple[int, int, int]] = set()
        ordered = []
        dropped = 0
        for h, r, t in triples:
            h, r, t = int(h), int(r), int(t)
            if not (0 <= h < n_ent and 0 <= t < n_ent):
                raise DataError(f"triple ({h}, {r}, {t}) references an unknown entity")
            if not 0 <= r < n_rel:
                raise DataError(f"triple ({h}, {r}, {t}) references an unknown relation")
            if (h, r, t) in seen:
                dropped += 1
                continue
            seen.add((h, r, t))
            ordered.append((h, r, t))
        self.duplicates_dropped = dropped
        self.triples = np.asarray(ordered, dtype=np.int64).reshape(-1, 3)

        self._fun = np.full(n_rel, np.nan)
        self._inv_fun = np.full(n_rel, np.nan)
        self._rel_count = np.zeros(n_rel, dtype=np.int64)
        self._compute_functionality()

        # Functionality per traversal relation id; inverse relations reuse the
        # forward cache: F(r^-1) = F^-1(r).
        if reverse_relations:
            self.functionality_all = np.concatenate([self._fun, self._inv_fun])
            self.inv_functionality_all = np.concatenate([self._inv_fun, self._fun])
        else:
            self.functionality_all = self._fun.copy()
            self.inv_functionality_all = self._inv_fun.copy()

        self._out: list[list[tuple[int, int]]] = [[] for _ in range(n_ent)]
        self._in: list[list[tuple[int, int]]] = [[] for _ in range(n_ent)]
        for h, r, t in ordered:
            self._out[h].append((r, t))
            self._in[t].append((r, h))
            if reverse_relations:
                self._out[t].append((r + n_rel, h))
                self._in[h].append((r + n_rel, t))
        for lst in self._out:
            lst.sort()
        for lst in self._in:
            lst.sort()

    def _compute_functionality(self) -> None:
        if len(self.triples) == 0:
            return
        rels = self.triples[:, 1]
        n_rel = self.num_relations
        self._rel_count = np.bincount(rels, minlength=n_rel)
        heads = np.unique(self.triples[:, [1, 0]], axis=0)
        tails = np.unique(self.triples[:, [1, 2]], axis=0)
        n_heads = np.bincount(heads[:, 0], minlength=n_rel)
        n_tails = np.bincount(tails[:, 0], minlength=n_rel)
        has = self._rel_count > 0
        # triples are distinct, so the pair count equals the triple count
        self._fun[has] = n_heads[has] / self._rel_count[has]
        self._inv_fun[has] = n_tails[has] / self._rel_count[has]

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        """Number of base relations (excluding materialised inverses)."""
        return len(self.relation_names)

    @property
    def num_relations_total(self) -> int:
        return self.num_relations * (2 if self.reverse_relations else 1)

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    def _check_entity(self, e: int) -> None:
        if not (isinstance(e, (int, np.integer)) and 0 <= e < self.num_entities):
            raise DataError(f"invalid entity handle {e!r}")

    def _check_relation(self, r: int) -> None:
        if not (isinstance(r, (int, np.integer)) and 0 <= r < self.num_relations_total):
            raise DataError(f"invalid relation handle {r!r}")

    def is_inverse(self, r: int) -> bool:
        return r >= self.num_relations

    def base_relation(self, r: int) -> int:
        return r - self.num_relations if r >= self.num_relations else r

    def relation_label(self, r: int) -> str:
        if r >= self.num_relations:
            return self.relation_names[r - self.num_relations] + INVERSE_SUFFIX
        return self.relation_names[r]

    def relation_size(self, r: int) -> int:
        self._check_relation(r)
        return int(self._rel_count[self.base_relation(r)])

    def functionality(self, r: int) -> float:
        """Distinct heads over distinct (head, tail) pairs of ``r``."""
        self._check_relation(r)
        value = self.functionality_all[r]
        if np.isnan(value):
            raise DataError(f"relation {self.relation_label(r)!r} has no triples; functionality undefined")
        return float(value)

    def inverse_functionality(self, r: int) -> float:
        """Distinct tails over distinct (head, tail) pairs of ``r``."""
        self._check_relation(r)
        value = self.inv_functionality_all[r]
        if np.isnan(value):
            raise DataError(f"relation {self.relation_label(r)!r} has no triples; functionality undefined")
        return float(value)

    def neighbors_out(self, e: int) -> list[tuple[int, int]]:
        """``(relation, tail)`` for every traversal edge leaving ``e``, sorted."""
        self._check_entity(e)
        return list(self._out[e])

    def neighbors_in(self, e: int) -> list[tuple[int, int]]:
        """``(relation, head)`` for every traversal edge entering ``e``, sorted."""
        self._check_entity(e)
        return list(self._in[e])

    # Unchecked views for the hot loops in reasoning/selection.
    @property
    def out_index(self) -> list[list[tuple[int, int]]]:
        return self._out

    @property
    def in_index(self) -> list[list[tuple[int, int]]]:
        return self._in

    def degree(self, e: int) -> int:
        """Number of traversal edges leaving ``e`` (in + out when inverses are on)."""
        self._check_entity(e)
        return len(self._out[e])

    def triples_of(self, r: int) -> np.ndarray:
        """Base triples of relation ``r`` (inverse ids return swapped triples)."""
        self._check_relation(r)
        base = self.base_relation(r)
        sel = self.triples[self.triples[:, 1] == base]
        if r != base:
            sel = sel[:, [2, 1, 0]].copy()
            sel[:, 1] = r
        return sel

    def entity_uri(self, e: int) -> str:
        if self.entity_uris is not None:
            return self.entity_uris[e]
        return "http://kgalign.local/entity/" + quote(self.entity_names[e], safe="")

    def relation_uri(self, r: int) -> str:
        if self.relation_uris is not None:
            return self.relation_uris[r]
        return "http://kgalign.local/relation/" + quote(self.relation_names[r], safe="")

    def entity_ids_by_name(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.entity_names)}

    def __repr__(self) -> str:
        return (
            f"KnowledgeGraph(entities={self.num_entities}, relations={self.num_relations}, "
            f"triples={self.num_triples}, reverse_relations={self.reverse_relations})"
        )


@dataclass
class KgPair:
    """Source and target graphs plus the optional ground-truth alignment."""

    source: KnowledgeGraph
    target: KnowledgeGraph
    ground_truth: Optional[dict[int, int]] = None
    load_report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ground_truth is None:
            return
        for s, t in self.ground_truth.items():
            if not 0 <= s < self.source.num_entities:
                raise DataError(f"ground truth references unknown source entity {s}")
            if not 0 <= t < self.target.num_entities:
                raise DataError(f"ground truth references unknown target entity {t}")

    @property
    def truth_pairs(self) -> set[tuple[int, int]]:
        return set(self.ground_truth.items()) if self.ground_truth else set()

    def swapped(self) -> "KgPair":
        """The same pair with source and target exchanged."""
        truth = None
        if self.ground_truth is not None:
            truth = {t: s for s, t in self.ground_truth.items()}
        return KgPair(self.target, self.source, truth)


def entity_name_from_uri(uri: str) -> str:
    """Last path segment of ``uri``, percent-decoded; the URI itself if that is empty."""
    tail = uri.rstrip("/").rsplit("/", 1)[-1]
    name = unquote(tail)
    return name or uri


def _read_tsv(path: str, arity: int) -> list[tuple[int, list[str]]]:
    if not os.path.isfile(path):
        raise DataError(f"missing file: {path}")
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != arity:
                raise DataError(
                    f"{os.path.basename(path)}:{lineno}: expected {arity} tab-separated fields, got {len(fields)}"
                )
            rows.append((lineno, fields))
    return rows


def _graph_from_rows(rows, reverse_relations: bool) -> tuple[KnowledgeGraph, dict[str, int]]:
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    triples = []
    for _, (h, r, t) in rows:
        hid = ent_ids.setdefault(h, len(ent_ids))
        rid = rel_ids.setdefault(r, len(rel_ids))
        tid = ent_ids.setdefault(t, len(ent_ids))
        triples.append((hid, rid, tid))
    ent_uris = list(ent_ids)
    rel_uris = list(rel_ids)
    kg = KnowledgeGraph(
        [entity_name_from_uri(u) for u in ent_uris],
        [entity_name_from_uri(u) for u in rel_uris],
        triples,
        reverse_relations=reverse_relations,
        entity_uris=ent_uris,
        relation_uris=rel_uris,
    )
    return kg, ent_ids


def load_openea(dir_path: str, reverse_relations: bool = True) -> KgPair:
    """Load an OpenEA-style directory (``rel_triples_1``, ``rel_triples_2``, ``ent_links``).

    Ids are assigned densely in first-seen order. Raises :class:`DataError` on a
    missing file, a line with the wrong number of fields, or a link that refers
    to an entity absent from the triples.
    """
    rows1 = _read_tsv(os.path.join(dir_path, REL_TRIPLES_1), 3)
    rows2 = _read_tsv(os.path.join(dir_path, REL_TRIPLES_2), 3)
    links = _read_tsv(os.path.join(dir_path, ENT_LINKS), 2)
    source, ids1 = _graph_from_rows(rows1, reverse_relations)
    target, ids2 = _graph_from_rows(rows2, reverse_relations)

    truth: dict[int, int] = {}
    for lineno, (u1, u2) in links:
        if u1 not in ids1:
            raise DataError(f"{ENT_LINKS}:{lineno}: source entity {u1!r} does not occur in {REL_TRIPLES_1}")
        if u2 not in ids2:
            raise DataError(f"{ENT_LINKS}:{lineno}: target entity {u2!r} does not occur in {REL_TRIPLES_2}")
        s, t = ids1[u1], ids2[u2]
        if truth.get(s, t) != t:
            raise DataError(f"{ENT_LINKS}:{lineno}: source entity {u1!r} is linked twice")
        truth[s] = t

    report = {
        "source_duplicates": source.duplicates_dropped,
        "target_duplicates": target.duplicates_dropped,
    }
    if source.duplicates_dropped or target.duplicates_dropped:
        logger.info("dropped duplicate triples: %s", report)
    return KgPair(source, target, truth, load_report=report)


def _write_triples(kg: KnowledgeGraph, path: str) -> set[int]:
    used = set()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for h, r, t in kg.triples:
            f.write(f"{kg.entity_uri(h)}\t{kg.relation_uri(r)}\t{kg.entity_uri(t)}\n")
            used.add(int(h))
            used.add(int(t))
    return used


def save_openea(pair: KgPair, dir_path: str) -> None:
    """Write ``pair`` in OpenEA format.

    Entities without any triple cannot be represented in the format, so links
    touching them are skipped (and logged).
    """
    os.makedirs(dir_path, exist_ok=True)
    used1 = _write_triples(pair.source, os.path.join(dir_path, REL_TRIPLES_1))
    used2 = _write_triples(pair.target, os.path.join(dir_path, REL_TRIPLES_2))
    skipped = 0
    with open(os.path.join(dir_path, ENT_LINKS), "w", encoding="utf-8", newline="\n") as f:
        for s, t in sorted((pair.ground_truth or {}).items()):
            if s not in used1 or t not in used2:
                skipped += 1
                continue
            f.write(f"{pair.source.entity_uri(s)}\t{pair.target.entity_uri(t)}\n")
    if skipped:
        logger.info("skipped %d links whose entities have no triples", skipped)


def functionality_table(kg: KnowledgeGraph) -> Mapping[str, tuple[float, float, int]]:
    """``relation label -> (F, F^-1, #triples)`` for base relations with triples."""
    out = {}
    for r in range(kg.num_relations):
        if kg.relation_size(r):
            out[kg.relation_names[r]] = (kg.functionality(r), kg.inverse_functionality(r), kg.relation_size(r))
    return out
