"""Triple store: file loading, adjacency indexing, filtered-evaluation sets."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from kgpath.errors import GraphIndexError, ParseError
from kgpath.vocab import N_SPECIAL, Vocabulary, _iter_lines


class Triple(NamedTuple):
    """(head, relation, tail) as vocabulary token ids."""

    h: int
    r: int
    t: int


def load_triples(path, vocab=None):
    """Load a triple file and return (triples, vocab).

    Each nonempty line is ``head<TAB>relation<TAB>tail``. With a vocab
    given, every name must already resolve in it; without one, a fresh
    vocabulary is built from this file alone.
    """
    rows = []
    for lineno, line in enumerate(_iter_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(
                f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
            )
        rows.append(parts)
    if vocab is None:
        entities = {h for h, _, _ in rows} | {t for _, _, t in rows}
        relations = {r for _, r, _ in rows}
        vocab = Vocabulary(entities, relations)
    triples = [
        Triple(vocab.entity_id(h), vocab.relation_id(r), vocab.entity_id(t))
        for h, r, t in rows
    ]
    return triples, vocab


def triples_to_array(triples):
    """(N, 3) int32 array of (h, r, t) rows."""
    arr = np.asarray(triples, dtype=np.int32)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    return arr


@dataclass(frozen=True)
class KnowledgeGraph:
    """Adjacency-indexed triple set in CSR form, keyed by entity token id.

    out arrays hold (relation, tail) per head, sorted by (r, t);
    in arrays hold (head, relation) per tail, sorted by (r, h).
    Offsets have length ``N_SPECIAL + n_entities + 1`` so entity token
    ids index them directly.
    """

    n_entities: int
    triples: np.ndarray  # (N, 3) int32, file order
    out_offsets: np.ndarray
    out_rel: np.ndarray
    out_tgt: np.ndarray
    in_offsets: np.ndarray
    in_src: np.ndarray
    in_rel: np.ndarray

    @property
    def n_triples(self):
        return len(self.triples)

    def out_edges(self, entity):
        """(r, t) pairs leaving an entity, as an (k, 2) array."""
        lo, hi = self.out_offsets[entity], self.out_offsets[entity + 1]
        return np.stack([self.out_rel[lo:hi], self.out_tgt[lo:hi]], axis=1)

    def in_edges(self, entity):
        """(h, r) pairs entering an entity, as an (k, 2) array."""
        lo, hi = self.in_offsets[entity], self.in_offsets[entity + 1]
        return np.stack([self.in_src[lo:hi], self.in_rel[lo:hi]], axis=1)

    def out_degrees(self):
        return np.diff(self.out_offsets)

    def in_degrees(self):
        return np.diff(self.in_offsets)


def index_graph(triples, n_entities):
    """Build the CSR adjacency for a triple list.

    Neighbor lists are sorted by (relation id, neighbor id), which fixes
    the enumeration order used downstream.
    """
    arr = triples_to_array(triples)
    lo, hi = N_SPECIAL, N_SPECIAL + n_entities
    if arr.size:
        if arr[:, 0].min() < lo or arr[:, 0].max() >= hi:
            raise GraphIndexError("head entity id out of range")
        if arr[:, 2].min() < lo or arr[:, 2].max() >= hi:
            raise GraphIndexError("tail entity id out of range")
        if arr[:, 1].min() < N_SPECIAL:
            raise GraphIndexError("relation id out of range")

    size = N_SPECIAL + n_entities

    # out: group by head, order by (r, t)
    order = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0]))
    srt = arr[order]
    out_offsets = np.zeros(size + 1, dtype=np.int64)
    np.add.at(out_offsets, srt[:, 0] + 1, 1)
    np.cumsum(out_offsets, out=out_offsets)
    out_rel = np.ascontiguousarray(srt[:, 1])
    out_tgt = np.ascontiguousarray(srt[:, 2])

    # in: group by tail, order by (r, h)
    order = np.lexsort((arr[:, 0], arr[:, 1], arr[:, 2]))
    srt = arr[order]
    in_offsets = np.zeros(size + 1, dtype=np.int64)
    np.add.at(in_offsets, srt[:, 2] + 1, 1)
    np.cumsum(in_offsets, out=in_offsets)
    in_src = np.ascontiguousarray(srt[:, 0])
    in_rel = np.ascontiguousarray(srt[:, 1])

    return KnowledgeGraph(
        n_entities=n_entities,
        triples=arr,
        out_offsets=out_offsets,
        out_rel=out_rel,
        out_tgt=out_tgt,
        in_offsets=in_offsets,
        in_src=in_src,
        in_rel=in_rel,
    )


@dataclass(frozen=True)
class FilterIndex:
    """Known-true competitor sets over train + valid + test.

    tail_filter[(h, r)] holds every t with (h, r, t) true anywhere;
    head_filter[(r, t)] and rel_filter[(h, t)] likewise.
    """

    tail_filter: dict
    head_filter: dict
    rel_filter: dict


def build_filter_index(train, valid, test):
    """Union the three splits into deduplicated filter sets."""
    tail, head, rel = {}, {}, {}
    for split in (train, valid, test):
        for h, r, t in split:
            tail.setdefault((h, r), set()).add(t)
            head.setdefault((r, t), set()).add(h)
            rel.setdefault((h, t), set()).add(r)
    return FilterIndex(tail_filter=tail, head_filter=head, rel_filter=rel)
