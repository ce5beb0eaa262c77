"""Two-step relation path (quadruple) counting, enumeration, and sampling.

A quadruple (h, r1, r2, t) is witnessed by a middle entity m with
(h, r1, m) and (m, r2, t) both present. Enumeration emits one quadruple
per witness, ordered by middle entity, then in-edge order, then
out-edge order; counting is the degree product sum over middle
entities and never materializes anything.

The inner loops are numba kernels with vectorized numpy fallbacks; see
kgpath._backend for how the variant is selected.
"""

from typing import NamedTuple

import numpy as np

from kgpath._backend import HAS_NUMBA, use_numba
from kgpath._rng import splitmix64
from kgpath.errors import ParseError, VocabularyError
from kgpath.kg import index_graph
from kgpath.vocab import N_SPECIAL

FORWARD_ONLY = "forward_only"
WITH_INVERSE = "with_inverse"
MODES = (FORWARD_ONLY, WITH_INVERSE)

# chunk budget for streaming enumeration, in quadruples
DEFAULT_CHUNK = 1 << 20


class Quadruple(NamedTuple):
    """(h, r1, r2, t) as token ids; the middle entity is dropped."""

    h: int
    r1: int
    r2: int
    t: int


def _check_mode(mode, n_relations):
    if mode not in MODES:
        raise ValueError(f"unknown extraction mode: {mode!r}")
    if mode == WITH_INVERSE and n_relations is None:
        raise ValueError("with_inverse mode needs n_relations for reversed ids")


def graph_for_mode(kg, mode, n_relations=None):
    """The graph whose 2-step paths we enumerate under the given mode.

    forward_only returns kg unchanged. with_inverse adds, for every
    triple (h, r, t), a reverse edge t -> h labeled r + n_relations, so
    reversed relation ids map 1:1 onto the originals.
    """
    _check_mode(mode, n_relations)
    if mode == FORWARD_ONLY:
        return kg
    fwd = kg.triples
    rev = np.empty_like(fwd)
    rev[:, 0] = fwd[:, 2]
    rev[:, 1] = fwd[:, 1] + np.int32(n_relations)
    rev[:, 2] = fwd[:, 0]
    return index_graph(np.concatenate([fwd, rev]), kg.n_entities)


def count_quadruples(kg, mode=FORWARD_ONLY, n_relations=None):
    """Exact quadruple count: sum over m of in_degree(m) * out_degree(m).

    Computed in arbitrary-precision integers; parallel edges count with
    multiplicity, matching enumeration.
    """
    g = graph_for_mode(kg, mode, n_relations)
    ind = g.in_degrees().tolist()
    outd = g.out_degrees().tolist()
    return sum(a * b for a, b in zip(ind, outd) if a and b)


def _chunk_bounds(g, chunk_size):
    """Split the entity id range so each chunk holds <= chunk_size quads.

    A single middle entity whose degree product exceeds the budget gets
    a chunk of its own.
    """
    products = g.in_degrees().astype(np.int64) * g.out_degrees().astype(np.int64)
    bounds = [N_SPECIAL]
    acc = 0
    for m in range(N_SPECIAL, N_SPECIAL + g.n_entities):
        p = int(products[m])
        if acc and acc + p > chunk_size:
            bounds.append(m)
            acc = 0
        acc += p
    bounds.append(N_SPECIAL + g.n_entities)
    return bounds, products


def iter_quadruple_chunks(kg, mode=FORWARD_ONLY, n_relations=None, chunk_size=DEFAULT_CHUNK):
    """Yield (n, 4) int32 arrays covering the full enumeration in order."""
    g = graph_for_mode(kg, mode, n_relations)
    bounds, products = _chunk_bounds(g, chunk_size)
    enum = _enumerate_range_numba if use_numba() else _enumerate_range_numpy
    for m0, m1 in zip(bounds[:-1], bounds[1:]):
        n = int(products[m0:m1].sum())
        if n == 0:
            continue
        out = np.empty((n, 4), dtype=np.int32)
        written = enum(
            g.in_offsets, g.in_src, g.in_rel,
            g.out_offsets, g.out_rel, g.out_tgt,
            m0, m1, out,
        )
        assert written == n
        yield out


def enumerate_quadruples(kg, mode=FORWARD_ONLY, n_relations=None):
    """Stream every quadruple exactly once per witness, in deterministic order."""
    for chunk in iter_quadruple_chunks(kg, mode, n_relations):
        for h, r1, r2, t in chunk.tolist():
            yield Quadruple(h, r1, r2, t)


def sample_quadruples_array(kg, mode, k, seed, n_relations=None):
    """Uniform sample without replacement, as a (min(k, total), 4) array.

    Single-pass reservoir over the enumeration stream; the i-th random
    draw is a pure function of (seed, i), so the sample is identical
    under either kernel backend and any chunking.
    """
    if k < 0:
        raise ValueError("sample size must be >= 0")
    g = graph_for_mode(kg, mode, n_relations)
    total = count_quadruples(g)
    size = min(k, total)
    res = np.empty((size, 4), dtype=np.int32)
    if size == 0:
        return res
    if use_numba():
        _reservoir_numba(
            g.in_offsets, g.in_src, g.in_rel,
            g.out_offsets, g.out_rel, g.out_tgt,
            np.uint64(seed), res,
        )
    else:
        _reservoir_numpy(g, np.uint64(seed), res)
    return res


def sample_quadruples(kg, mode, k, seed, n_relations=None):
    """List-of-Quadruple wrapper over sample_quadruples_array."""
    arr = sample_quadruples_array(kg, mode, k, seed, n_relations)
    return [Quadruple(*row) for row in arr.tolist()]


# ---------------------------------------------------------------------------
# file round-trip

def relation_name(vocab, rel_id, n_relations=None):
    """Surface name of a relation id; reversed ids get a "~" prefix."""
    _, rel_hi = vocab.relation_range
    if rel_id >= rel_hi:
        return "~" + vocab.name(rel_id - vocab.n_relations)
    return vocab.name(rel_id)


def _relation_id_from_name(vocab, name):
    if name.startswith("~"):
        return vocab.relation_id(name[1:]) + vocab.n_relations
    return vocab.relation_id(name)


def write_quadruples(path, chunks, vocab):
    """Write quadruple chunks as ``h<TAB>r1<TAB>r2<TAB>t`` name lines.

    Returns the number of lines written.
    """
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for chunk in chunks:
            if not len(chunk):
                continue
            lines = []
            for h, r1, r2, t in chunk.tolist():
                lines.append(
                    f"{vocab.name(h)}\t{relation_name(vocab, r1)}"
                    f"\t{relation_name(vocab, r2)}\t{vocab.name(t)}"
                )
            f.write("\n".join(lines))
            f.write("\n")
            n += len(chunk)
    return n


def read_quadruples(path, vocab):
    """Parse a quadruple name file back into an (n, 4) int32 id array."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="\n") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}"
                )
            h, r1, r2, t = parts
            try:
                rows.append(
                    (
                        vocab.entity_id(h),
                        _relation_id_from_name(vocab, r1),
                        _relation_id_from_name(vocab, r2),
                        vocab.entity_id(t),
                    )
                )
            except VocabularyError as exc:
                raise VocabularyError(f"{path}:{lineno}: {exc}") from None
    arr = np.asarray(rows, dtype=np.int32)
    if arr.size == 0:
        arr = arr.reshape(0, 4)
    return arr


# ---------------------------------------------------------------------------
# kernels: numpy fallback

def _enumerate_range_numpy(in_offsets, in_src, in_rel, out_offsets, out_rel, out_tgt,
                           m0, m1, out):
    """Vectorized enumeration of middle entities in [m0, m1) into out."""
    ki = (in_offsets[m0 + 1:m1 + 1] - in_offsets[m0:m1]).astype(np.int64)
    ko = (out_offsets[m0 + 1:m1 + 1] - out_offsets[m0:m1]).astype(np.int64)
    counts = ki * ko
    active = counts > 0
    if not active.any():
        return 0
    ms = np.arange(m0, m1, dtype=np.int64)[active]
    ki, ko, counts = ki[active], ko[active], counts[active]
    n = int(counts.sum())

    # row -> middle-entity group, and position within the group
    group = np.repeat(np.arange(len(ms)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(n, dtype=np.int64) - starts[group]

    in_idx = in_offsets[ms][group] + pos // ko[group]
    out_idx = out_offsets[ms][group] + pos % ko[group]
    out[:n, 0] = in_src[in_idx]
    out[:n, 1] = in_rel[in_idx]
    out[:n, 2] = out_rel[out_idx]
    out[:n, 3] = out_tgt[out_idx]
    return n


def _reservoir_numpy(g, seed, res):
    """Chunked reservoir: for each slot the last hitting stream index wins."""
    k = len(res)
    i0 = 0
    for chunk in iter_quadruple_chunks_of(g):
        n = len(chunk)
        idx = np.arange(i0, i0 + n, dtype=np.uint64)
        if i0 < k:
            take = min(k - i0, n)
            res[i0:i0 + take] = chunk[:take]
        tail = idx >= np.uint64(k)
        if tail.any():
            ii = idx[tail]
            j = splitmix64(seed, ii) % (ii + np.uint64(1))
            hit = j < np.uint64(k)
            if hit.any():
                slots = j[hit].astype(np.int64)
                rows = chunk[tail][hit]
                # last write per slot wins: scan reversed, keep first
                uniq, first = np.unique(slots[::-1], return_index=True)
                res[uniq] = rows[::-1][first]
        i0 += n
    return k


def iter_quadruple_chunks_of(g, chunk_size=DEFAULT_CHUNK):
    """Chunk iterator over an already mode-resolved graph."""
    bounds, products = _chunk_bounds(g, chunk_size)
    for m0, m1 in zip(bounds[:-1], bounds[1:]):
        n = int(products[m0:m1].sum())
        if n == 0:
            continue
        out = np.empty((n, 4), dtype=np.int32)
        _enumerate_range_numpy(
            g.in_offsets, g.in_src, g.in_rel,
            g.out_offsets, g.out_rel, g.out_tgt,
            m0, m1, out,
        )
        yield out


# ---------------------------------------------------------------------------
# kernels: numba

if HAS_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _mix64(seed, counter):
        z = seed + (counter + np.uint64(1)) * np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    @njit(cache=True)
    def _enumerate_range_numba(in_offsets, in_src, in_rel, out_offsets, out_rel,
                               out_tgt, m0, m1, out):
        n = 0
        for m in range(m0, m1):
            for j in range(in_offsets[m], in_offsets[m + 1]):
                h = in_src[j]
                r1 = in_rel[j]
                for l in range(out_offsets[m], out_offsets[m + 1]):
                    out[n, 0] = h
                    out[n, 1] = r1
                    out[n, 2] = out_rel[l]
                    out[n, 3] = out_tgt[l]
                    n += 1
        return n

    @njit(cache=True)
    def _reservoir_kernel(in_offsets, in_src, in_rel, out_offsets, out_rel,
                          out_tgt, seed, res):
        k = np.uint64(len(res))
        i = np.uint64(0)
        n_ent = len(in_offsets) - 1
        for m in range(2, n_ent):
            for j in range(in_offsets[m], in_offsets[m + 1]):
                h = in_src[j]
                r1 = in_rel[j]
                for l in range(out_offsets[m], out_offsets[m + 1]):
                    if i < k:
                        slot = i
                    else:
                        jj = _mix64(seed, i) % (i + np.uint64(1))
                        slot = jj if jj < k else k
                    if slot < k:
                        s = np.int64(slot)
                        res[s, 0] = h
                        res[s, 1] = r1
                        res[s, 2] = out_rel[l]
                        res[s, 3] = out_tgt[l]
                    i += np.uint64(1)
        return i

    def _reservoir_numba(in_offsets, in_src, in_rel, out_offsets, out_rel,
                         out_tgt, seed, res):
        return _reservoir_kernel(
            in_offsets, in_src, in_rel, out_offsets, out_rel, out_tgt, seed, res
        )
else:  # pragma: no cover - exercised only without numba installed
    _enumerate_range_numba = _enumerate_range_numpy

    def _reservoir_numba(*args, **kwargs):
        raise RuntimeError("numba backend requested but numba is not installed")
