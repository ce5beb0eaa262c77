"""Shared toy graphs and independent oracles for the test suite.

Oracles here are deliberately naive re-implementations (full joins,
set scans, sorting) kept free of any package internals they check.
"""

import numpy as np

from kgpath.vocab import N_SPECIAL


def make_ids(n_entities, n_relations):
    """(entity_ids, relation_ids) under the standard id layout."""
    elo = N_SPECIAL
    rlo = N_SPECIAL + n_entities
    return np.arange(elo, elo + n_entities), np.arange(rlo, rlo + n_relations)


def ring_kg():
    """10 entities, 2 relations, 20 triples; every masked sample is
    unambiguous, so the pre-training loss can reach ~0."""
    ents, rels = make_ids(10, 2)
    rows = []
    for i in range(10):
        rows.append((ents[i], rels[0], ents[(i + 1) % 10]))
        rows.append((ents[i], rels[1], ents[(i + 3) % 10]))
    return np.array(rows, dtype=np.int32), 10, 2


def toy_kg(seed=7, n_entities=50, n_relations=5, n_triples=200):
    """Random dense toy KG for memorization runs."""
    rng = np.random.default_rng(seed)
    ents, rels = make_ids(n_entities, n_relations)
    seen = set()
    while len(seen) < n_triples:
        seen.add((
            int(rng.choice(ents)), int(rng.choice(rels)), int(rng.choice(ents)),
        ))
    return np.array(sorted(seen), dtype=np.int32), n_entities, n_relations


def compositional_kg(n_chains=25, n_held=5, seed=0):
    """Chains a -r1-> b -r2-> c with r3 = the composed a -> c edge.

    All r1/r2 edges train; r3 edges split into train and a held-out test
    set whose endpoints co-occur only inside two-step paths.
    """
    n_entities = 3 * n_chains
    ents, rels = make_ids(n_entities, 3)
    a, b, c = ents[:n_chains], ents[n_chains:2 * n_chains], ents[2 * n_chains:]
    rng = np.random.default_rng(seed)
    held = set(rng.choice(n_chains, size=n_held, replace=False).tolist())
    train, test = [], []
    for i in range(n_chains):
        train.append((a[i], rels[0], b[i]))
        train.append((b[i], rels[1], c[i]))
        (test if i in held else train).append((a[i], rels[2], c[i]))
    return (np.array(train, dtype=np.int32), np.array(test, dtype=np.int32),
            n_entities, 3)


def random_graph(rng, max_entities=30, max_triples=200, allow_parallel=True):
    """Random small multigraph as an (n, 3) id array."""
    n_e = int(rng.integers(2, max_entities + 1))
    n_r = int(rng.integers(1, 6))
    n_t = int(rng.integers(0, max_triples + 1))
    ents, rels = make_ids(n_e, n_r)
    rows = [
        (int(rng.choice(ents)), int(rng.choice(rels)), int(rng.choice(ents)))
        for _ in range(n_t)
    ]
    if not allow_parallel:
        rows = sorted(set(rows))
    arr = np.asarray(rows, dtype=np.int32).reshape(len(rows), 3)
    return arr, n_e, n_r


# ---------------------------------------------------------------------------
# oracles

def join_quadruples(triples, with_inverse=False, n_relations=0):
    """O(|T|^2) middle-entity join; the reference for count/enumerate."""
    edges = [tuple(row) for row in np.asarray(triples).tolist()]
    if with_inverse:
        edges = edges + [(t, r + n_relations, h) for h, r, t in edges]
    out = []
    for h, r1, m in edges:
        for m2, r2, t in edges:
            if m == m2:
                out.append((h, r1, r2, t))
    return out


def brute_filter_sets(train, valid, test):
    """Plain dict-of-set scan over the three splits."""
    tail, head, rel = {}, {}, {}
    for split in (train, valid, test):
        for h, r, t in np.asarray(split).reshape(-1, 3).tolist():
            tail.setdefault((h, r), set()).add(t)
            head.setdefault((r, t), set()).add(h)
            rel.setdefault((h, t), set()).add(r)
    return tail, head, rel


def sorted_rank(scores, gold, filtered, tie="deterministic"):
    """Full-sort reference rank with explicit tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = [i for i in range(scores.size) if i == gold or i not in set(filtered)]
    entries = []
    for i in keep:
        if tie == "deterministic":
            key = (-scores[i], i)
        elif tie == "optimistic":
            key = (-scores[i], 0 if i == gold else 1)
        else:
            key = (-scores[i], 1 if i == gold else 0)
        entries.append((key, i))
    entries.sort()
    for pos, (_, i) in enumerate(entries, start=1):
        if i == gold:
            return pos
    raise AssertionError("gold missing from candidates")


def write_triple_file(path, rows, entity_names, relation_names):
    """Write id triples as a name file (tab-separated)."""
    elo = N_SPECIAL
    rlo = N_SPECIAL + len(entity_names)
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in np.asarray(rows).tolist():
            f.write(f"{entity_names[h - elo]}\t{relation_names[r - rlo]}"
                    f"\t{entity_names[t - elo]}\n")


def default_names(n_entities, n_relations):
    # zero-padded so lexicographic order matches numeric order
    return ([f"e{i:03d}" for i in range(n_entities)],
            [f"r{i:03d}" for i in range(n_relations)])
