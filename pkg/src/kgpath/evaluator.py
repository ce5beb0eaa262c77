"""Filtered ranking evaluation: MRR and Hits@{1,3,10}.

For every test triple, link prediction asks two queries (head- and
tail-masked); relation prediction asks one. In the filtered setting all
known-true competitors from train + valid + test are removed before
ranking, the gold answer always retained. Ties break deterministically
by candidate id unless configured otherwise.
"""

from dataclasses import dataclass

import numpy as np

from kgpath._backend import HAS_NUMBA, use_numba
from kgpath.kg import triples_to_array
from kgpath.model import ENTITY, RELATION, forward_batch, output_logits
from kgpath.vocab import MASK_ID, PAD_ID

TIE_MODES = {"deterministic": 0, "optimistic": 1, "pessimistic": 2}


@dataclass(frozen=True)
class Metrics:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    n_queries: int


def metrics_from_ranks(ranks):
    ranks = np.asarray(ranks, dtype=np.int64)
    n = len(ranks)
    if n == 0:
        return Metrics(0.0, 0.0, 0.0, 0.0, 0)
    inv = 1.0 / ranks.astype(np.float64)
    return Metrics(
        mrr=float(inv.sum() / n),
        hits1=float((ranks <= 1).sum() / n),
        hits3=float((ranks <= 3).sum() / n),
        hits10=float((ranks <= 10).sum() / n),
        n_queries=n,
    )


# ---------------------------------------------------------------------------
# rank computation

def _rank_numpy(scores, gold, filtered, mode):
    mask = np.ones(scores.size, dtype=bool)
    if filtered.size:
        mask[filtered] = False
    mask[gold] = True
    sg = scores[gold]
    greater = int(np.count_nonzero((scores > sg) & mask))
    if mode == 1:
        ties = 0
    else:
        eq = (scores == sg) & mask
        if mode == 0:
            ties = int(np.count_nonzero(eq[:gold]))
        else:
            ties = int(np.count_nonzero(eq)) - 1
    return 1 + greater + ties


if HAS_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _rank_numba(scores, gold, filtered, mode):
        # full branch-light scan, then subtract the (short) filtered list
        sg = scores[gold]
        greater = 0
        ties = 0
        for i in range(scores.size):
            greater += scores[i] > sg
            ties += scores[i] == sg
        ties_lt = 0
        if mode == 0:
            for i in range(gold):
                ties_lt += scores[i] == sg
        for j in range(filtered.size):
            i = filtered[j]
            if i == gold:
                continue
            s = scores[i]
            if s > sg:
                greater -= 1
            elif s == sg:
                ties -= 1
                if mode == 0 and i < gold:
                    ties_lt -= 1
        if mode == 0:
            t = ties_lt
        elif mode == 1:
            t = 0
        else:
            t = ties - 1  # the equality scan counted the gold itself
        return 1 + greater + t
else:  # pragma: no cover
    _rank_numba = _rank_numpy


def rank_gold(logits, gold, filter_set, tie_break="deterministic"):
    """1-based filtered rank of the gold candidate.

    logits cover one candidate range; gold and filter_set use local
    indices within it. The gold survives even if listed in filter_set.
    """
    scores = np.ascontiguousarray(logits)
    if not 0 <= gold < scores.size:
        raise ValueError("gold index outside the logits range")
    mode = TIE_MODES[tie_break]
    filtered = np.asarray(sorted(set(int(i) for i in filter_set)), dtype=np.int64)
    if use_numba():
        return int(_rank_numba(scores, gold, filtered, mode))
    return _rank_numpy(scores, gold, filtered, mode)


# ---------------------------------------------------------------------------
# query construction and batched evaluation

def _link_queries(test):
    """Interleaved head-/tail-masked queries, two per test triple."""
    n = len(test)
    tokens = np.full((2 * n, 4), PAD_ID, dtype=np.int32)
    tokens[0::2, 0] = MASK_ID
    tokens[0::2, 1] = test[:, 2]
    tokens[0::2, 2] = test[:, 1]
    tokens[1::2, 0] = test[:, 0]
    tokens[1::2, 1] = MASK_ID
    tokens[1::2, 2] = test[:, 1]
    maskpos = np.zeros(2 * n, dtype=np.int64)
    maskpos[1::2] = 1
    golds = np.empty(2 * n, dtype=np.int64)
    golds[0::2] = test[:, 0]
    golds[1::2] = test[:, 2]
    return tokens, maskpos, golds


def _evaluate(params, config, test, filter_index, task, *, batch_size=1024,
              filtered=True, tie_break="deterministic"):
    test = triples_to_array(test)
    mode = TIE_MODES[tie_break]
    rank_fn = _rank_numba if use_numba() else _rank_numpy
    empty = np.empty(0, dtype=np.int64)

    if task == "link":
        tokens, maskpos, golds = _link_queries(test)
        lengths = np.full(len(tokens), 3, dtype=np.int64)
        lo, _ = config.target_range(ENTITY)
        target_class = ENTITY
    else:
        n = len(test)
        tokens = np.full((n, 4), PAD_ID, dtype=np.int32)
        tokens[:, 0] = test[:, 0]
        tokens[:, 1] = test[:, 2]
        tokens[:, 2] = MASK_ID
        maskpos = np.full(n, 2, dtype=np.int64)
        golds = test[:, 1].astype(np.int64)
        lengths = np.full(n, 3, dtype=np.int64)
        lo, _ = config.target_range(RELATION)
        target_class = RELATION

    filter_cache = {}

    def filter_for(qi):
        if not filtered:
            return empty
        ti = qi // 2 if task == "link" else qi
        h, r, t = (int(x) for x in test[ti])
        if task == "link":
            key = ("h", r, t) if qi % 2 == 0 else ("t", h, r)
            src = (filter_index.head_filter.get((r, t), ())
                   if qi % 2 == 0 else filter_index.tail_filter.get((h, r), ()))
        else:
            key = ("r", h, t)
            src = filter_index.rel_filter.get((h, t), ())
        got = filter_cache.get(key)
        if got is None:
            got = np.asarray(sorted(src), dtype=np.int64) - lo
            filter_cache[key] = got
        return got

    nq = len(tokens)
    ranks = np.empty(nq, dtype=np.int64)
    for b0 in range(0, nq, batch_size):
        b1 = min(b0 + batch_size, nq)
        trace = forward_batch(params, config, tokens[b0:b1], lengths[b0:b1],
                              maskpos[b0:b1], train_mode=False)
        logits = output_logits(params, config, trace, target_class)
        for qi in range(b0, b1):
            scores = np.ascontiguousarray(logits[qi - b0])
            ranks[qi] = rank_fn(scores, int(golds[qi]) - lo, filter_for(qi), mode)
    return metrics_from_ranks(ranks), ranks


def evaluate_link_prediction(params, config, test, filter_index, *,
                             batch_size=1024, filtered=True,
                             tie_break="deterministic", return_ranks=False):
    """MRR and Hits@{1,3,10} over head- and tail-masked queries combined."""
    metrics, ranks = _evaluate(params, config, test, filter_index, "link",
                               batch_size=batch_size, filtered=filtered,
                               tie_break=tie_break)
    return (metrics, ranks) if return_ranks else metrics


def evaluate_relation_prediction(params, config, test, filter_index, *,
                                 batch_size=1024, filtered=True,
                                 tie_break="deterministic", return_ranks=False):
    """Relation-masked ranking; Hits@1 is the headline, MRR a diagnostic."""
    metrics, ranks = _evaluate(params, config, test, filter_index, "relation",
                               batch_size=batch_size, filtered=filtered,
                               tie_break=tie_break)
    return (metrics, ranks) if return_ranks else metrics


# ---------------------------------------------------------------------------
# result files

def write_results_row(path, task, split, metrics):
    """Append a ``task split mrr h1 h3 h10 n`` row (tab-separated)."""
    with open(path, "a", encoding="utf-8") as f:
        f.write(
            f"{task}\t{split}\t{metrics.mrr:.6f}\t{metrics.hits1:.6f}"
            f"\t{metrics.hits3:.6f}\t{metrics.hits10:.6f}\t{metrics.n_queries}\n"
        )


def write_rank_dump(path, ranks):
    with open(path, "w", encoding="utf-8") as f:
        for qi, r in enumerate(ranks):
            f.write(f"{qi}\t{int(r)}\n")
