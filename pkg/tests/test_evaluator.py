import numpy as np

from kgpath.evaluator import (
    Metrics,
    evaluate_link_prediction,
    evaluate_relation_prediction,
    metrics_from_ranks,
    rank_gold,
    write_results_row,
    _rank_numba,
    _rank_numpy,
)
from kgpath.kg import build_filter_index
from kgpath.model import ModelConfig, init_parameters
from kgpath.trainer import TrainConfig, finetune

from util import make_ids, sorted_rank, toy_kg


def test_rank_strictly_best_is_one():
    scores = np.array([0.1, 3.0, -1.0, 0.5], dtype=np.float32)
    assert rank_gold(scores, 1, []) == 1
    assert rank_gold(scores, 2, []) == 4


def test_all_tied_smallest_id_wins():
    scores = np.zeros(5, dtype=np.float32)
    assert rank_gold(scores, 0, []) == 1
    assert rank_gold(scores, 3, []) == 4
    assert rank_gold(scores, 3, [], tie_break="optimistic") == 1
    assert rank_gold(scores, 3, [], tie_break="pessimistic") == 5


def test_filtered_candidates_removed_but_gold_survives():
    scores = np.array([5.0, 4.0, 3.0, 2.0, 1.0], dtype=np.float32)
    assert rank_gold(scores, 3, [0, 1]) == 2
    assert rank_gold(scores, 3, [0, 1, 3]) == 2  # gold listed, still ranked


def test_rank_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n = int(rng.integers(2, 15))
        # coarse grid scores force plenty of exact ties
        scores = rng.integers(0, 4, size=n).astype(np.float32)
        gold = int(rng.integers(n))
        n_f = int(rng.integers(0, n))
        filtered = rng.choice(n, size=n_f, replace=False).tolist()
        for tie in ("deterministic", "optimistic", "pessimistic"):
            got = rank_gold(scores, gold, filtered, tie_break=tie)
            want = sorted_rank(scores, gold, [f for f in filtered if f != gold],
                               tie=tie)
            assert got == want, (trial, tie, scores.tolist(), gold, filtered)


def test_rank_invariant_under_positive_affine_maps():
    rng = np.random.default_rng(1)
    for _ in range(200):
        scores = rng.normal(size=20).astype(np.float64)
        gold = int(rng.integers(20))
        filtered = rng.choice(20, size=5, replace=False).tolist()
        base = rank_gold(scores, gold, filtered)
        a = float(rng.uniform(0.1, 10.0))
        b = float(rng.normal())
        assert rank_gold(a * scores + b, gold, filtered) == base


def test_filtered_rank_never_exceeds_raw():
    rng = np.random.default_rng(2)
    for _ in range(300):
        scores = rng.normal(size=30).astype(np.float32)
        gold = int(rng.integers(30))
        filtered = rng.choice(30, size=int(rng.integers(0, 20)),
                              replace=False).tolist()
        assert rank_gold(scores, gold, filtered) <= rank_gold(scores, gold, [])


def test_rank_backends_agree():
    rng = np.random.default_rng(3)
    for _ in range(200):
        scores = rng.integers(0, 5, size=25).astype(np.float32)
        gold = int(rng.integers(25))
        filtered = np.asarray(
            sorted(rng.choice(25, size=6, replace=False).tolist()), dtype=np.int64)
        for mode in (0, 1, 2):
            assert (_rank_numba(scores, gold, filtered, mode)
                    == _rank_numpy(scores, gold, filtered, mode))


def test_metrics_invariants_and_ranges():
    ranks = [1, 2, 3, 7, 30, 1]
    m = metrics_from_ranks(ranks)
    assert m.hits1 <= m.hits3 <= m.hits10
    assert m.hits1 <= m.mrr <= 1.0
    assert m.n_queries == 6
    empty = metrics_from_ranks([])
    assert empty.n_queries == 0 and empty.mrr == 0.0


def _memorized_model(task, seed=0):
    trip, n_e, n_r = toy_kg(seed=7, n_entities=20, n_relations=3, n_triples=60)
    cfg = ModelConfig(n_entities=n_e, n_relations=n_r, n_layers=2, n_heads=4,
                      hidden=64, dropout_rate=0.0)
    tc = TrainConfig(batch_size=32, epochs=150, learning_rate=1e-3, seed=seed)
    result = finetune(init_parameters(cfg, seed), cfg, trip, task, tc)
    return result.params, cfg, trip


def test_memorized_link_model_reaches_high_mrr():
    params, cfg, trip = _memorized_model("link")
    fi = build_filter_index(trip, [], [])
    m = evaluate_link_prediction(params, cfg, trip, fi)
    assert m.n_queries == 2 * len(trip)
    assert m.mrr >= 0.95 and m.hits1 >= 0.95


def test_memorized_relation_model_hits1_one():
    params, cfg, trip = _memorized_model("relation")
    fi = build_filter_index(trip, [], [])
    m = evaluate_relation_prediction(params, cfg, trip, fi)
    assert m.n_queries == len(trip)
    assert m.hits1 == 1.0


def test_single_relation_kg_relation_hits1_is_one():
    ents, rels = make_ids(4, 1)
    trip = np.array([(ents[0], rels[0], ents[1]), (ents[2], rels[0], ents[3])],
                    dtype=np.int32)
    cfg = ModelConfig(n_entities=4, n_relations=1, n_layers=1, n_heads=2,
                      hidden=8, dropout_rate=0.0)
    params = init_parameters(cfg, 0)
    fi = build_filter_index(trip, [], [])
    m = evaluate_relation_prediction(params, cfg, trip, fi)
    assert m.hits1 == 1.0 and m.mrr == 1.0


def test_single_entity_kg_every_rank_is_one():
    ents, rels = make_ids(1, 2)
    trip = np.array([(ents[0], rels[0], ents[0])], dtype=np.int32)
    cfg = ModelConfig(n_entities=1, n_relations=2, n_layers=1, n_heads=2,
                      hidden=8, dropout_rate=0.0)
    params = init_parameters(cfg, 1)
    fi = build_filter_index(trip, [], [])
    m = evaluate_link_prediction(params, cfg, trip, fi)
    assert m.mrr == 1.0 and m.n_queries == 2


def test_filtered_metrics_dominate_raw():
    params, cfg, trip = _memorized_model("link", seed=3)
    fi = build_filter_index(trip, [], [])
    filt, filt_ranks = evaluate_link_prediction(params, cfg, trip, fi,
                                                return_ranks=True)
    raw, raw_ranks = evaluate_link_prediction(params, cfg, trip, fi,
                                              filtered=False, return_ranks=True)
    assert np.all(filt_ranks <= raw_ranks)
    assert filt.mrr >= raw.mrr


def test_evaluation_is_read_only():
    params, cfg, trip = _memorized_model("link", seed=1)
    before = {k: v.copy() for k, v in params.tensors()}
    fi = build_filter_index(trip, [], [])
    evaluate_link_prediction(params, cfg, trip, fi)
    for k, v in params.tensors():
        assert np.array_equal(before[k], v), k


def test_results_row_format(tmp_path):
    path = tmp_path / "results.tsv"
    write_results_row(path, "link", "test", Metrics(0.5, 0.25, 0.5, 0.75, 8))
    write_results_row(path, "relation", "valid", Metrics(1.0, 1.0, 1.0, 1.0, 3))
    lines = path.read_text().splitlines()
    assert lines[0] == "link\ttest\t0.500000\t0.250000\t0.500000\t0.750000\t8"
    assert lines[1].startswith("relation\tvalid\t")
