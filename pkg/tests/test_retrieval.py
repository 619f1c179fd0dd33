import itertools

import numpy as np
import pytest

from adin.autodiff import Tensor
from adin.errors import ConfigError, DataError, DimensionError
from adin.models import EncoderParams, Layer, ModelBundle, build_bundle
from adin.retrieval import (CSV_HEADER, average_precision, direct_transfer_eval, distances, evaluate,
                            extract_embeddings, identity_disjoint_split, nuisance_probe, rank, write_report_csv,
                            write_report_json)
from retrieval_oracle import brute_force, make_set


def test_single_match_at_rank_one():
    q = make_set([0], [0])
    g = make_set([0, 1], [1, 0])
    rep = evaluate(q, g, np.array([[0, 1]]))
    assert rep.ap == [1.0] and rep.cmc[0] == 1.0 and rep.map == 1.0


def test_ap_with_matches_at_one_and_three():
    assert average_precision([1, 3]) == pytest.approx(0.8333, abs=1e-4)
    q = make_set([0], [0])
    g = make_set([0, 1, 0], [1, 2, 2])
    rep = evaluate(q, g, np.array([[0, 1, 2]]))
    assert rep.map == pytest.approx((1 + 2 / 3) / 2, rel=1e-15)
    assert rep.cmc == [1.0, 1.0, 1.0]


def test_three_queries_six_gallery_all_permutations():
    q = make_set([0, 1, 2], [0, 1, 0])
    g = make_set([0, 1, 2, 0, 1, 2], [1, 0, 1, 0, 2, 2])
    for perm in itertools.permutations(range(6)):
        ranking = np.tile(perm, (3, 1))
        rep = evaluate(q, g, ranking)
        cmc, mean_ap, n = brute_force(q, g, ranking, rep.policy)
        assert rep.cmc == cmc and rep.map == mean_ap and rep.n_valid_queries == n


@pytest.mark.parametrize("policy", ["none", "same-id-same-nuisance"])
def test_random_instances_match_oracle(policy):
    rng = np.random.default_rng(0)
    for _ in range(100):
        nq, ng = rng.integers(1, 11), rng.integers(1, 21)
        q = make_set(rng.integers(0, 4, nq), rng.integers(0, 3, nq))
        g = make_set(rng.integers(0, 4, ng), rng.integers(0, 3, ng))
        ranking = np.array([rng.permutation(ng) for _ in range(nq)])
        rep = evaluate(q, g, ranking, policy)
        cmc, mean_ap, n = brute_force(q, g, ranking, policy)
        assert rep.cmc == cmc and rep.map == mean_ap
        assert rep.n_valid_queries == n and rep.n_skipped_queries == nq - n
        assert all(a <= b for a, b in zip(rep.cmc, rep.cmc[1:]))
        if n:
            assert rep.cmc[-1] == 1.0


def test_queries_without_matches_are_skipped_and_counted():
    q = make_set([0, 1], [0, 0])
    g = make_set([0, 1], [0, 1])  # query 0's only match shares its camera
    rep = evaluate(q, g, np.array([[0, 1], [1, 0]]))
    assert rep.n_skipped_queries == 1 and rep.n_valid_queries == 1
    assert rep.policy == "same-id-same-nuisance"
    assert evaluate(q, g, np.array([[0, 1], [1, 0]]), policy="none").n_skipped_queries == 0
    with pytest.raises(ConfigError):
        evaluate(q, g, np.array([[0, 1], [1, 0]]), policy="bogus")


def test_rank_examples():
    rng = np.random.default_rng(1)
    gallery = rng.normal(size=(6, 3))
    assert rank(gallery[[4]], gallery, "euclidean")[0, 0] == 4
    g = np.array([[0.0, 1.0], [2.0, 0.0], [0.0, -3.0]])
    np.testing.assert_array_equal(rank(np.array([[1.0, 0.0]]), g, "cosine")[0], [1, 0, 2])


def test_rank_matches_brute_force_sort():
    rng = np.random.default_rng(2)
    q, g = rng.normal(size=(5, 8)), rng.normal(size=(7, 8))
    for metric in ("euclidean", "cosine"):
        out = rank(q, g, metric)
        for i in range(5):
            if metric == "euclidean":
                d = [sum((q[i, k] - g[j, k]) ** 2 for k in range(8)) for j in range(7)]
            else:
                d = [-np.dot(q[i], g[j]) / np.linalg.norm(q[i]) / np.linalg.norm(g[j]) for j in range(7)]
            assert out[i].tolist() == sorted(range(7), key=lambda j: (d[j], j))


def test_rank_ties_break_by_index_and_empty_gallery():
    g = np.array([[1.0, 1.0], [0.0, 5.0], [1.0, 1.0], [1.0, 1.0]])
    for metric in ("euclidean", "cosine"):
        assert rank(np.array([[1.0, 1.0]]), g, metric)[0, :3].tolist() == [0, 2, 3]
    with pytest.raises(DataError):
        rank(np.ones((1, 2)), np.zeros((0, 2)))
    with pytest.raises(DimensionError):
        distances(np.ones((1, 2)), np.ones((1, 3)))


@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
def test_ranking_invariant_to_positive_rescaling(scale):
    rng = np.random.default_rng(3)
    q, g = rng.integers(-3, 4, (6, 5)).astype(float), rng.integers(-3, 4, (15, 5)).astype(float)
    scale = 2.0 ** np.round(np.log2(scale))  # powers of two rescale without rounding
    for metric in ("euclidean", "cosine"):
        np.testing.assert_array_equal(rank(q, g, metric), rank(q * scale, g * scale, metric))
    q, g = rng.normal(size=(6, 5)), rng.normal(size=(15, 5))
    for metric in ("euclidean", "cosine"):
        np.testing.assert_array_equal(rank(q, g, metric), rank(q * 3.7, g * 3.7, metric))


def identity_bundle(d):
    layer = Layer(Tensor(np.eye(d)), Tensor(np.zeros(d)), "linear")
    arch = {"d_in": d, "hidden": [], "d_feat": d, "n_identities": 2, "nuisance_classes": [2]}
    b = build_bundle(arch, 0)
    b.encoder = EncoderParams([layer])
    return b


def test_extract_embeddings():
    x = np.random.default_rng(4).normal(size=(5, 3))
    np.testing.assert_array_equal(extract_embeddings(identity_bundle(3), x), x)
    b = identity_bundle(3)
    b.encoder.layers[0].weight.data[:] = 0
    assert not extract_embeddings(b, x).any()
    with pytest.raises(DimensionError):
        extract_embeddings(b, np.ones((2, 4)))


def test_direct_transfer_in_domain_matches_pipeline():
    rng = np.random.default_rng(5)
    q = make_set([0, 1, 2], [0, 0, 1], rng.normal(size=(3, 4)))
    g = make_set([0, 1, 2, 0, 1, 2], [1, 1, 0, 2, 2, 2], rng.normal(size=(6, 4)))
    bundle = build_bundle({"d_in": 4, "hidden": [5], "d_feat": 3, "n_identities": 3, "nuisance_classes": [3]}, 1)
    before = bundle.checksum()
    rep = direct_transfer_eval(bundle, q, g)
    assert bundle.checksum() == before
    # scripted end-to-end oracle
    w1, b1 = bundle.encoder.layers[0].weight.data, bundle.encoder.layers[0].bias.data
    w2, b2 = bundle.encoder.layers[1].weight.data, bundle.encoder.layers[1].bias.data
    emb = lambda x: np.maximum(np.maximum(x @ w1 + b1, 0) @ w2 + b2, 0)
    cmc, mean_ap, _ = brute_force(q, g, rank(emb(q.x), emb(g.x)), rep.policy)
    assert rep.cmc == cmc and rep.map == mean_ap


def test_probe_one_hot_embeddings_are_perfect():
    rng = np.random.default_rng(6)
    y = rng.integers(0, 4, 400)
    ids = np.arange(400) // 10
    emb = np.eye(4)[y] + 0.01 * rng.normal(size=(400, 4))
    rep = nuisance_probe(emb, y, identity_disjoint_split(ids, 0.3, seed=0))
    assert rep.accuracy[0] > 0.99


def test_probe_on_noise_is_near_chance():
    accs, chances = [], []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        y = rng.choice(4, 1000, p=[0.4, 0.3, 0.2, 0.1])
        rep = nuisance_probe(rng.normal(size=(1000, 8)), y,
                             identity_disjoint_split(np.arange(1000) // 10, 0.3, seed), seed=seed)
        accs.append(rep.accuracy[0])
        chances.append(rep.chance[0])
    assert abs(np.mean(accs) - np.mean(chances)) < 0.05


def test_probe_single_class_split_is_data_error():
    y = np.zeros(20, dtype=int)
    with pytest.raises(DataError):
        nuisance_probe(np.ones((20, 3)), y, np.arange(20) < 10)


def test_identity_disjoint_split():
    ids = np.repeat(np.arange(10), 5)
    mask = identity_disjoint_split(ids, 0.3, seed=1)
    assert not set(ids[mask]) & set(ids[~mask])
    assert len(set(ids[~mask])) == 3


def test_report_files_agree(tmp_path):
    q = make_set([0, 1], [0, 0], [[1.0, 0.0], [0.0, 1.0]])
    g = make_set([0, 1, 1], [1, 1, 2], [[1.0, 0.1], [0.1, 1.0], [1.0, 0.0]])
    rep = evaluate(q, g, rank(q.x, g.x))
    write_report_json(tmp_path / "r.json", {"transfer": rep})
    write_report_csv(tmp_path / "r.csv", [rep.row("cane")])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == "method,top1,top5,top10,mAP"
    import json
    js = json.loads((tmp_path / "r.json").read_text())["transfer"]
    fields = lines[1].split(",")
    assert float(fields[1]) == js["cmc"][0] and float(fields[4]) == js["map"]
