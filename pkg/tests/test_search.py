import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spherequant.embedder import EmbedderParams
from spherequant.encoder import reconstruct
from spherequant.search import (
    SparseCodebooks,
    adc_score,
    adc_scores,
    build_lut,
    build_lut_sparse,
    read_results_csv,
    search_batch,
    topk,
    topk_from_lut,
    write_results_csv,
)


def _unit(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sparse_cb(rng, m=3, h=8, p=10, keep=0.3):
    C = rng.standard_normal((m, h, p))
    C[rng.random(C.shape) > keep] = 0.0
    return C


def test_lut_zero_query():
    C = np.random.default_rng(0).standard_normal((2, 4, 3))
    np.testing.assert_array_equal(build_lut(np.zeros(3), C), 0.0)


def test_lut_self_inner_product():
    rng = np.random.default_rng(1)
    z = _unit(rng, 5)
    C = rng.standard_normal((2, 4, 5))
    C[1, 2] = z
    assert build_lut(z, C)[1, 2] == pytest.approx(1.0, abs=1e-15)


def test_lut_matches_naive_dot():
    rng = np.random.default_rng(2)
    z = rng.standard_normal(7)
    C = rng.standard_normal((3, 6, 7))
    lut = build_lut(z, C)
    for j in range(3):
        for c in range(6):
            assert lut[j, c] == pytest.approx(sum(a * b for a, b in zip(z, C[j, c])), abs=1e-9)


def test_lut_dimension_check():
    with pytest.raises(ValueError):
        build_lut(np.zeros(4), np.zeros((1, 2, 3)))


def test_sparse_lut_zero_codebooks():
    sp = SparseCodebooks.from_dense(np.zeros((2, 3, 4)))
    assert sp.nnz == 0
    np.testing.assert_array_equal(build_lut_sparse(np.ones(4), sp), 0.0)


def test_sparse_lut_single_nonzero():
    rng = np.random.default_rng(3)
    C = np.zeros((2, 3, 5))
    idx = rng.integers(0, 5, (2, 3))
    vals = rng.standard_normal((2, 3))
    for j in range(2):
        for c in range(3):
            C[j, c, idx[j, c]] = vals[j, c]
    z = rng.standard_normal(5)
    lut = build_lut_sparse(z, SparseCodebooks.from_dense(C))
    np.testing.assert_array_equal(lut, z[idx] * vals)


@pytest.mark.parametrize("seed", range(5))
def test_sparse_lut_equals_dense(seed):
    rng = np.random.default_rng(seed)
    C = _sparse_cb(rng)
    sp = SparseCodebooks.from_dense(C)
    np.testing.assert_array_equal(sp.to_dense(), C)
    z = _unit(rng, 10)
    np.testing.assert_array_equal(build_lut_sparse(z, sp), build_lut(z, C))


def test_adc_examples():
    assert adc_score([0, 1], np.zeros((2, 3))) == 0.0
    assert adc_score([1], np.array([[0.1, 0.5]])) == 0.5


@pytest.mark.parametrize("seed", range(5))
def test_adc_equals_reconstruction_inner_product(seed):
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((4, 16, 8))
    z = _unit(rng, 8)
    lut = build_lut(z, C)
    codes = rng.integers(0, 16, (50, 4))
    rec = reconstruct(C, codes)
    for code, r in zip(codes, rec):
        assert abs(adc_score(code, lut) - float(z @ r)) < 1e-9
    np.testing.assert_allclose(adc_scores(codes, lut), rec @ z, atol=1e-9)


def test_topk_full_ranking_is_permutation():
    rng = np.random.default_rng(4)
    lut = rng.standard_normal((2, 4))
    codes = rng.integers(0, 4, (30, 2))
    ids, _ = topk_from_lut(lut, codes, 30)
    assert sorted(ids.tolist()) == list(range(30))


def test_topk_exact_match_first():
    p = 4
    z = np.array([1.0, 0.0, 0.0, 0.0])
    C = np.zeros((1, 4, p))
    C[0, 0] = z
    C[0, 1] = [0, 1, 0, 0]
    C[0, 2] = [0, 0, 1, 0]
    C[0, 3] = [0, 0, 0, 1]
    codes = np.array([[1], [2], [0], [3]])
    P = EmbedderParams(np.eye(p), np.zeros((2, p)), np.zeros(2))
    res = topk(z, P, C, codes, 1)
    assert res == [(2, 1.0)]


@pytest.mark.parametrize("seed", range(5))
def test_topk_matches_exhaustive_sort(seed):
    rng = np.random.default_rng(seed)
    # coarse values force many ties
    lut = rng.integers(-3, 4, (3, 5)).astype(float)
    codes = rng.integers(0, 5, (100, 3))
    scores = [adc_score(c, lut) for c in codes]
    oracle = sorted(range(100), key=lambda i: (-scores[i], i))
    for k in (1, 7, 100):
        ids, sc = topk_from_lut(lut, codes, k)
        assert ids.tolist() == oracle[:k]
        np.testing.assert_array_equal(sc, [scores[i] for i in oracle[:k]])


def test_topk_sharded_merge(monkeypatch):
    import spherequant.search as s

    rng = np.random.default_rng(9)
    lut = rng.integers(-2, 3, (2, 4)).astype(float)
    codes = rng.integers(0, 4, (200, 2))
    ref = topk_from_lut(lut, codes, 15)
    monkeypatch.setattr(s, "_SHARD", 13)
    out = topk_from_lut(lut, codes, 15, threads=3)
    np.testing.assert_array_equal(out[0], ref[0])


def test_topk_empty_database():
    with pytest.raises(ValueError, match="empty"):
        topk_from_lut(np.zeros((1, 2)), np.zeros((0, 1), np.uint8), 1)


def test_topk_k_larger_than_n():
    ids, _ = topk_from_lut(np.zeros((1, 2)), np.zeros((3, 1), np.uint8), 10)
    assert ids.tolist() == [0, 1, 2]


def test_sparse_and_dense_rankings_agree():
    rng = np.random.default_rng(6)
    C = _sparse_cb(rng, m=4, h=16, p=12)
    sp = SparseCodebooks.from_dense(C)
    P = EmbedderParams(rng.standard_normal((12, 20)), np.zeros((2, 12)), np.zeros(2))
    codes = rng.integers(0, 16, (500, 4))
    Q = rng.standard_normal((20, 20))
    dense = search_batch(Q, P, C, codes, 50)
    sparse = search_batch(Q, P, C, codes, 50, sparse=sp)
    np.testing.assert_array_equal(dense[0], sparse[0])
    np.testing.assert_array_equal(dense[1], sparse[1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_distance_reconstruction_bound(seed):
    rng = np.random.default_rng(seed)
    zq = _unit(rng, 6)
    z = _unit(rng, 6)
    zbar = z + rng.standard_normal(6) * rng.uniform(0, 1)
    assert abs(zq @ z - zq @ zbar) <= np.linalg.norm(z - zbar) + 1e-15


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mips_ranking_equals_euclidean_on_sphere(seed):
    rng = np.random.default_rng(seed)
    q = _unit(rng, 5)
    X = _unit(rng, (40, 5))
    ip = X @ q
    by_l2 = np.argsort(np.sum((X - q) ** 2, axis=1), kind="stable")
    # walking up in distance walks down in inner product, up to rounding
    assert np.all(np.diff(ip[by_l2]) <= 1e-12)
    np.testing.assert_allclose(np.sum((X - q) ** 2, axis=1), 2 - 2 * ip, atol=1e-12)


def test_results_csv_round_trip(tmp_path):
    ids = np.array([[3, 1], [0, 2]])
    scores = np.array([[0.9, 0.5], [0.25, -0.1]])
    path = tmp_path / "r.csv"
    write_results_csv(path, ids, scores)
    lines = path.read_text().splitlines()
    assert lines[0] == "query_id,rank,point_id,score,distance"
    assert lines[1] == "0,1,3,0.9,0.19999999999999996"
    back = read_results_csv(path)
    assert [b.tolist() for b in back] == [[3, 1], [0, 2]]
