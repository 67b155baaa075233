from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_objective, exhaustive_min
import spherequant.encoder as enc
from spherequant.config import HyperParams
from spherequant.encoder import encode_batch, icm_pass, point_seed, sls_encode, sls_search, subproblem_objective


def _problem(seed, m=2, h=4, p=8):
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((m, h, p)) / np.sqrt(p)
    z = rng.standard_normal(p)
    z /= np.linalg.norm(z)
    phi = z + 0.3 * rng.standard_normal(p)
    return z, phi, C


def test_objective_zero_when_all_coincide():
    C = np.zeros((2, 3, 2))
    C[0, 1] = [0.2, 0.1]
    C[1, 2] = [0.4, 0.7]
    target = C[0, 1] + C[1, 2]
    assert subproblem_objective(target, target, C, [1, 2], 1.0, 0.5) == 0.0


def test_objective_single_codeword_exact():
    _, _, C = _problem(0, m=1, h=5)
    assert subproblem_objective(C[0, 3], None, C, [3], 1.0, 0.0) == 0.0


def test_objective_out_of_range_code():
    _, _, C = _problem(0)
    with pytest.raises(ValueError):
        subproblem_objective(np.zeros(8), None, C, [0, 4], 1.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_objective_matches_naive(seed):
    z, phi, C = _problem(seed, m=3, h=5)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        code = rng.integers(0, 5, 3)
        assert subproblem_objective(z, phi, C, code, 0.7, 0.4) == pytest.approx(
            brute_objective(z, phi, C, code, 0.7, 0.4), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 6), st.floats(0.1, 2.0), st.floats(0.0, 2.0))
def test_incremental_objective_matches_naive(seed, m, h, alpha, gamma):
    z, phi, C = _problem(seed, m=m, h=h, p=5)
    codes = np.random.default_rng(seed).integers(0, h, (1, m))
    tab = enc._tables(z[None], phi[None], C, alpha, gamma)
    inc = enc._objective(tab, codes)[0]
    assert inc == pytest.approx(brute_objective(z, phi, C, codes[0], alpha, gamma), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_icm_m1_is_global_argmin(seed):
    z, phi, C = _problem(seed, m=1, h=9)
    out = icm_pass(z, phi, C, [0], 1.0, 0.3)
    best = min(range(9), key=lambda c: brute_objective(z, phi, C, [c], 1.0, 0.3))
    assert out[0] == best


def test_icm_fixed_point():
    z, phi, C = _problem(3, m=1, h=9)
    first = icm_pass(z, phi, C, [4], 1.0, 0.0)
    np.testing.assert_array_equal(icm_pass(z, phi, C, first, 1.0, 0.0), first)


def test_icm_ties_go_to_lowest_index():
    C = np.zeros((1, 4, 2))
    C[0, 1] = C[0, 3] = [1.0, 0.0]
    assert icm_pass([1.0, 0.0], None, C, [2], 1.0, 0.0)[0] == 1


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 6))
def test_icm_monotone(seed, m, h):
    z, phi, C = _problem(seed, m=m, h=h)
    code = np.random.default_rng(seed + 1).integers(0, h, m)
    out = icm_pass(z, phi, C, code, 1.0, 0.2)
    assert brute_objective(z, phi, C, out, 1.0, 0.2) <= brute_objective(z, phi, C, code, 1.0, 0.2) + 1e-12


def test_sls_without_perturbation_is_plain_icm():
    z, phi, C = _problem(7, m=3, h=5)
    init = np.array([4, 0, 2])
    code = init.copy()
    for _ in range(3):
        code = icm_pass(z, phi, C, code, 1.0, 0.5)
    out = sls_encode(z, phi, C, 1.0, 0.5, rounds=1, icm_iters=3, k=0, rng_seed=99, init_code=init)
    np.testing.assert_array_equal(out, code)


def test_sls_reaches_exhaustive_minimum_mostly():
    hits = 0
    for seed in range(100):
        z, phi, C = _problem(seed)
        best, _ = exhaustive_min(z, phi, C, 1.0, 0.2)
        out = sls_encode(z, phi, C, 1.0, 0.2, rounds=16, icm_iters=2, k=1, rng_seed=seed)
        hits += brute_objective(z, phi, C, out, 1.0, 0.2) <= best + 1e-12
    assert hits >= 80


def test_sls_deterministic():
    z, phi, C = _problem(4, m=4, h=8)
    a = sls_encode(z, phi, C, 1.0, 0.1, 8, 2, 2, rng_seed=[3, 1])
    b = sls_encode(z, phi, C, 1.0, 0.1, 8, 2, 2, rng_seed=[3, 1])
    np.testing.assert_array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(0, 3))
def test_sls_best_so_far_non_increasing(seed, rounds, k):
    z, phi, C = _problem(seed, m=3, h=6)
    res = sls_search(z, phi, C, 1.0, 0.4, rounds, 1, min(k, 3), seed)
    assert np.all(np.diff(res.best_trace) <= 0)
    assert res.objective == pytest.approx(brute_objective(z, phi, C, res.code, 1.0, 0.4), rel=1e-9)


@pytest.mark.parametrize("init", [0, 3, 6])
def test_m1_result_ignores_initial_code(init):
    z, phi, C = _problem(12, m=1, h=7)
    ref = sls_encode(z, phi, C, 1.0, 0.0, 3, 1, 1, 0, init_code=[0])
    np.testing.assert_array_equal(sls_encode(z, phi, C, 1.0, 0.0, 3, 1, 1, 0, init_code=[init]), ref)


def test_sls_rejects_bad_k():
    z, phi, C = _problem(0)
    with pytest.raises(ValueError):
        sls_encode(z, phi, C, 1.0, 0.0, 2, 1, 3, 0)


def _batch(seed, n=40, m=3, h=8, p=6):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, p))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    Phi = Z + 0.2 * rng.standard_normal((n, p))
    C = rng.standard_normal((m, h, p)) / np.sqrt(p)
    hp = HyperParams(alpha=1.0, gamma=0.3, k_perturb=2, m=m, h=h, p=p, sls_rounds=5, icm_iters=2)
    return Z, Phi, C, hp


def test_batch_of_one_is_sls_encode():
    Z, Phi, C, hp = _batch(0, n=1)
    out = encode_batch(Z, Phi, C, hp, seed=5)
    ref = sls_encode(Z[0], Phi[0], C, hp.alpha, hp.gamma, hp.sls_rounds, hp.icm_iters, hp.k_perturb, point_seed(5, 0))
    np.testing.assert_array_equal(out[0], ref)


def test_batch_equals_per_point_sequential():
    Z, Phi, C, hp = _batch(1)
    out = encode_batch(Z, Phi, C, hp, seed=11)
    for i in range(Z.shape[0]):
        ref = sls_encode(Z[i], Phi[i], C, hp.alpha, hp.gamma, hp.sls_rounds, hp.icm_iters, hp.k_perturb,
                         point_seed(11, i))
        np.testing.assert_array_equal(out[i], ref)


def test_parallel_equals_sequential(monkeypatch):
    Z, Phi, C, hp = _batch(2, n=100)
    seq = encode_batch(Z, Phi, C, hp, seed=3)
    monkeypatch.setattr(enc, "_CHUNK", 7)
    par = encode_batch(Z, Phi, C, hp, seed=3, threads=4)
    np.testing.assert_array_equal(par, seq)


def test_batch_with_init_never_worse():
    Z, Phi, C, hp = _batch(3)
    init = np.random.default_rng(0).integers(0, hp.h, (Z.shape[0], hp.m))
    out = encode_batch(Z, Phi, C, hp, seed=0, init_codes=init)
    for i in range(Z.shape[0]):
        assert brute_objective(Z[i], Phi[i], C, out[i], 1.0, 0.3) <= brute_objective(Z[i], Phi[i], C, init[i], 1.0, 0.3) + 1e-12


def test_batch_needs_centers_when_gamma_positive():
    Z, _, C, hp = _batch(4)
    with pytest.raises(ValueError, match="centers"):
        encode_batch(Z, None, C, hp)
    out = encode_batch(Z, None, C, replace(hp, gamma=0.0))
    assert out.dtype == np.uint8 and out.shape == (Z.shape[0], hp.m)
