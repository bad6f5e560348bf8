import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lvann.core_math import FourwiseSign, PairwisePerm, RngStream
from lvann.errors import InfeasibleParameters, InputError, NotFound
from lvann.splitters import (HalvingSpec, ProjCollection, SplitterTree, complement_apply,
                             enumerate_trees, find_splitting, halving_apply, level_tolerances,
                             sample_halving, tree_apply)

from oracles import leaf_distortion as _leaf_distortion

dims = st.integers(1, 7).map(lambda k: 1 << k)


# ------------------------------------------------------------ halving

def test_identity_halving_example():
    spec = HalvingSpec.identity(4)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(halving_apply(spec, x), [3 / math.sqrt(2), 7 / math.sqrt(2)])
    np.testing.assert_allclose(complement_apply(spec, x), [-1 / math.sqrt(2), -1 / math.sqrt(2)])


@given(dims, st.integers(0, 2 ** 31))
@settings(max_examples=40)
def test_halving_pair_is_orthogonal_split(d, seed):
    d = max(d, 2)
    spec = sample_halving(d, RngStream(seed))
    A = np.vstack([spec.matrix(False), spec.matrix(True)])
    np.testing.assert_allclose(A @ A.T, np.eye(d), atol=1e-12)
    x = np.random.default_rng(seed).standard_normal(d)
    np.testing.assert_allclose(halving_apply(spec, x), spec.matrix(False) @ x, atol=1e-12)
    np.testing.assert_allclose(complement_apply(spec, x), spec.matrix(True) @ x, atol=1e-12)
    # energy is conserved between the two halves
    e = np.sum(halving_apply(spec, x) ** 2) + np.sum(complement_apply(spec, x) ** 2)
    assert e == pytest.approx(np.dot(x, x))


def test_halving_rows_have_two_entries():
    spec = HalvingSpec(PairwisePerm(3, 5, 2), FourwiseSign(3, (1, 2, 3, 4)))
    A = spec.matrix()
    assert np.all((A != 0).sum(axis=1) == 2)
    assert np.all((A != 0).sum(axis=0) == 1)
    np.testing.assert_allclose(np.abs(A[A != 0]), 1 / math.sqrt(2))


def test_countsketch_failure_rate_is_small():
    # x = (e1 + e2)/sqrt2 fails only when e1 and e2 land in the same bucket (1/(d-1))
    d, eps = 64, 4 / math.sqrt(32)
    x = np.zeros(d)
    x[:2] = 1 / math.sqrt(2)
    rng = RngStream(0, "countsketch")
    fails = 0
    trials = 2000
    for _ in range(trials):
        spec = sample_halving(d, rng)
        r0 = math.sqrt(2) * np.linalg.norm(halving_apply(spec, x))
        r1 = math.sqrt(2) * np.linalg.norm(complement_apply(spec, x))
        fails += abs(r0 - 1) > eps or abs(r1 - 1) > eps
    assert fails / trials < 0.25
    assert abs(fails / trials - 1 / 63) < 4 * math.sqrt(1 / 63 / trials)


def test_halving_rejects_wrong_dim():
    with pytest.raises(InputError):
        halving_apply(HalvingSpec.identity(4), np.ones(8))
    with pytest.raises(InputError):
        sample_halving(6, RngStream(0))


# --------------------------------------------------------------- trees

def test_level_tolerances():
    assert level_tolerances(256, 64) == pytest.approx((4 / math.sqrt(128), 4 / math.sqrt(64)))
    assert level_tolerances(8, 8) == ()


@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_tree_is_orthonormal_decomposition(kb, extra, seed):
    b, m = 1 << kb, 1 << (kb + extra)
    coll = ProjCollection(m, b, mode="subsampled", s=3, seed=seed)
    tree = coll.tree_at(seed % coll.size)
    dec = tree.decomp()
    np.testing.assert_allclose(dec.matrix @ dec.matrix.T, np.eye(m), atol=1e-12)
    x = np.random.default_rng(seed).standard_normal(m)
    comps = tree_apply(tree, x)
    assert len(comps) == m // b
    np.testing.assert_allclose(np.concatenate(comps), dec.matrix @ x, atol=1e-12)


def test_tree_validation():
    with pytest.raises(InputError):
        SplitterTree(8, 2, ())
    with pytest.raises(InputError):
        SplitterTree(8, 3, ())


def test_full_mode_single_level_enumerates_distinct_trees():
    coll = ProjCollection(8, 4, mode="full")
    assert coll.size == 7 * 8 ** 5
    # distinct hash parameters (matrices may repeat: 8^4 cubics give only 2^8 sign patterns)
    idx = range(0, coll.size, 97)
    params = {(t.specs[0].h, t.specs[0].sigma) for t in (coll.tree_at(i) for i in idx)}
    assert len(params) == len(idx)


def test_enumerate_matches_tree_at():
    coll = ProjCollection(8, 2, mode="subsampled", s=3, seed=4)
    trees = list(enumerate_trees(coll))
    assert len(trees) == 27 == coll.size
    for i in (0, 5, 26):
        assert trees[i].specs == coll.tree_at(i).specs and trees[i].index == i


def test_enumerate_cap():
    coll = ProjCollection(64, 8, mode="full", cap=1000)
    with pytest.raises(InfeasibleParameters):
        next(enumerate_trees(coll))


def test_guarantees():
    assert ProjCollection(4, 4).guarantees(0.0)  # no levels
    full = ProjCollection(16, 8, mode="full")
    assert full.guarantees(full.certificate) and not full.guarantees(full.certificate / 2)
    assert not ProjCollection(16, 8, mode="subsampled").guarantees(10.0)
    assert full.certificate == pytest.approx(4 / math.sqrt(8))


# --------------------------------------------------------------- splitting

def test_e1_splits_with_zero_distortion():
    coll = ProjCollection(64, 16, mode="subsampled", s=4, seed=2)
    e1 = np.zeros(64)
    e1[0] = 1
    for i in range(coll.size):
        assert max(_leaf_distortion(coll.tree_at(i), e1)) < 1e-12


@pytest.mark.parametrize("mode,m,b,s", [("full", 64, 32, 1), ("subsampled", 64, 16, 8)])
def test_find_splitting_certificates(mode, m, b, s):
    coll = ProjCollection(m, b, mode=mode, s=s, seed=1)
    rng = np.random.default_rng(5)
    for _ in range(100):
        x = rng.standard_normal(m)
        tree = find_splitting(coll, x)
        worst = _leaf_distortion(tree, x)
        assert all(wj <= ej + 1e-12 for wj, ej in zip(worst, coll.eps))
        # the recorded index recovers the same tree
        assert coll.tree_at(tree.index).specs == tree.specs
        for comp in tree_apply(tree, x):
            ratio = np.linalg.norm(comp) / np.linalg.norm(x) * math.sqrt(m / b)
            assert abs(ratio - 1) <= coll.certificate + 1e-12


def test_find_splitting_many_vectors_at_once():
    coll = ProjCollection(16, 4, mode="subsampled", s=64, seed=0)
    rng = np.random.default_rng(1)
    xs = [rng.standard_normal(16) for _ in range(3)]
    tree = find_splitting(coll, xs)
    for x in xs:
        assert all(w <= e + 1e-12 for w, e in zip(_leaf_distortion(tree, x), coll.eps))


def test_find_splitting_not_found_and_zero():
    coll = ProjCollection(8, 4, mode="subsampled", s=1, seed=0, eps=(1e-9,))
    x = np.arange(1.0, 9.0)
    with pytest.raises(NotFound):
        find_splitting(coll, x)
    with pytest.raises(InputError):
        find_splitting(coll, np.zeros(8))


def test_collection_is_seed_deterministic():
    a = ProjCollection(32, 8, s=4, seed=9)
    b = ProjCollection(32, 8, s=4, seed=9)
    assert all(a.tree_at(i).specs == b.tree_at(i).specs for i in range(a.size))
    c = ProjCollection(32, 8, s=4, seed=10)
    assert a.tree_at(0).specs != c.tree_at(0).specs
