import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condreg import Dataset, InputError, Term, evaluate_term
from condreg.preprocess import (
    assign_and_duplicate,
    enumerate_terms,
    extend_and_center,
    prepare,
    prune_small_terms,
)


def brute_force_terms(n, k):
    """Oracle: all width-k conjunctions over n attributes, lex order."""
    out = []
    for attrs in itertools.combinations(range(n), k):
        for pols in itertools.product((0, 1), repeat=k):
            out.append(tuple(zip(attrs, pols)))
    return out


def test_enumerate_terms_counts():
    # C(n, k) * 2^k
    assert len(enumerate_terms(3, 2)) == 12
    assert len(enumerate_terms(4, 1)) == 8
    assert len(enumerate_terms(5, 3)) == math.comb(5, 3) * 8


def test_enumerate_terms_order_matches_oracle():
    for n, k in [(3, 1), (3, 2), (4, 2), (5, 1)]:
        got = [t.literals for t in enumerate_terms(n, k)]
        assert got == brute_force_terms(n, k)


def test_enumerate_terms_rejects_bad_width():
    with pytest.raises(InputError):
        enumerate_terms(3, 0)
    with pytest.raises(InputError):
        enumerate_terms(3, 4)


def random_dataset(rng, N, n, d):
    return Dataset(
        X=(rng.random((N, n)) < 0.5).astype(np.uint8),
        Y=rng.standard_normal((N, d)),
        z=rng.standard_normal(N),
    )


def test_assign_and_duplicate_small_oracle():
    # brute-force membership count on a tiny instance
    rng = np.random.default_rng(3)
    ds = random_dataset(rng, 20, 3, 2)
    terms = enumerate_terms(3, 1)
    pd = assign_and_duplicate(ds, terms)
    expected = 0
    for i in range(ds.N):
        for t in terms:
            if evaluate_term(t, ds.X[i]):
                expected += 1
    assert pd.N_prime == expected
    assert sum(t.weight for t in pd.terms) == expected
    # every original sample retained at least once
    assert set(pd.provenance.tolist()) == set(range(ds.N))


def test_duplication_rows_are_faithful_copies():
    rng = np.random.default_rng(7)
    ds = random_dataset(rng, 15, 4, 2)
    pd = assign_and_duplicate(ds, enumerate_terms(4, 1))
    for j, term in enumerate(pd.terms):
        for row in term.member_ids:
            orig = pd.provenance[row]
            assert evaluate_term(term, ds.X[orig])
            assert np.array_equal(pd.X[row], ds.X[orig])
            assert pd.Y_ext[row, 0] == 1.0
            assert np.allclose(pd.Y_ext[row, 1:-1], ds.Y[orig])
            assert pd.Y_ext[row, -1] == ds.z[orig]
            assert pd.term_of[row] == j


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(2, 5), st.data())
def test_duplication_invariants(N, n, data):
    k = data.draw(st.integers(1, min(n, 2)))
    seed = data.draw(st.integers(0, 2**16))
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, N, n, 1)
    terms = enumerate_terms(n, k)
    pd = assign_and_duplicate(ds, terms)
    # disjointness: each duplicated row belongs to exactly one term
    seen = set()
    for t in pd.terms:
        ids = set(t.member_ids.tolist())
        assert not (ids & seen)
        seen |= ids
    # N' <= m * N
    assert pd.N_prime <= len(terms) * N
    # membership matches direct evaluation
    for t in pd.terms:
        direct = sum(evaluate_term(t, ds.X[i]) for i in range(N))
        assert t.weight == direct


def test_prune_small_terms_reindexes():
    rng = np.random.default_rng(11)
    ds = random_dataset(rng, 30, 4, 2)
    pd = assign_and_duplicate(ds, enumerate_terms(4, 2))
    pruned = prune_small_terms(pd, min_size=5)
    assert all(t.weight >= 5 for t in pruned.terms)
    for j, t in enumerate(pruned.terms):
        for row in t.member_ids:
            assert pruned.term_of[row] == j
            orig = pruned.provenance[row]
            assert evaluate_term(t, ds.X[orig])
    assert pruned.N_prime == sum(t.weight for t in pruned.terms)


def test_extend_and_center_modes():
    rng = np.random.default_rng(13)
    ds = random_dataset(rng, 25, 3, 2)
    pd = assign_and_duplicate(ds, enumerate_terms(3, 1))
    same = extend_and_center(pd, "mean_zero")
    assert np.array_equal(same.Y_ext, pd.Y_ext)
    cent = extend_and_center(pd, "empirical_recenter")
    rows = cent.member_rows()
    means = cent.Y_ext[rows].mean(axis=0)
    assert abs(means[1:]).max() < 1e-10
    assert np.all(cent.Y_ext[:, 0] == 1.0)
    with pytest.raises(InputError):
        extend_and_center(pd, "bogus")


def test_prepare_composes():
    rng = np.random.default_rng(17)
    ds = random_dataset(rng, 40, 4, 2)
    pd = prepare(ds, k=1, min_size=3)
    assert pd.m <= 8
    assert all(t.weight >= 3 for t in pd.terms)
    assert pd.N_original == 40
