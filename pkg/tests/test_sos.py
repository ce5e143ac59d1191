import math

import numpy as np
import pytest

from condreg.errors import DegreeError, InputError
from condreg.sos import (
    MomentVector,
    Poly,
    check_pseudo_inequalities,
    empirical_moments,
    localizing_matrix,
    moment_matrix,
    mono_mul,
    monomial_basis,
    point_mass_moments,
    pseudo_distribution,
    pseudo_expectation,
)


def test_poly_arithmetic():
    x, y = Poly.var(0), Poly.var(1)
    p = (x + y) ** 2
    assert p.coeffs == {((0, 2),): 1.0, ((0, 1), (1, 1)): 2.0, ((1, 2),): 1.0}
    q = (x - x)  # exact zero dropped
    assert q.coeffs == {}
    assert ((2 * x + 1) * (x - 1)).evaluate([3.0]) == 14.0
    assert (x * y).degree == 2
    assert Poly.const(5.0).degree == 0


def test_mono_mul_canonical():
    assert mono_mul(((0, 1),), ((0, 2), (3, 1))) == ((0, 3), (3, 1))
    assert mono_mul((), ((1, 1),)) == ((1, 1),)


def test_monomial_basis_count():
    # C(v + D, D) monomials of degree <= D in v variables
    for nv, D in [(1, 2), (2, 3), (3, 2), (4, 4)]:
        basis = monomial_basis(range(nv), D)
        assert len(basis) == math.comb(nv + D, D)
        assert basis[0] == ()
        degs = [sum(e for _, e in m) for m in basis]
        assert degs == sorted(degs)  # graded order


def test_moment_matrix_one_var_example():
    # u = (u_0, u_x, u_{x^2}) = (1, 1/2, 1/2): Bernoulli(1/2) moments
    u = MomentVector({(): 1.0, ((0, 1),): 0.5, ((0, 2),): 0.5}, ell=2)
    M = moment_matrix(u, 2)
    assert np.allclose(M, [[1.0, 0.5], [0.5, 0.5]])
    assert np.linalg.eigvalsh(M)[0] >= -1e-12


def test_moment_matrix_missing_moment_is_input_error():
    u = MomentVector({(): 1.0, ((0, 1),): 0.5}, ell=2)
    with pytest.raises(InputError, match="missing"):
        moment_matrix(u, 2)


def test_u0_must_be_one():
    with pytest.raises(InputError):
        MomentVector({(): 0.9}, ell=2)


def test_localizing_matrix_dirac_example():
    # p = 1 - x^2 at the point mass on x = 1/2, ell = 4:
    # basis degree ell/2 - deg(p) = 0, entry (0,0) = E[1 - x^2] = 3/4
    u = point_mass_moments([0.5], ell=6)
    p = Poly.const(1.0) - Poly.var(0) ** 2
    L = localizing_matrix(p, u, 4)
    assert L.shape == (1, 1)
    assert abs(L[0, 0] - 0.75) < 1e-12
    # point mass satisfies p(x) >= 0 at x=1/2, so L is PSD
    assert np.linalg.eigvalsh(L)[0] >= -1e-12


def test_localizing_matrix_constant_shift_is_moment_matrix():
    u = empirical_moments(np.array([[0.3], [1.7], [-0.4]]), ell=4)
    L = localizing_matrix(Poly.const(1.0), u, 4)
    assert np.array_equal(L, moment_matrix(u, 4))


def test_localizing_matrix_vanishing_shift():
    u = point_mass_moments([0.0], ell=4)
    L = localizing_matrix(Poly.var(0), u, 4)
    assert np.all(L == 0.0)


def test_localizing_matrix_degree_error():
    u = point_mass_moments([0.5], ell=2)
    p = Poly.const(1.0) - Poly.var(0) ** 2
    with pytest.raises(DegreeError):
        localizing_matrix(p, u, 2)  # ell/2 - deg p < 0


def test_pseudo_expectation_linearity_and_overflow():
    u = empirical_moments(np.array([[0.0], [1.0], [2.0]]), ell=4)
    x = Poly.var(0)
    a = pseudo_expectation(x ** 2, u)
    b = pseudo_expectation(x, u)
    assert abs(pseudo_expectation(x ** 2 + 3 * x, u) - (a + 3 * b)) < 1e-12
    assert abs(b - 1.0) < 1e-12
    with pytest.raises(DegreeError):
        pseudo_expectation(x ** 6, u)


def test_empirical_moments_match_numpy():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((200, 2))
    u = empirical_moments(pts, ell=4)
    assert abs(u[((0, 2),)] - (pts[:, 0] ** 2).mean()) < 1e-12
    assert abs(u[((0, 1), (1, 1))] - (pts[:, 0] * pts[:, 1]).mean()) < 1e-12


def test_pseudo_distribution_psd_for_empirical():
    rng = np.random.default_rng(9)
    pts = rng.standard_normal((150, 3))
    pd = pseudo_distribution(empirical_moments(pts, ell=4))
    assert pd.min_eig >= -1e-8


def test_check_inequalities_clean_empirical():
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((300, 2))
    pd = pseudo_distribution(empirical_moments(pts, ell=4))
    report = check_pseudo_inequalities(pd, trials=50, rng_seed=0)
    assert report.ok
    assert report.min_eig >= -1e-8
    assert report.n_checked > 100


def test_check_inequalities_flags_corrupted_moments():
    # corrupt the cross moment so E~[xy]^2 > E~[x^2] E~[y^2]
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((300, 2))
    u = empirical_moments(pts, ell=4)
    vals = dict(u.values)
    vals[((0, 1), (1, 1))] = 10.0
    bad = pseudo_distribution(MomentVector(vals, ell=4))
    report = check_pseudo_inequalities(bad, trials=50, rng_seed=0)
    assert not report.ok
    kinds = {kind for kind, _, _ in report.violations}
    assert "cauchy_schwarz" in kinds


def test_check_inequalities_requires_degree_four():
    pd = pseudo_distribution(point_mass_moments([1.0], ell=2))
    with pytest.raises(DegreeError):
        check_pseudo_inequalities(pd)
