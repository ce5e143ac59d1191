import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condreg.errors import DegreeError, InputError
from condreg.model import Dataset, ProblemParams
from condreg.preprocess import prepare
from condreg.program import (
    CONSTRAINT_HANDLED,
    CONSTRAINT_ROW_IDS,
    ProgramVariables,
    build_program,
    default_q_family,
    hyperplane_projector,
    pi_quartic_frobenius,
    planted_residuals,
)
from condreg.sos import MONO_ONE, mono_degree, mono_evaluate, mono_mul

V_TRUE = np.array([0.7, -1.3])  # intercept, slope before centering


def tiny_planted(noise=0.0, seed=0):
    """One Boolean attribute, d=1: the x=1 group lies on a plane."""
    rng = np.random.default_rng(seed)
    N = 40
    X = np.zeros((N, 1), dtype=np.uint8)
    X[:24, 0] = 1
    y = 2.0 * rng.standard_normal(N)
    z = np.empty(N)
    z[:24] = V_TRUE[0] + V_TRUE[1] * y[:24]
    if noise:
        z[:24] += noise * rng.standard_normal(24)
    z[24:] = 8.0 + 0.5 * y[24:] + 2.0 * rng.standard_normal(16)
    ds = Dataset(X=X, Y=y[:, None], z=z)
    pd = prepare(ds, k=1)
    return ds, pd


def planted_term(pd):
    for j, t in enumerate(pd.terms):
        if t.literals == ((0, 1),):
            return j
    raise AssertionError("planted term missing")


def fitted_v(pd, j):
    """Exact plane through the prepared rows of term j (centering shifts it)."""
    rows = pd.Y_ext[pd.terms[j].member_ids]
    v, *_ = np.linalg.lstsq(rows[:, :-1], rows[:, -1], rcond=None)
    return v


def generous_params(mu):
    return ProblemParams(mu=mu, sigma=1e3, C=1e6, alpha=1e5, beta=1e9,
                         epsilon_target=0.1)


def planted_point(pd, jt, v):
    w = [1.0 if j == jt else 0.0 for j in range(pd.m)]
    Pi = hyperplane_projector(v)
    return w, v, [Pi] * pd.m


def build_tiny(noise=0.0, **kw):
    ds, pd = tiny_planted(noise=noise)
    jt = planted_term(pd)
    mu = pd.terms[jt].weight / pd.N_prime
    qf = default_q_family(ds.d, count_random=2, seed=0)
    cp = build_program(pd, generous_params(mu), qf, **kw)
    return pd, jt, cp


def test_budget_base_row_lists_term_sizes():
    pd, jt, cp = build_tiny()
    rows = cp.eq_rows[("budget", -1)]
    poly, rhs = cp.raw_eq[rows[0]]
    pv = cp.vars
    assert rhs == pytest.approx(pd.terms[jt].weight)  # mu N' with this mu
    assert poly == {((pv.w_id(j), 1),): float(pd.terms[j].weight)
                    for j in range(pd.m)}
    assert len(rows) > 1  # multiplied copies strengthen the relaxation


def test_planted_assignment_is_feasible_noiseless():
    pd, jt, cp = build_tiny(rank=2, noise_energy=0.0)
    v = fitted_v(pd, jt)
    res = planted_residuals(cp, *planted_point(pd, jt, v))
    assert max(res.values()) <= 1e-9, res


def test_planted_assignment_is_feasible_with_noise():
    ds, pd = tiny_planted(noise=0.05)
    jt = planted_term(pd)
    v = fitted_v(pd, jt)
    rows = pd.Y_ext[pd.terms[jt].member_ids]
    resid = rows @ np.concatenate([v, [-1.0]])
    mu = pd.terms[jt].weight / pd.N_prime
    qf = default_q_family(ds.d, count_random=2, seed=0)
    energy = 1.01 * float(resid @ resid) / rows.shape[0]
    cp = build_program(pd, generous_params(mu), qf, rank=2, noise_energy=energy)
    res = planted_residuals(cp, *planted_point(pd, jt, v))
    assert max(res.values()) <= 1e-9, res


def test_wrong_predictor_violates_noise_and_energy_rows():
    # the elimination map sends every point into the hyperplane of v, so
    # the subspace rows alone accept any predictor; the residual rows are
    # what reject a wrong one
    pd, jt, cp = build_tiny(noise_energy=0.0)
    v_bad = fitted_v(pd, jt) + np.array([1.0, -2.0])
    res = planted_residuals(cp, *planted_point(pd, jt, v_bad))
    assert res["subspace"] <= 1e-9
    assert res["noise_energy"] > 1e-3
    ds2, pd2 = tiny_planted()
    qf = default_q_family(ds2.d, count_random=2, seed=0)
    mu = pd2.terms[jt].weight / pd2.N_prime
    cp2 = build_program(pd2, generous_params(mu).replace(sigma=100.0), qf)
    res_good = planted_residuals(cp2, *planted_point(pd2, jt, fitted_v(pd2, jt)))
    res_bad = planted_residuals(cp2, *planted_point(pd2, jt, v_bad))
    assert max(res_good.values()) <= 1e-9
    assert res_bad["noise"] > 1e-3


def test_undersized_rank_pin_is_infeasible():
    pd, jt, cp = build_tiny(rank=1)
    v = fitted_v(pd, jt)
    res = planted_residuals(cp, *planted_point(pd, jt, v))
    assert res["trace"] > 0.1


def test_frobenius_quartic_matches_numeric():
    pv = ProgramVariables(d=2, m=1)
    rng = np.random.default_rng(3)
    R = rng.standard_normal((pv.dim, pv.dim))
    Q = 0.5 * (R + R.T)
    poly = pi_quartic_frobenius(pv, 0, Q)
    assert all(mono_degree(m) == 4 for m in poly)
    for trial in range(5):
        S = rng.standard_normal((pv.dim, pv.dim))
        Pi = 0.5 * (S + S.T)
        assign = np.zeros(pv.n_vars)
        for r in range(pv.dim):
            for s in range(r, pv.dim):
                assign[pv.pi_id(0, r, s)] = Pi[r, s]
        val = sum(c * mono_evaluate(m, assign) for m, c in poly.items())
        want = np.linalg.norm(Pi @ Q @ Pi) ** 2
        assert val == pytest.approx(want, rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(d=st.integers(0, 2), seed=st.integers(0, 10**6))
def test_frobenius_quartic_random_instances(d, seed):
    pv = ProgramVariables(d=d, m=1)
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((pv.dim, pv.dim))
    Q = 0.5 * (R + R.T)
    S = rng.standard_normal((pv.dim, pv.dim))
    Pi = 0.5 * (S + S.T)
    assign = np.zeros(pv.n_vars)
    for r in range(pv.dim):
        for s in range(r, pv.dim):
            assign[pv.pi_id(0, r, s)] = Pi[r, s]
    poly = pi_quartic_frobenius(pv, 0, Q)
    val = sum(c * mono_evaluate(m, assign) for m, c in poly.items())
    assert val == pytest.approx(np.linalg.norm(Pi @ Q @ Pi) ** 2, rel=1e-8, abs=1e-12)


def test_q_family_counts_and_normalization():
    d = 2
    D = d + 2
    fam = default_q_family(d, count_random=5, seed=7)
    assert len(fam) == D + D * (D - 1) // 2 + 5
    for Q in fam:
        assert Q.shape == (D, D)
        assert np.allclose(Q, Q.T)
        assert np.linalg.norm(Q) == pytest.approx(1.0)
    again = default_q_family(d, count_random=5, seed=7)
    assert all(np.array_equal(a, b) for a, b in zip(fam, again))
    other = default_q_family(d, count_random=5, seed=8)
    assert not np.array_equal(fam[-1], other[-1])


def test_every_row_stays_inside_tracked_monomials():
    pd, jt, cp = build_tiny(rank=2, noise_energy=0.1)
    for poly, _ in cp.raw_eq:
        for m in poly:
            assert mono_degree(m) <= cp.ell
            assert m in cp.u_index
    for poly in cp.raw_ineq:
        for m in poly:
            assert mono_degree(m) <= cp.ell
            assert m in cp.u_index


def test_rows_for_constraint_mapping():
    pd, jt, cp = build_tiny(rank=2, noise_energy=0.1)
    for num in CONSTRAINT_HANDLED:
        assert cp.rows_for_constraint(num) == []
    for num in CONSTRAINT_ROW_IDS:
        assert cp.rows_for_constraint(num), f"constraint {num} emitted no rows"
    with pytest.raises(KeyError):
        cp.rows_for_constraint(11)


def test_selector_pair_rows_and_cross_moments_tracked():
    pd, jt, cp = build_tiny()
    pv = cp.vars
    assert ("selector_product", 0) in cp.ineq_rows
    for a in range(pv.m):
        for b in range(a + 1, pv.m):
            pair = mono_mul(((pv.w_id(a), 1),), ((pv.w_id(b), 1),))
            assert pair in cp.u_index
    # extraction reads E~[w_a w_j Pi_j] for every a, j pair
    for a in range(pv.m):
        for j in range(pv.m):
            if a == j:
                continue
            mono = mono_mul(
                mono_mul(((pv.w_id(a), 1),), ((pv.w_id(j), 1),)),
                ((pv.pi_id(j, 0, 0), 1),),
            )
            assert mono in cp.u_index


def test_noise_energy_row_structure():
    e = 0.25
    pd, jt, cp = build_tiny(noise_energy=e)
    pv = cp.vars
    for j, term in enumerate(pd.terms):
        rows = cp.ineq_rows[("noise_energy", j)]
        assert len(rows) == 1
        poly = cp.raw_ineq[rows[0]]
        data = pd.Y_ext[term.member_ids]
        M = data.T @ data
        D = pv.dim
        w = ((pv.w_id(j), 1),)
        assert poly[w] == pytest.approx(term.weight * e - M[D - 1, D - 1])
        for a in range(pv.n_v):
            mono = mono_mul(w, ((pv.v_id(a), 1),))
            assert poly[mono] == pytest.approx(2.0 * M[a, D - 1])
        mono_01 = mono_mul(w, mono_mul(((pv.v_id(0), 1),), ((pv.v_id(1), 1),)))
        assert poly[mono_01] == pytest.approx(-2.0 * M[0, 1])
        mono_00 = mono_mul(w, ((pv.v_id(0), 2),))
        assert poly[mono_00] == pytest.approx(-M[0, 0])


def test_noise_energy_must_be_finite_nonnegative():
    ds, pd = tiny_planted()
    qf = default_q_family(ds.d, count_random=0, seed=0)
    params = generous_params(0.5)
    with pytest.raises(InputError):
        build_program(pd, params, qf, noise_energy=-1e-3)
    with pytest.raises(InputError):
        build_program(pd, params, qf, noise_energy=float("nan"))


def test_dense_mode_matches_block_on_planted_feasibility():
    pd, jt, cp_block = build_tiny(rank=2)
    pd2, jt2, cp_dense = build_tiny(rank=2, sparsity="dense")
    v = fitted_v(pd, jt)
    point = planted_point(pd, jt, v)
    assert max(planted_residuals(cp_block, *point).values()) <= 1e-9
    assert max(planted_residuals(cp_dense, *point).values()) <= 1e-9
    assert cp_dense.problem.n_u >= cp_block.problem.n_u
    with pytest.raises(InputError):
        build_tiny(sparsity="banded")


def test_noise_scale_variants_and_one_sided():
    pd, jt, cp_lit = build_tiny()
    _, _, cp_sum = build_tiny(noise_scale="sum")
    _, _, cp_one = build_tiny(one_sided_noise=True)
    assert len(cp_lit.ineq_rows[("noise", jt)]) == 2
    assert len(cp_one.ineq_rows[("noise", jt)]) == 1
    # the w coefficient carries bound + data sum; only the bound rescales
    r_lit = cp_lit.raw_ineq[cp_lit.ineq_rows[("noise", jt)][0]]
    r_sum = cp_sum.raw_ineq[cp_sum.ineq_rows[("noise", jt)][0]]
    w = ((cp_lit.vars.w_id(jt), 1),)
    sigma = 1e3
    want = sigma * (1.0 - 1.0 / pd.terms[jt].weight)
    assert r_sum[w] - r_lit[w] == pytest.approx(want)
    with pytest.raises(InputError):
        build_tiny(noise_scale="rms")


def test_degree_validation():
    ds, pd = tiny_planted()
    qf = default_q_family(ds.d, count_random=0, seed=0)
    with pytest.raises(DegreeError):
        build_program(pd, generous_params(0.5), qf, ell=3)
    with pytest.raises(DegreeError):
        build_program(pd, generous_params(0.5), qf, ell=2)


def test_q_matrices_must_be_symmetric():
    ds, pd = tiny_planted()
    bad = np.zeros((3, 3))
    bad[0, 1] = 1.0
    with pytest.raises(InputError):
        build_program(pd, generous_params(0.5), [bad])


def test_empty_terms_are_rejected():
    rng = np.random.default_rng(0)
    X = np.ones((10, 1), dtype=np.uint8)  # the x=0 term is empty
    ds = Dataset(X=X, Y=rng.standard_normal((10, 1)), z=rng.standard_normal(10))
    pd = prepare(ds, k=1, min_size=0)
    qf = default_q_family(ds.d, count_random=0, seed=0)
    with pytest.raises(InputError, match="nonempty"):
        build_program(pd, generous_params(0.5), qf)


def test_assignment_vector_validates_shapes():
    pd, jt, cp = build_tiny()
    v = fitted_v(pd, jt)
    w, _, Pis = planted_point(pd, jt, v)
    with pytest.raises(InputError):
        cp.assignment_vector(w[:-1], v, Pis)
    with pytest.raises(InputError):
        cp.assignment_vector(w, v[:-1], Pis)
    bad = [np.eye(cp.vars.dim)] * pd.m
    bad[0] = np.triu(np.ones((cp.vars.dim, cp.vars.dim)))
    with pytest.raises(InputError, match="symmetric"):
        cp.assignment_vector(w, v, bad)


def test_selector_coords_and_weight_moments():
    pd, jt, cp = build_tiny()
    coords = cp.selector_coords()
    assert [s for _, s in coords] == [t.weight for t in pd.terms]
    v = fitted_v(pd, jt)
    u = cp.assignment_vector(*planted_point(pd, jt, v))
    assert u[cp.u_of(MONO_ONE)] == 1.0
    wts = cp.term_weight_moments(u)
    assert wts[jt] == pytest.approx(1.0)  # |I_jt| / (mu N') with this mu
    assert sum(wts) == pytest.approx(1.0)


def test_hyperplane_projector_properties():
    v = np.array([0.3, -0.9, 2.0])
    Pi = hyperplane_projector(v)
    assert np.allclose(Pi, Pi.T)
    assert np.allclose(Pi @ Pi, Pi, atol=1e-12)
    assert np.trace(Pi) == pytest.approx(v.size)  # rank d+1 in dim d+2
    v_ext = np.concatenate([v, [-1.0]])
    assert np.allclose(Pi @ v_ext, 0.0, atol=1e-12)
