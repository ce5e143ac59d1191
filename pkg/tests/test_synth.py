import math

import numpy as np
import pytest

from condreg.errors import InputError
from condreg.model import KDnf, PlantedSpec, Term, evaluate_term
from condreg.preprocess import prepare
from condreg.synth import (
    default_planted_spec,
    empirical_covariance_check,
    generate,
    make_planted_covariances,
    noise_energy_from_truth,
    params_from_truth,
    planted_term_indices,
    population_second_moment,
)
from condreg.program import default_q_family


def std_instance(noise=0.02, n_samples=400, seed=0):
    spec = default_planted_spec(seed=seed, noise_sigma=noise)
    ds, gt = generate(spec, n_samples, seed)
    return spec, ds, gt


def test_inliers_sit_on_the_planted_plane():
    spec, ds, gt = std_instance(noise=0.0)
    ids = gt.inlier_ids
    pred = gt.v_star[0] + ds.Y[ids] @ gt.v_star[1:]
    assert np.abs(ds.z[ids] - pred).max() <= 1e-12
    # the recorded noise reproduces z exactly in the noisy regime too
    spec2, ds2, gt2 = std_instance(noise=0.05)
    ids2 = gt2.inlier_ids
    pred2 = gt2.v_star[0] + ds2.Y[ids2] @ gt2.v_star[1:]
    assert np.allclose(ds2.z[ids2], pred2 + gt2.eps[ids2], atol=1e-12)
    assert np.isnan(gt2.eps[np.setdiff1d(np.arange(ds2.N), ids2)]).all()


def test_inlier_count_and_condition_membership():
    spec, ds, gt = std_instance()
    assert gt.inlier_ids.size == math.ceil(spec.mu * ds.N)
    terms = spec.c_star.terms
    for i in gt.inlier_ids:
        hits = sum(evaluate_term(t, ds.X[i]) for t in terms)
        assert hits == 1
        assert evaluate_term(terms[gt.term_of_inlier[i]], ds.X[i])
    outliers = np.setdiff1d(np.arange(ds.N), gt.inlier_ids)
    for i in outliers:
        assert not any(evaluate_term(t, ds.X[i]) for t in terms)


def test_generation_is_seed_deterministic():
    _, ds1, gt1 = std_instance(seed=5)
    _, ds2, gt2 = std_instance(seed=5)
    _, ds3, _ = std_instance(seed=6)
    assert np.array_equal(ds1.X, ds2.X)
    assert np.array_equal(ds1.Y, ds2.Y)
    assert np.array_equal(ds1.z, ds2.z)
    assert np.array_equal(gt1.inlier_ids, gt2.inlier_ids)
    assert not np.array_equal(ds1.z, ds3.z)


def test_covariance_family_respects_gap():
    covs = make_planted_covariances(d=3, t=3, gap=0.5, seed=1)
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(covs[i] - covs[j], 2) >= 0.5
    iso = make_planted_covariances(d=3, t=2, gap=0.5, seed=1, isotropic=True)
    assert all(np.array_equal(c, np.eye(3)) for c in iso)


def test_spec_validation():
    with pytest.raises(InputError, match="n >= t\\*k"):
        default_planted_spec(n=1, t=2, k=1)
    v = np.array([0.5, 1.0])
    term = Term(literals=((0, 1),))
    with pytest.raises(InputError, match="PSD"):
        PlantedSpec(c_star=KDnf(terms=(term,)), v_star=v, r=2,
                    per_term_covariances=(np.array([[-1.0]]),),
                    noise_sigma=0.1, mu=0.3, n_attributes=2)
    with pytest.raises(InputError, match="one covariance per"):
        PlantedSpec(c_star=KDnf(terms=(term,)), v_star=v, r=2,
                    per_term_covariances=(np.eye(1), np.eye(1)),
                    noise_sigma=0.1, mu=0.3, n_attributes=2)


def test_projector_truth_artifacts():
    spec, ds, gt = std_instance(noise=0.0)
    D = spec.d + 2
    Pi = gt.Pi_star
    assert np.allclose(Pi @ Pi, Pi, atol=1e-12)
    assert np.trace(Pi) == pytest.approx(spec.d + 1)
    assert np.abs(Pi @ gt.v_ext).max() <= 1e-12
    assert gt.r == spec.d + 1
    # each per-term projector fixes that term's noise-free population
    for i in gt.inlier_ids:
        j = gt.term_of_inlier[i]
        p = np.concatenate([[1.0], ds.Y[i], [ds.z[i] - gt.eps[i]]])
        P = gt.per_term_Pi[j]
        assert np.abs(P @ p - p).max() <= 1e-9


def test_rank_deficient_covariance_shrinks_term_span():
    d = 2
    cov = np.diag([1.0, 0.0])  # one-dimensional predictor support
    term = Term(literals=((0, 1),))
    spec = PlantedSpec(
        c_star=KDnf(terms=(term,)),
        v_star=np.array([0.3, 1.0, -0.5]),
        r=d + 1,
        per_term_covariances=(cov,),
        noise_sigma=0.0,
        mu=0.4,
        n_attributes=2,
    )
    ds, gt = generate(spec, 200, 3)
    P = gt.per_term_Pi[0]
    assert np.trace(P) == pytest.approx(d)  # [1, e_0, model] only
    # the generator jitters the covariance by 1e-15 I before Cholesky
    for i in gt.inlier_ids:
        p = np.concatenate([[1.0], ds.Y[i], [ds.z[i]]])
        assert np.abs(P @ p - p).max() <= 1e-6


def test_population_second_moment_matches_monte_carlo():
    rng = np.random.default_rng(12)
    d = 2
    cov = np.array([[2.0, 0.3], [0.3, 0.7]])
    v = np.array([0.4, -1.1, 0.8])
    M = population_second_moment(v, cov)
    Y = rng.multivariate_normal(np.zeros(d), cov, size=200_000)
    P = np.column_stack([np.ones(len(Y)), Y, v[0] + Y @ v[1:]])
    emp = P.T @ P / len(Y)
    assert np.abs(M - emp).max() <= 0.05
    assert M[0, 0] == 1.0
    assert np.allclose(M[1:-1, 1:-1], cov)


def test_empirical_covariance_check_threshold():
    spec, ds, gt = std_instance(noise=0.0, n_samples=2000)
    loose = empirical_covariance_check(ds, gt, tol=2.0)
    assert loose.ok
    tight = empirical_covariance_check(ds, gt, tol=1e-6)
    assert not tight.ok
    assert set(loose.distances) == set(range(spec.c_star.t))


def test_planted_term_indices_found_after_prepare():
    spec, ds, gt = std_instance()
    pd = prepare(ds, k=1)
    idx = planted_term_indices(pd, gt)
    assert len(idx) == spec.c_star.t
    lits = {pd.terms[j].literals for j in idx}
    assert lits == {t.literals for t in spec.c_star.terms}


def test_params_from_truth_covers_planted_requirements():
    spec, ds, gt = std_instance()
    pd = prepare(ds, k=1)
    qf = default_q_family(spec.d, count_random=4, seed=0)
    params = params_from_truth(pd, gt, qf)
    planted = planted_term_indices(pd, gt)
    sizes = sum(pd.terms[j].weight for j in planted)
    assert params.mu == pytest.approx(sizes / pd.N_prime)
    for j in planted:
        data = pd.Y_ext[pd.terms[j].member_ids]
        resid = data @ gt.v_ext
        tot = abs(float(resid.sum())) * data.shape[0]
        assert params.sigma >= tot  # margin leaves slack
        assert params.alpha >= (data ** 2).sum(axis=0).max() / data.shape[0]
    wide = params_from_truth(pd, gt, qf, margin=3.0)
    assert wide.C == pytest.approx(2.0 * params.C)


def test_noise_energy_calibration():
    spec, ds, gt = std_instance(noise=0.0)
    pd = prepare(ds, k=1)
    assert noise_energy_from_truth(pd, gt) == 0.0
    spec2, ds2, gt2 = std_instance(noise=0.05)
    pd2 = prepare(ds2, k=1)
    worst = 0.0
    for j in planted_term_indices(pd2, gt2):
        data = pd2.Y_ext[pd2.terms[j].member_ids]
        r = data @ gt2.v_ext
        worst = max(worst, float(r @ r) / data.shape[0])
    e = noise_energy_from_truth(pd2, gt2)
    assert e == pytest.approx(2.0 * worst)
    assert noise_energy_from_truth(pd2, gt2, margin=4.0) == pytest.approx(2.0 * e)


def test_truth_calibration_requires_surviving_terms():
    spec, ds, gt = std_instance()
    pd = prepare(ds, k=1, min_size=10 ** 6)  # prunes everything plantable
    qf = default_q_family(spec.d, count_random=0, seed=0)
    if pd.m == 0:
        with pytest.raises(InputError):
            params_from_truth(pd, gt, qf)
    else:
        with pytest.raises(InputError):
            noise_energy_from_truth(pd, gt)
