"""Planted-instance generator and ground-truth artifacts.

Instances hide a k-DNF c* and a linear model v* shared by every planted
term, while each term draws its predictors from its own covariance; the
covariances differ by a requested spectral gap, which is exactly the
heterogeneity the relaxation must tolerate. Inlier attribute vectors
satisfy exactly one planted term, outliers satisfy none and carry a
slope-flipped model with inflated noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError
from .model import (
    Dataset,
    KDnf,
    OutlierModel,
    PlantedSpec,
    ProblemParams,
    Term,
    evaluate_term,
)
from .preprocess import PreparedDataset
from .program import hyperplane_projector


@dataclass(frozen=True)
class GroundTruth:
    """Everything the generator knows that the solver must rediscover."""

    v_star: np.ndarray
    c_star: KDnf
    Pi_star: np.ndarray
    per_term_Pi: Tuple[np.ndarray, ...]
    inlier_ids: np.ndarray
    term_of_inlier: np.ndarray
    eps: np.ndarray
    spec: PlantedSpec

    @property
    def v_ext(self) -> np.ndarray:
        return np.concatenate([self.v_star, [-1.0]])

    @property
    def r(self) -> int:
        return int(round(np.trace(self.Pi_star)))


def make_planted_covariances(d: int, t: int, gap: float, seed: int,
                             isotropic: bool = False) -> Tuple[np.ndarray, ...]:
    """t covariances with pairwise spectral distance >= gap.

    Top eigenvalues are spaced by 1.2*gap, so Weyl's inequality gives
    ||S_i - S_j||_2 >= 1.2*gap*|i-j| before any numerical audit. Random
    rotations decorrelate the eigenbases. Isotropic mode returns
    identical identity covariances (the closest-to-paper premise).
    """
    if isotropic:
        return tuple(np.eye(d) for _ in range(t))
    rng = np.random.default_rng(seed)
    covs = []
    step = 1.2 * gap
    for j in range(t):
        top = 1.0 + step * (j + 1)
        evals = np.linspace(0.5, top, d) if d > 1 else np.array([top])
        evals[-1] = top
        Qm, _ = np.linalg.qr(rng.standard_normal((d, d)))
        covs.append(Qm @ np.diag(evals) @ Qm.T)
    for i in range(t):
        for j in range(i + 1, t):
            dist = np.linalg.norm(covs[i] - covs[j], 2)
            if dist < gap:
                raise InputError(
                    f"covariance pair ({i},{j}) has spectral distance {dist:.3f} < gap {gap}"
                )
    return tuple(covs)


def default_planted_spec(n: int = 4, k: int = 1, d: int = 2, t: int = 2,
                         mu: float = 0.3, noise_sigma: float = 0.02,
                         gap: float = 0.5, seed: int = 0,
                         isotropic: bool = False,
                         v_star: Optional[Sequence[float]] = None) -> PlantedSpec:
    """Planted condition over the first t*k attributes, one term each."""
    if t * k > n:
        raise InputError(f"need n >= t*k for {t} disjoint-attribute terms, got n={n}")
    terms = tuple(
        Term(literals=tuple((a, 1) for a in range(i * k, (i + 1) * k)))
        for i in range(t)
    )
    rng = np.random.default_rng(seed)
    if v_star is None:
        v = rng.uniform(-2.0, 2.0, size=d + 1)
        v[0] = rng.uniform(-1.0, 1.0)
        while np.abs(v[1:]).max() < 0.5:
            v[1:] = rng.uniform(-2.0, 2.0, size=d)
        v_star = v
    v_star = np.asarray(v_star, dtype=float)
    covs = make_planted_covariances(d, t, gap, seed + 1, isotropic=isotropic)
    return PlantedSpec(
        c_star=KDnf(terms=terms),
        v_star=v_star,
        r=d + 1,
        per_term_covariances=covs,
        noise_sigma=noise_sigma,
        mu=mu,
        n_attributes=n,
        outlier_model=OutlierModel(),
    )


def _exactly_one_x(rng, n: int, terms, chosen: int, max_tries: int = 1000) -> np.ndarray:
    lits = dict(terms[chosen].literals)
    for _ in range(max_tries):
        x = (rng.random(n) < 0.5).astype(np.uint8)
        for a, p in lits.items():
            x[a] = p
        hits = sum(evaluate_term(tm, x) for tm in terms)
        if hits == 1:
            return x
    raise InputError("could not sample an attribute vector satisfying exactly one term")


def _no_term_x(rng, n: int, terms, max_tries: int = 1000) -> np.ndarray:
    for _ in range(max_tries):
        x = (rng.random(n) < 0.5).astype(np.uint8)
        if not any(evaluate_term(tm, x) for tm in terms):
            return x
    raise InputError("could not sample an attribute vector avoiding the condition")


def _term_span_projector(v_star: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Projector onto span of the noise-free extended population of one term.

    The population is the affine image y -> [1, y, <v*, (1, y)>] with y
    ranging over the covariance's column space.
    """
    d = cov.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    cols = [np.concatenate([[1.0], np.zeros(d), [v_star[0]]])]
    for i in range(d):
        if evals[i] > 1e-12 * max(evals[-1], 1.0):
            u = evecs[:, i]
            cols.append(np.concatenate([[0.0], u, [float(v_star[1:] @ u)]]))
    B = np.column_stack(cols)
    Qm, _ = np.linalg.qr(B)
    return Qm @ Qm.T


def generate(spec: PlantedSpec, n_samples: int, seed: int) -> Tuple[Dataset, GroundTruth]:
    """Draw a planted dataset; inliers first is avoided by shuffling."""
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    n, d = spec.n_attributes, spec.d
    terms = spec.c_star.terms
    t = len(terms)
    n_in = math.ceil(spec.mu * n_samples)
    n_out = n_samples - n_in

    X = np.zeros((n_samples, n), dtype=np.uint8)
    Y = np.zeros((n_samples, d))
    z = np.zeros(n_samples)
    eps = np.full(n_samples, np.nan)
    term_of = np.full(n_samples, -1, dtype=np.int64)

    chols = [np.linalg.cholesky(np.asarray(c) + 1e-15 * np.eye(d))
             for c in spec.per_term_covariances]
    for i in range(n_in):
        j = int(rng.integers(t))
        X[i] = _exactly_one_x(rng, n, terms, j)
        Y[i] = chols[j] @ rng.standard_normal(d)
        e = spec.noise_sigma * rng.standard_normal()
        z[i] = spec.v_star[0] + spec.v_star[1:] @ Y[i] + e
        eps[i] = e
        term_of[i] = j

    om = spec.outlier_model or OutlierModel()
    v_out = spec.v_star.copy()
    if om.flip_slopes:
        v_out[1:] = -v_out[1:]
    if om.y_covariance is not None:
        chol_out = np.linalg.cholesky(np.asarray(om.y_covariance) + 1e-15 * np.eye(d))
    else:
        chol_out = np.eye(d)
    for i in range(n_in, n_samples):
        X[i] = _no_term_x(rng, n, terms)
        Y[i] = chol_out @ rng.standard_normal(d)
        z[i] = v_out[0] + v_out[1:] @ Y[i] \
            + om.noise_scale * spec.noise_sigma * rng.standard_normal()

    perm = rng.permutation(n_samples)
    inv = np.empty(n_samples, dtype=np.int64)
    inv[perm] = np.arange(n_samples)
    X, Y, z, eps, term_of = X[perm], Y[perm], z[perm], eps[perm], term_of[perm]
    inlier_ids = np.sort(inv[:n_in])

    per_term_Pi = tuple(
        _term_span_projector(spec.v_star, np.asarray(c))
        for c in spec.per_term_covariances
    )
    Pi_star = hyperplane_projector(spec.v_star)

    ds = Dataset(X=X, Y=Y, z=z)
    gt = GroundTruth(
        v_star=spec.v_star.copy(),
        c_star=spec.c_star,
        Pi_star=Pi_star,
        per_term_Pi=per_term_Pi,
        inlier_ids=inlier_ids,
        term_of_inlier=term_of,
        eps=eps,
        spec=spec,
    )
    return ds, gt


def population_second_moment(v_star: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """E[p p^T] for the noise-free extended vector p = [1, y, <v*, (1,y)>]."""
    d = cov.shape[0]
    vs = v_star[1:]
    M = np.zeros((d + 2, d + 2))
    M[0, 0] = 1.0
    M[0, -1] = M[-1, 0] = v_star[0]
    M[1:-1, 1:-1] = cov
    M[1:-1, -1] = M[-1, 1:-1] = cov @ vs
    M[-1, -1] = v_star[0] ** 2 + vs @ cov @ vs
    return M


@dataclass
class CovarianceReport:
    distances: Dict[int, float]
    tol: float

    @property
    def ok(self) -> bool:
        return all(v <= self.tol for v in self.distances.values())


def empirical_covariance_check(dataset: Dataset, gt: GroundTruth,
                               tol: float) -> CovarianceReport:
    """Frobenius distance between projected empirical and population moments."""
    d = dataset.d
    ext = np.column_stack([np.ones(dataset.N), dataset.Y, dataset.z])
    dists: Dict[int, float] = {}
    for j in range(len(gt.c_star.terms)):
        ids = gt.inlier_ids[gt.term_of_inlier[gt.inlier_ids] == j]
        if ids.size == 0:
            continue
        P = gt.per_term_Pi[j]
        proj = ext[ids] @ P.T
        emp = proj.T @ proj / ids.size
        pop = np.asarray(
            P @ population_second_moment(gt.v_star, np.asarray(gt.spec.per_term_covariances[j])) @ P
        )
        dists[j] = float(np.linalg.norm(emp - pop))
    return CovarianceReport(distances=dists, tol=tol)


def planted_term_indices(pd: PreparedDataset, gt: GroundTruth) -> List[int]:
    """Indices of prepared terms whose literals appear in c*."""
    lits = {tm.literals for tm in gt.c_star.terms}
    return [j for j, tm in enumerate(pd.terms) if tm.literals in lits]


def params_from_truth(pd: PreparedDataset, gt: GroundTruth,
                      q_family: Sequence[np.ndarray], margin: float = 1.5,
                      noise_margin: float = 2.0, ell: int = 4,
                      noise_scale: str = "literal") -> ProblemParams:
    """Problem parameters calibrated so the planted point is feasible.

    Every bound is set to the planted point's exact requirement times a
    margin, computed on the prepared (duplicated) data. The resulting
    mu makes the budget row hold exactly at the planted selection.
    """
    planted = planted_term_indices(pd, gt)
    if not planted:
        raise InputError("no planted term survived preprocessing")
    sizes = np.array([pd.terms[j].weight for j in planted], dtype=float)
    mu = float(sizes.sum() / pd.N_prime)
    v_ext = gt.v_ext
    Pi = gt.Pi_star

    sigma_req = 0.0
    alpha_req = 1.0
    beta_req = 1.0
    c_req = 1.0
    mu_N = sizes.sum()
    for j in planted:
        data = pd.Y_ext[pd.terms[j].member_ids]
        resid = data @ v_ext
        tot = abs(float(resid.sum()))
        size = data.shape[0]
        sigma_req = max(sigma_req, tot * size if noise_scale == "literal" else tot)
        alpha_req = max(alpha_req, float((data ** 2).sum(axis=0).max()) / size)
        beta_req = max(beta_req, float((data ** 4).sum(axis=0).max()) / size)
        for Q in q_family:
            qv = np.einsum("ir,rs,is->i", data, Q, data)
            S1, S2 = float(qv.sum()), float(qv @ qv)
            T = float(np.tensordot(Q, Pi))
            if S2 <= 0:
                continue
            c_req = max(c_req, (S2 - 2 * S1 * T + size * T * T) / S2)
            denom = float(np.linalg.norm(Pi @ Q @ Pi) ** 2)
            if denom > 1e-12:
                c_req = max(c_req, S2 / (mu_N * denom))
    return ProblemParams(
        mu=mu,
        sigma=float(noise_margin * max(sigma_req, 1e-12)),
        C=float(margin * c_req),
        alpha=float(margin * alpha_req),
        beta=float(margin * beta_req),
        ell=ell,
    )


def noise_energy_from_truth(pd: PreparedDataset, gt: GroundTruth,
                            margin: float = 2.0) -> float:
    """Calibrated per-point mean squared residual over the planted terms.

    Feeds build_program's noise_energy cap. Noiseless ground truth gives
    exactly 0.0 (sub-rounding residuals are snapped), turning the cap
    into an exact hyperplane pin.
    """
    planted = planted_term_indices(pd, gt)
    if not planted:
        raise InputError("no planted term survived preprocessing")
    v_ext = gt.v_ext
    worst = 0.0
    scale = 0.0
    for j in planted:
        data = pd.Y_ext[pd.terms[j].member_ids]
        resid = data @ v_ext
        worst = max(worst, float(resid @ resid) / data.shape[0])
        scale = max(scale, float((data * data).sum(axis=1).mean()))
    if worst <= 1e-24 * scale:
        return 0.0
    return float(margin * worst)
