"""Scikit-learn style estimator facade over the full pipeline.

The estimator consumes a single design matrix whose first n_attributes
columns are the Boolean attributes and the rest the real predictors,
mirroring how mixed tabular data usually arrives. Everything else is
the library pipeline with defaults chosen for desk-scale problems.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .cover import best_pair
from .errors import CondregError, InputError
from .model import Dataset, ProblemParams, dnf_mask
from .pipeline import recover_predictor, round_candidates, solve_relaxation
from .preprocess import prepare
from .program import build_program, default_q_family
from .sdp import SolveOptions


class ConditionalLinearRegressor(BaseEstimator, RegressorMixin):
    """Joint k-DNF condition and linear predictor estimator.

    Parameters mirror the pipeline configuration. mu is the fraction of
    the duplicated dataset the condition must cover. Cap parameters
    (sigma, C, alpha, beta) default to data-driven medians across terms
    scaled by margin; override any of them through `params`.
    """

    def __init__(self, n_attributes: Optional[int] = None, k: int = 1,
                 mu: float = 0.1, ell: int = 4, q_random: int = 8,
                 margin: float = 1.5, params: Optional[dict] = None,
                 solver: Optional[dict] = None, multiset_factor: float = 4.0,
                 rank_hint: Optional[int] = None, random_state: int = 0):
        self.n_attributes = n_attributes
        self.k = k
        self.mu = mu
        self.ell = ell
        self.q_random = q_random
        self.margin = margin
        self.params = params
        self.solver = solver
        self.multiset_factor = multiset_factor
        self.rank_hint = rank_hint
        self.random_state = random_state

    def _split(self, X: np.ndarray):
        X = np.asarray(X)
        if self.n_attributes is None:
            raise InputError("n_attributes must be set to split the design matrix")
        n = int(self.n_attributes)
        if X.ndim != 2 or X.shape[1] <= n:
            raise InputError(
                f"need a 2d matrix with more than {n} columns, got {X.shape}")
        bits = X[:, :n]
        if not np.isin(bits, (0, 1)).all():
            raise InputError("attribute columns must be 0/1")
        return bits.astype(np.uint8), np.asarray(X[:, n:], dtype=float)

    def _default_params(self, pdset, q_family) -> ProblemParams:
        """Median-across-terms caps: strict terms stay feasible, extreme
        ones (usually outlier-heavy) get suppressed."""
        overrides = dict(self.params or {})
        mu = overrides.pop("mu", self.mu)
        self._energy_override = overrides.pop("noise_energy", None)
        sizes = np.array([t.weight for t in pdset.terms], dtype=float)
        per_term_m2 = []
        per_term_m4 = []
        per_term_noise = []
        per_term_energy = []
        for term in pdset.terms:
            data = pdset.Y_ext[term.member_ids]
            per_term_m2.append((data ** 2).mean(axis=0).max())
            per_term_m4.append((data ** 4).mean(axis=0).max())
            v0, *_ = np.linalg.lstsq(data[:, :-1], data[:, -1], rcond=None)
            resid = data[:, -1] - data[:, :-1] @ v0
            per_term_noise.append(abs(float(resid.sum())) * data.shape[0])
            per_term_energy.append(float(resid @ resid) / data.shape[0])
        defaults = {
            "alpha": self.margin * float(np.median(per_term_m2)),
            "beta": self.margin * float(np.median(per_term_m4)),
            "sigma": max(2.0 * self.margin * float(np.median(per_term_noise)), 1e-9),
            "C": 8.0 * self.margin * float(sizes.max()),
        }
        defaults.update(overrides)
        if self._energy_override is None:
            self._energy_override = 2.0 * self.margin * float(
                np.median(per_term_energy))
        return ProblemParams(mu=mu, ell=self.ell, **defaults)

    def fit(self, X, y):
        bits, reals = self._split(X)
        z = np.asarray(y, dtype=float).ravel()
        if z.shape[0] != bits.shape[0]:
            raise InputError("X and y row counts differ")
        ds = Dataset(X=bits, Y=reals, z=z)
        pdset = prepare(ds, k=self.k)
        qf = default_q_family(ds.d, count_random=self.q_random,
                              seed=self.random_state)
        params = self._default_params(pdset, qf)
        cp = build_program(pdset, params, qf, ell=self.ell, rank=ds.d + 1,
                           noise_energy=self._energy_override)
        opts = SolveOptions(**(self.solver or {"tol": 1e-6, "max_iters": 4000}))
        moments = solve_relaxation(cp, opts)
        cands = round_candidates(
            moments, cp, seed=self.random_state, rank_hint=self.rank_hint,
            multiset_factor=self.multiset_factor)
        models = []
        for c in cands:
            try:
                models.append(recover_predictor(c))
            except CondregError:
                continue
        if not models:
            raise CondregError("no usable predictor recovered from the relaxation")
        model, condition, score = best_pair(models, pdset, params)
        self.v_hat_ = model.v_hat
        self.condition_ = condition
        self.Pi_hat_ = next(
            c.Pi_hat for c in cands if c.source == model.source)
        self.score_report_ = score
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "v_hat_")
        _, reals = self._split(X)
        return self.v_hat_[0] + reals @ self.v_hat_[1:]

    def condition_mask(self, X) -> np.ndarray:
        """Which rows the learned condition covers."""
        check_is_fitted(self, "condition_")
        bits, _ = self._split(X)
        return dnf_mask(self.condition_, bits)
