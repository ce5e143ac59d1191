"""Greedy k-DNF cover construction and (predictor, condition) scoring.

Once a candidate predictor is fixed, every term has a known loss mass,
and finding a condition is a weighted set-cover problem: admit terms
whose loss mass stays under the eligibility budget, preferring terms
covering the most new points, until enough points are covered.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import CoverFailure, InputError
from .model import KDnf, ProblemParams, term_mask
from .pipeline import RegressionModel
from .preprocess import PreparedDataset


@dataclass(frozen=True)
class LossTable:
    """Squared-residual losses per duplicated row and aggregated per term."""

    per_sample: np.ndarray
    per_term_sum: np.ndarray
    per_term_avg: np.ndarray

    def __post_init__(self):
        if (self.per_sample < 0).any():
            raise InputError("losses must be nonnegative")


def compute_losses(model: RegressionModel, pd: PreparedDataset) -> LossTable:
    """f^(i)(v) = (z^(i) - <v, (1, y^(i))>)^2 over all duplicated rows."""
    v = model.v_hat
    if v.shape[0] != pd.d + 1:
        raise InputError(f"predictor has {v.shape[0]} coords, need {pd.d + 1}")
    pred = pd.Y_ext[:, :-1] @ v
    f = (pd.Y_ext[:, -1] - pred) ** 2
    sums = np.zeros(pd.m)
    avgs = np.zeros(pd.m)
    for j, term in enumerate(pd.terms):
        s = float(f[term.member_ids].sum())
        sums[j] = s
        avgs[j] = s / term.weight if term.weight else 0.0
    return LossTable(per_sample=f, per_term_sum=sums, per_term_avg=avgs)


def greedy_cover(losses: LossTable, pd: PreparedDataset,
                 params: ProblemParams) -> KDnf:
    """Admit low-loss terms maximizing newly covered rows until coverage.

    Eligibility: per-term loss sum <= (1+gamma) mu epsilon_target N'.
    Coverage target: (1 - gamma/2) mu N' rows satisfying some chosen
    term. Ties break by lower loss sum, then lower term index. Rows are
    the duplicated points, so one original sample can be covered through
    several terms but each row counts once.
    """
    budget = (1.0 + params.gamma) * params.mu * params.epsilon_target * pd.N_prime
    target = (1.0 - params.gamma / 2.0) * params.mu * pd.N_prime
    eligible = [j for j in range(pd.m) if losses.per_term_sum[j] <= budget]
    row_masks = {j: term_mask(pd.terms[j], pd.X) for j in eligible}

    covered = np.zeros(pd.n_rows, dtype=bool)
    chosen: List[int] = []
    while covered.sum() < target:
        best_j = -1
        best_gain = 0
        for j in eligible:
            if j in chosen:
                continue
            gain = int((row_masks[j] & ~covered).sum())
            if gain > best_gain or (
                gain == best_gain and gain > 0 and best_j >= 0
                and (losses.per_term_sum[j], j)
                < (losses.per_term_sum[best_j], best_j)
            ):
                best_j = j
                best_gain = gain
        if best_j < 0 or best_gain == 0:
            total = float(losses.per_sample[covered].sum())
            raise CoverFailure(
                "eligible terms exhausted before reaching coverage",
                coverage=float(covered.sum()) / pd.N_prime if pd.N_prime else 0.0,
                total_loss=total,
                details={"chosen": list(chosen), "target_rows": target},
            )
        chosen.append(best_j)
        covered |= row_masks[best_j]
    for j in chosen:
        assert losses.per_term_sum[j] <= budget
    return KDnf(terms=tuple(pd.terms[j] for j in chosen))


@dataclass(frozen=True)
class ScoreReport:
    coverage: float
    conditional_mean_loss: float
    total_loss: float
    n_covered: int
    losses_defined: bool


def score_pair(model: RegressionModel, c: KDnf,
               pd: PreparedDataset) -> ScoreReport:
    """Exact recomputation of coverage and conditional loss for a pair."""
    losses = compute_losses(model, pd)
    if not c.terms:
        return ScoreReport(0.0, float("nan"), float("nan"), 0, False)
    mask = np.zeros(pd.n_rows, dtype=bool)
    for term in c.terms:
        mask |= term_mask(term, pd.X)
    n_cov = int(mask.sum())
    if n_cov == 0:
        return ScoreReport(0.0, float("nan"), float("nan"), 0, False)
    total = float(losses.per_sample[mask].sum())
    return ScoreReport(
        coverage=n_cov / pd.N_prime if pd.N_prime else 0.0,
        conditional_mean_loss=total / n_cov,
        total_loss=total,
        n_covered=n_cov,
        losses_defined=True,
    )


def best_pair(models: Sequence[RegressionModel], pd: PreparedDataset,
              params: ProblemParams) -> Tuple[RegressionModel, KDnf, ScoreReport]:
    """Cover every candidate and keep the lowest conditional mean loss.

    Ties go to higher coverage, then earlier list position, which makes
    the selection deterministic for identical candidates.
    """
    if not models:
        raise InputError("need at least one candidate model")
    best = None
    failures: Dict[int, str] = {}
    for idx, model in enumerate(models):
        losses = compute_losses(model, pd)
        try:
            c = greedy_cover(losses, pd, params)
        except CoverFailure as e:
            failures[idx] = f"coverage {e.coverage:.3f}: {e}"
            continue
        rep = score_pair(model, c, pd)
        key = (rep.conditional_mean_loss, -rep.coverage, idx)
        if best is None or key < best[0]:
            best = (key, model, c, rep)
    if best is None:
        raise CoverFailure(
            "every candidate model failed to cover",
            details={"per_model": failures},
        )
    _, model, c, rep = best
    model.condition = c
    return model, c, rep
