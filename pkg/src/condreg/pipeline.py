"""Relaxation solve, candidate extraction, and predictor recovery.

The rounding pipeline: solve the moment relaxation minimizing the
squared l2 norm of per-sample pseudo-weights, read off one candidate
projector per selected sample as a ratio of pseudo-moments, sample a
multiset of candidates by selection probability, snap each to an honest
projector, and read the predictor off its null space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    DegenerateResponseError,
    InputError,
    NonIdentifiableError,
    SolverFailure,
)
from .model import KDnf
from .program import CompiledProgram
from .sdp import SdpProblem, SdpSolution, SolveOptions, solve
from .sos import MomentVector, PseudoDistribution, mono_mul


@dataclass
class ProjectionCandidate:
    """One extracted projector guess tied to the sample that produced it."""

    Pi_hat: np.ndarray
    source: int
    probability: float
    post_processed: bool = False
    spectral_gap: float = float("nan")

    def __post_init__(self):
        self.Pi_hat = np.asarray(self.Pi_hat, dtype=float)
        if self.Pi_hat.ndim != 2 or self.Pi_hat.shape[0] != self.Pi_hat.shape[1]:
            raise InputError("Pi_hat must be square")
        if not np.allclose(self.Pi_hat, self.Pi_hat.T, atol=1e-9):
            raise InputError("Pi_hat must be symmetric")
        self.Pi_hat = 0.5 * (self.Pi_hat + self.Pi_hat.T)
        if self.post_processed:
            evs = np.linalg.eigvalsh(self.Pi_hat)
            if evs.min() < -1e-9 or evs.max() > 1 + 1e-9:
                raise InputError("post-processed candidate must have eigenvalues in [0,1]")


@dataclass
class RegressionModel:
    """Recovered predictor; the conditioning DNF is filled in later."""

    v_hat: np.ndarray
    source: int = -1
    condition: Optional[KDnf] = None

    def __post_init__(self):
        self.v_hat = np.asarray(self.v_hat, dtype=float).ravel()
        if not np.all(np.isfinite(self.v_hat)):
            raise InputError("v_hat entries must be finite")

    def predict(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        return self.v_hat[0] + Y @ self.v_hat[1:]


def _program_mu(cp: CompiledProgram) -> float:
    total = float(cp.term_sizes.sum())
    return cp.mu_N / total if total > 0 else 0.0


def relaxation_objective(cp: CompiledProgram, kind: str = "l2") -> SdpProblem:
    """Attach the rounding objective to the compiled problem.

    "l2" minimizes sum_i E[sel_i]^2 = sum_j |I_j| E[w_j]^2; "total" is the
    linear total-weight alternative (monotone in the budget row, kept only
    as a config escape hatch).
    """
    p = cp.problem
    q = np.zeros(p.n_u)
    c = None
    if kind == "l2":
        for coord, size in cp.selector_coords():
            q[coord] = float(size)
    elif kind == "total":
        c = np.zeros(p.n_u)
        for coord, size in cp.selector_coords():
            c[coord] = float(size)
        q = None
    else:
        raise InputError(f"unknown objective kind {kind!r}")
    return SdpProblem(n_u=p.n_u, blocks=p.blocks, A=p.A, b=p.b, G=p.G,
                      h=p.h, c=c, q=q)


def selection_probabilities(cp: CompiledProgram, u: np.ndarray) -> np.ndarray:
    """Per-row probability E[sel_i] / (mu N'); rows outside every term get 0."""
    term_of = cp.term_of_rows
    probs = np.zeros(term_of.shape[0])
    w_moms = np.array([float(u[coord]) for coord, _ in cp.selector_coords()])
    member = term_of >= 0
    probs[member] = w_moms[term_of[member]] / cp.mu_N
    return probs


def solve_relaxation(cp: CompiledProgram, opts: Optional[SolveOptions] = None,
                     objective: str = "l2") -> PseudoDistribution:
    """Solve the relaxation and wrap the moment vector for rounding.

    Raises SolverFailure with the stalled-gap diagnostics when the solver
    declares the program infeasible. A max_iters exit is propagated in
    the metadata, not raised: partially converged moments still round.
    """
    opts = opts or SolveOptions()
    problem = relaxation_objective(cp, objective)
    sol = solve(problem, opts)
    if sol.status == "infeasible":
        raise SolverFailure(
            "relaxation declared infeasible by the stalled-gap heuristic",
            diagnostics=sol.diagnostics,
        )
    return wrap_solution(cp, sol, objective=objective)


def wrap_solution(cp: CompiledProgram, sol: SdpSolution,
                  objective: str = "l2") -> PseudoDistribution:
    """Package a raw solver solution as a PseudoDistribution with metadata.

    The basis is left empty: the moment vector only carries the sparse
    block monomials, so the dense moment-matrix diagnostic does not
    apply. min_eig is the smallest block eigenvalue from the solver.
    """
    values = {mono: float(sol.u[i]) for mono, i in cp.u_index.items()}
    mv = MomentVector(values=values, ell=cp.ell)
    pd = PseudoDistribution(moments=mv, basis=(), min_eig=sol.min_block_eig)
    pd.meta.update(
        status=sol.status,
        iterations=sol.iterations,
        primal_residual=sol.primal_residual,
        objective=sol.objective,
        objective_kind=objective,
        selection_probabilities=selection_probabilities(cp, sol.u),
        term_of_rows=cp.term_of_rows,
        mu_N=cp.mu_N,
    )
    return pd


def _term_averaged_pi(cp: CompiledProgram, pd: PseudoDistribution,
                      jt: int) -> np.ndarray:
    """E[w_jt * sum_j w(I_j) Pi_j] as a matrix, before denominator division."""
    pv = cp.vars
    dim = pv.dim
    num = np.zeros((dim, dim))
    wjt = ((pv.w_id(jt), 1),)
    for j in range(len(cp.term_sizes)):
        size = cp.term_sizes[j]
        wj = ((pv.w_id(j), 1),)
        for r in range(dim):
            for s in range(r, dim):
                mono = mono_mul(mono_mul(wjt, wj), ((pv.pi_id(j, r, s), 1),))
                val = size * pd.moments[mono]
                num[r, s] += val
                if s > r:
                    num[s, r] += val
    return num / cp.mu_N


def extract_candidates(pd_moments: PseudoDistribution, cp: CompiledProgram,
                       threshold: Optional[float] = None) -> List[ProjectionCandidate]:
    """One candidate per selected sample row, Pi read as the weighted average.

    Rows sharing a term share the same moments, so the matrix is computed
    once per term. Rows with selection weight at or below the threshold
    (default 1e-6 * mu) are omitted rather than zero-filled.
    """
    pv = cp.vars
    if threshold is None:
        threshold = 1e-6 * _program_mu(cp)
    m = len(cp.term_sizes)
    dens = [pd_moments.moments[((pv.w_id(j), 1),)] for j in range(m)]
    mats = [None] * m
    probs = pd_moments.meta.get("selection_probabilities")
    if probs is None:
        raise InputError("moments lack selection metadata; use solve_relaxation")
    out: List[ProjectionCandidate] = []
    for i, j in enumerate(cp.term_of_rows):
        j = int(j)
        if j < 0 or dens[j] <= threshold:
            continue
        if mats[j] is None:
            mats[j] = _term_averaged_pi(cp, pd_moments, j) / dens[j]
        out.append(ProjectionCandidate(
            Pi_hat=mats[j], source=i, probability=float(probs[i]),
        ))
    return out


def sample_multiset(pd_moments: PseudoDistribution, count: int, seed: int,
                    tol: float = 1e-3) -> List[int]:
    """Draw `count` sample indices with probability E[sel_i] / (mu N').

    The probabilities sum to 1 exactly when the budget row holds; small
    solver slack is renormalized away, anything beyond tol is an
    inconsistency worth failing on.
    """
    if count < 0:
        raise InputError("count must be >= 0")
    probs = pd_moments.meta.get("selection_probabilities")
    if probs is None:
        raise InputError("moments lack selection metadata; use solve_relaxation")
    probs = np.clip(np.asarray(probs, dtype=float), 0.0, None)
    total = float(probs.sum())
    if abs(total - 1.0) > tol:
        raise ConsistencyError(
            f"selection probabilities sum to {total:.6f}, deviation beyond {tol}"
        )
    probs = probs / total
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(probs.shape[0], size=count, p=probs)]


def project_to_projector(m: np.ndarray, rank_hint: Optional[int] = None,
                         source: int = -1,
                         probability: float = float("nan")) -> ProjectionCandidate:
    """Snap a symmetric matrix to the nearest projector by eigenvalue rounding."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError("need a square matrix")
    if not np.allclose(m, m.T, atol=1e-8):
        raise InputError("need a symmetric matrix")
    m = 0.5 * (m + m.T)
    evals, evecs = np.linalg.eigh(m)
    if rank_hint is not None:
        if not 0 <= rank_hint <= m.shape[0]:
            raise InputError("rank_hint out of range")
        keep = np.zeros(m.shape[0], dtype=bool)
        keep[np.argsort(evals)[::-1][:rank_hint]] = True
    else:
        keep = evals >= 0.5
    V = evecs[:, keep]
    Pi = V @ V.T
    if keep.all() or not keep.any():
        gap = float("inf")
    else:
        gap = float(evals[keep].min() - evals[~keep].max())
    return ProjectionCandidate(Pi_hat=Pi, source=source, probability=probability,
                               post_processed=True, spectral_gap=gap)


def recover_predictor(c: ProjectionCandidate, null_tol: float = 1e-8) -> RegressionModel:
    """Read the predictor off the projector's null space.

    The hyperplane normal is the null direction; scaling its response
    coordinate to -1 turns it back into (intercept, slopes).
    """
    if not c.post_processed:
        raise InputError("candidate must be post-processed first")
    evals, evecs = np.linalg.eigh(c.Pi_hat)
    null = evecs[:, evals < 0.5]
    if null.shape[1] == 0:
        raise NonIdentifiableError("projector is full rank: no hyperplane normal")
    last = np.abs(null[-1, :])
    best = int(np.argmax(last))
    if last[best] <= null_tol:
        raise DegenerateResponseError(
            "every null direction ignores the response coordinate"
        )
    eta = null[:, best]
    v_ext = -eta / eta[-1]
    return RegressionModel(v_hat=v_ext[:-1], source=c.source)


def round_candidates(pd_moments: PseudoDistribution, cp: CompiledProgram,
                     count: Optional[int] = None, seed: int = 0,
                     rank_hint: Optional[int] = None,
                     multiset_factor: float = 4.0) -> List[ProjectionCandidate]:
    """Algorithm steps 2-4 composed: extract, sample, post-process.

    Multiset size defaults to ceil(multiset_factor / mu) draws; the
    returned list keeps one post-processed candidate per drawn sample
    that produced a usable matrix.
    """
    if count is None:
        mu = _program_mu(cp)
        if mu <= 0:
            raise InputError("cannot size the multiset with mu = 0")
        count = int(np.ceil(multiset_factor / mu))
    cands = extract_candidates(pd_moments, cp)
    by_source = {c.source: c for c in cands}
    drawn = sample_multiset(pd_moments, count, seed)
    out = []
    for i in drawn:
        c = by_source.get(i)
        if c is None:
            continue
        out.append(project_to_projector(
            c.Pi_hat, rank_hint=rank_hint, source=c.source,
            probability=c.probability,
        ))
    return out
