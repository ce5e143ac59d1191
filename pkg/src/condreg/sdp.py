"""Desk-scale SDP solver by operator splitting.

A problem couples a scalar decision vector u with one or more symmetric
PSD blocks: every block entry reads one u coordinate, so the blocks are
"views" of u and the feasible set is {u : A u = b, G u <= h, every block
PSD}. The objective is c.u plus an optional diagonal quadratic
sum_i q_i u_i^2 with q_i >= 0.

solve() runs two-block ADMM between the affine set {A u = b} (with the
objective) and the product of PSD cones. The u-step is an equality-
constrained diagonal-quadratic minimization solved through a Schur
complement whose factorization is cached across iterations; the Z-step
is an eigendecomposition clip per block. Inequalities are compiled to
slack coordinates projected onto a vectorized nonnegativity cone, which
keeps the u-step Hessian diagonal. Constraint rows are rescaled to unit
norm internally; mixed row scales otherwise stall the splitting badly.

Infeasibility detection is heuristic: if the smoothed projection gap
stalls above a threshold for a configured window, the run is declared
infeasible. It is only trustworthy on problems with comfortable
margins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InputError


@dataclass(frozen=True)
class BlockSpec:
    """A dim x dim symmetric PSD block whose (i,j) entry is u[idx[i,j]]."""

    name: str
    idx: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.idx, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
            raise InputError(f"block {self.name}: index map must be square, got {arr.shape}")
        if not np.array_equal(arr, arr.T):
            raise InputError(f"block {self.name}: index map must be symmetric")
        if arr.min() < 0:
            raise InputError(f"block {self.name}: negative u index")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "idx", arr)

    @property
    def dim(self) -> int:
        return self.idx.shape[0]


def _csr(mat, n_cols: int, what: str) -> sp.csr_matrix:
    if mat is None:
        return sp.csr_matrix((0, n_cols))
    m = sp.csr_matrix(mat)
    if m.shape[1] != n_cols:
        raise InputError(f"{what} has {m.shape[1]} columns, expected {n_cols}")
    if m.nnz and not np.isfinite(m.data).all():
        raise InputError(f"{what} must be finite")
    return m


@dataclass(frozen=True)
class SdpProblem:
    """Blocks + affine constraints + (linear, diagonal-quadratic) objective."""

    n_u: int
    blocks: Tuple[BlockSpec, ...]
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    c: np.ndarray
    q: np.ndarray

    def __init__(self, n_u, blocks, A=None, b=None, G=None, h=None, c=None, q=None):
        n_u = int(n_u)
        if n_u < 1:
            raise InputError("n_u must be >= 1")
        blocks = tuple(blocks)
        if not blocks:
            raise InputError("at least one PSD block is required")
        for blk in blocks:
            if blk.idx.max() >= n_u:
                raise InputError(f"block {blk.name} references u index {blk.idx.max()} >= n_u")
        A = _csr(A, n_u, "A")
        G = _csr(G, n_u, "G")
        b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float)
        h = np.zeros(G.shape[0]) if h is None else np.asarray(h, dtype=float)
        if b.shape != (A.shape[0],):
            raise InputError(f"b has shape {b.shape}, expected ({A.shape[0]},)")
        if h.shape != (G.shape[0],):
            raise InputError(f"h has shape {h.shape}, expected ({G.shape[0]},)")
        c = np.zeros(n_u) if c is None else np.asarray(c, dtype=float)
        q = np.zeros(n_u) if q is None else np.asarray(q, dtype=float)
        if c.shape != (n_u,) or q.shape != (n_u,):
            raise InputError("objective vectors must have length n_u")
        if not (np.isfinite(b).all() and np.isfinite(h).all()
                and np.isfinite(c).all() and np.isfinite(q).all()):
            raise InputError("constraint and objective data must be finite")
        if (q < 0).any():
            raise InputError("quadratic objective weights must be >= 0")
        # zero rows in A make the u-step Schur complement singular
        row_nnz = np.diff(A.indptr)
        if (row_nnz == 0).any():
            raise InputError("A contains an all-zero row")
        for name, arr in (("b", b), ("h", h), ("c", c), ("q", q)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n_u", n_u)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "G", G)

    def block_values(self, u: np.ndarray, i: int) -> np.ndarray:
        return u[self.blocks[i].idx]

    def objective_value(self, u: np.ndarray) -> float:
        return float(self.c @ u + self.q @ (u * u))


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    max_iters: int = 20000
    rho: float = 1.0
    seed: int = 0
    init: str = "zeros"
    over_relax: float = 1.0
    stall_window: int = 100
    stall_rel: float = 0.01
    stall_gap: float = 1e-4
    adapt_rho: bool = True
    adapt_every: int = 100
    adapt_ratio: float = 10.0
    adapt_factor: float = 2.0
    max_adapts: int = 30

    def __post_init__(self):
        if self.tol <= 0 or self.rho <= 0 or self.max_iters < 1:
            raise InputError("tol, rho must be > 0 and max_iters >= 1")
        if self.init not in ("zeros", "random"):
            raise InputError(f"unknown init {self.init!r}")
        if not 0.5 <= self.over_relax <= 1.9:
            raise InputError("over_relax must lie in [0.5, 1.9]")
        if self.adapt_every < 1 or self.adapt_ratio <= 1 or self.adapt_factor <= 1:
            raise InputError("adapt_every >= 1, adapt_ratio > 1, adapt_factor > 1")


@dataclass
class SdpSolution:
    u: np.ndarray
    status: str
    primal_residual: float
    min_block_eig: float
    objective: float
    iterations: int
    diagnostics: dict = field(default_factory=dict)


def _row_scaled(mat: sp.csr_matrix, rhs: np.ndarray):
    """Unit 2-norm rows; pure row scaling leaves the feasible set alone."""
    if mat.shape[0] == 0:
        return mat, rhs
    norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
    inv = 1.0 / np.where(norms > 0, norms, 1.0)
    return sp.diags(inv) @ mat, rhs * inv


class _Cones:
    """Scaled equality system plus cone layout for the splitting loop.

    Inequalities become slack coordinates appended after the moment
    vector; the slacks live in one vectorized nonnegativity cone rather
    than 1x1 PSD blocks, which keeps the per-iteration work a handful
    of array ops.
    """

    def __init__(self, p: SdpProblem):
        self.n_u = p.n_u
        self.n_ineq = p.G.shape[0]
        self.n = p.n_u + self.n_ineq
        A, b = _row_scaled(p.A, p.b)
        if self.n_ineq:
            G, h = _row_scaled(p.G, p.h)
            # slack column scale matches its row: s_i' = s_i / ||row_i||
            self.A = sp.vstack(
                [
                    sp.hstack([A, sp.csr_matrix((A.shape[0], self.n_ineq))]),
                    sp.hstack([G, sp.identity(self.n_ineq, format="csr")]),
                ],
                format="csr",
            )
            self.b = np.concatenate([b, h])
        else:
            self.A = A.tocsr()
            self.b = b
        self.blocks = p.blocks
        self.c = np.concatenate([p.c, np.zeros(self.n_ineq)])
        self.q = np.concatenate([p.q, np.zeros(self.n_ineq)])
        mult = np.zeros(self.n)
        if p.blocks:
            np.add.at(
                mult,
                np.concatenate([blk.idx.ravel() for blk in p.blocks]),
                1.0,
            )
        mult[p.n_u:] = 1.0
        self.mult = mult


def _psd_project(S: np.ndarray) -> Tuple[np.ndarray, float]:
    """Nearest PSD matrix in Frobenius norm; returns it and min eigenvalue."""
    if S.shape == (1, 1):
        v = S[0, 0]
        return (S if v >= 0.0 else np.zeros((1, 1))), float(v)
    Ssym = 0.5 * (S + S.T)
    evals, evecs = np.linalg.eigh(Ssym)
    if evals[0] >= 0.0:
        return Ssym, float(evals[0])
    clipped = np.clip(evals, 0.0, None)
    return (evecs * clipped) @ evecs.T, float(evals[0])


def _min_eig(S: np.ndarray) -> float:
    if not np.isfinite(S).all():
        return float("-inf")
    if S.shape == (1, 1):
        return float(S[0, 0])
    try:
        return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])
    except np.linalg.LinAlgError:
        return float("-inf")


class _UStep:
    """Cached KKT solve: min (1/2) u'Hu - r'u  s.t.  A u = b, H diagonal.

    Moment programs carry exactly dependent equality rows (the same
    identity reached through different multiplier routes), so the Schur
    complement A H^-1 A' is singular by construction. Any solution of
    the consistent normal system yields the same u, but sparse LU on a
    singular matrix turns on pivot luck; a small Tikhonov shift plus
    iterative refinement gives the minimum-norm behavior reliably.
    """

    def __init__(self, cones: _Cones, rho: float):
        H = 2.0 * cones.q + rho * cones.mult
        if (H <= 0).any():
            i = int(np.argmin(H))
            raise InputError(
                f"u coordinate {i} appears in no block and has no quadratic weight"
            )
        self.Hinv = 1.0 / H
        self.A = cones.A
        self.b = cones.b
        if cones.A.shape[0]:
            S = (cones.A @ sp.diags(self.Hinv) @ cones.A.T).tocsc()
            shift = 1e-10 * max(1.0, float(S.diagonal().max()))
            self.lu = spla.splu(S + shift * sp.identity(S.shape[0], format="csc"))
        else:
            self.lu = None

    def solve(self, r: np.ndarray) -> np.ndarray:
        if self.lu is None:
            return self.Hinv * r
        rhs = self.A @ (self.Hinv * r) - self.b
        lam = self.lu.solve(rhs)
        u = self.Hinv * (r - self.A.T @ lam)
        # refinement drives A u = b back down; the shift biases each pass
        scale = 1.0 + float(np.abs(self.b).max()) if self.b.size else 1.0
        for _ in range(3):
            resid = self.b - self.A @ u
            if float(np.abs(resid).max()) <= 1e-12 * scale:
                break
            lam2 = self.lu.solve(-resid)
            u = u - self.Hinv * (self.A.T @ lam2)
        return u


def solve(p: SdpProblem, opts: Optional[SolveOptions] = None) -> SdpSolution:
    """Run ADMM between the affine set and the PSD cone product."""
    opts = opts or SolveOptions()
    cones = _Cones(p)
    n = cones.n
    n_ineq = cones.n_ineq
    rho = opts.rho
    ustep = _UStep(cones, rho)

    if opts.init == "random":
        rng = np.random.default_rng(opts.seed)
        Z = [np.eye(blk.dim) + 0.01 * rng.standard_normal((blk.dim, blk.dim))
             for blk in cones.blocks]
        Z = [0.5 * (M + M.T) for M in Z]
    else:
        Z = [np.zeros((blk.dim, blk.dim)) for blk in cones.blocks]
    Y = [np.zeros((blk.dim, blk.dim)) for blk in cones.blocks]
    zs = np.zeros(n_ineq)
    ys = np.zeros(n_ineq)

    alpha = opts.over_relax
    gap_ema = None
    gap_hist: List[float] = []
    status = "max_iters"
    it = 0
    primal = float("inf")
    dual = float("inf")
    u = np.zeros(n)
    n_adapts = 0
    last_adapt_it = 0

    for it in range(1, opts.max_iters + 1):
        # u-step: r collects rho*(Z - Y/rho) pushed back onto u coordinates
        r = -cones.c.copy()
        for blk, Zb, Yb in zip(cones.blocks, Z, Y):
            C = Zb - Yb / rho
            np.add.at(r, blk.idx.ravel(), rho * C.ravel())
        if n_ineq:
            r[p.n_u:] += rho * zs - ys
        u = ustep.solve(r)

        primal = 0.0
        dual = 0.0
        for bi, blk in enumerate(cones.blocks):
            V = u[blk.idx]
            Vhat = alpha * V + (1.0 - alpha) * Z[bi]
            Znew, _ = _psd_project(Vhat + Y[bi] / rho)
            Y[bi] = Y[bi] + rho * (Vhat - Znew)
            primal = max(primal, float(np.linalg.norm(V - Znew)))
            dual = max(dual, rho * float(np.linalg.norm(Znew - Z[bi])))
            Z[bi] = Znew
        if n_ineq:
            v = u[p.n_u:]
            vhat = alpha * v + (1.0 - alpha) * zs
            znew = np.maximum(vhat + ys / rho, 0.0)
            ys = ys + rho * (vhat - znew)
            primal = max(primal, float(np.abs(v - znew).max()))
            dual = max(dual, rho * float(np.abs(znew - zs).max()))
            zs = znew

        gap_ema = primal if gap_ema is None else 0.9 * gap_ema + 0.1 * primal
        gap_hist.append(gap_ema)

        if primal <= opts.tol and dual <= opts.tol:
            status = "optimal"
            break
        if not np.isfinite(primal) or primal > 1e14:
            status = "diverged"
            break

        # residual balancing: growing rho weights consensus, shrinking it
        # weights the dual; each change refactors the cached KKT system
        if (opts.adapt_rho and n_adapts < opts.max_adapts
                and it % opts.adapt_every == 0):
            new_rho = rho
            if primal > opts.adapt_ratio * dual:
                new_rho = rho * opts.adapt_factor
            elif dual > opts.adapt_ratio * primal:
                new_rho = rho / opts.adapt_factor
            if new_rho != rho:
                rho = new_rho
                ustep = _UStep(cones, rho)
                n_adapts += 1
                last_adapt_it = it
                gap_hist.clear()
                gap_ema = None

        w = opts.stall_window
        if len(gap_hist) >= 2 * w and it - last_adapt_it >= 2 * w:
            old = gap_hist[-w]
            if (old - gap_ema) < opts.stall_rel * old and gap_ema > opts.stall_gap:
                status = "infeasible"
                break

    u_out = u[: p.n_u]
    min_eig = min(_min_eig(p.block_values(u_out, i)) for i in range(len(p.blocks)))
    eq_resid = float(np.abs(p.A @ u_out - p.b).max()) if p.A.shape[0] else 0.0
    ineq_resid = float(np.clip(p.G @ u_out - p.h, 0.0, None).max()) if n_ineq else 0.0
    if status == "optimal" and not p.c.any() and not p.q.any():
        status = "feasible"
    return SdpSolution(
        u=u_out,
        status=status,
        primal_residual=max(primal, eq_resid, ineq_resid),
        min_block_eig=min_eig,
        objective=p.objective_value(u_out),
        iterations=it,
        diagnostics={
            "equality_residual": eq_resid,
            "inequality_residual": ineq_resid,
            "projection_gap": primal,
            "dual_gap": dual,
            "rho_final": rho,
            "n_rho_adapts": n_adapts,
            "gap_tail": gap_hist[-5:],
        },
    )


def certify(sol: SdpSolution, p: SdpProblem, tol: float = 1e-6) -> bool:
    """Re-check every constraint and block eigenvalue from the raw u."""
    u = np.asarray(sol.u, dtype=float)
    if u.shape != (p.n_u,) or not np.isfinite(u).all():
        return False
    if p.A.shape[0] and np.abs(p.A @ u - p.b).max() > tol:
        return False
    if p.G.shape[0] and (p.G @ u - p.h).max() > tol:
        return False
    for i in range(len(p.blocks)):
        if _min_eig(p.block_values(u, i)) < -tol:
            return False
    return True


def dump_problem(p: SdpProblem, fp) -> None:
    """Write the problem in a plain-text triplet format.

    Lines: ``NU n``; ``BLOCK name dim`` then ``ENTRY bi i j uidx`` for
    i <= j; ``EQ rows`` then ``A r c v`` / ``B r v``; ``INEQ rows`` then
    ``G r c v`` / ``H r v``; ``OBJLIN i v`` and ``OBJQUAD i v`` for
    nonzeros. All indices 0-based.
    """
    own = isinstance(fp, str)
    f = open(fp, "w", encoding="utf-8") if own else fp
    try:
        f.write(f"NU {p.n_u}\n")
        for bi, blk in enumerate(p.blocks):
            f.write(f"BLOCK {blk.name} {blk.dim}\n")
            for i in range(blk.dim):
                for j in range(i, blk.dim):
                    f.write(f"ENTRY {bi} {i} {j} {blk.idx[i, j]}\n")
        f.write(f"EQ {p.A.shape[0]}\n")
        coo = p.A.tocoo()
        for r, c, v in zip(coo.row, coo.col, coo.data):
            f.write(f"A {r} {c} {float(v)!r}\n")
        for r, v in enumerate(p.b):
            f.write(f"B {r} {float(v)!r}\n")
        f.write(f"INEQ {p.G.shape[0]}\n")
        coo = p.G.tocoo()
        for r, c, v in zip(coo.row, coo.col, coo.data):
            f.write(f"G {r} {c} {float(v)!r}\n")
        for r, v in enumerate(p.h):
            f.write(f"H {r} {float(v)!r}\n")
        for i, v in enumerate(p.c):
            if v:
                f.write(f"OBJLIN {i} {float(v)!r}\n")
        for i, v in enumerate(p.q):
            if v:
                f.write(f"OBJQUAD {i} {float(v)!r}\n")
    finally:
        if own:
            f.close()
