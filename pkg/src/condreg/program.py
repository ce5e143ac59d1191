"""Compiles the selector/predictor/projector constraint system to SDP form.

Indeterminates: term selectors w_j (Boolean-relaxed), the extended
predictor v (length d+2, last coordinate pinned to the constant -1), and
one symmetric (d+2)x(d+2) projector Pi_j per term. The residual
indeterminates are eliminated up front: the consistency constraint
forces eps_i = -<v, y'(i)> on selected points, so every occurrence of
eps is replaced by that expression and the consistency constraint
itself emits no rows. Centering is handled by preprocessing.

Emitted per term j (numbers follow the constraint list used throughout):
  (3) budget equality  sum_j |I_j| w_j = mu N'
  (4) booleanity       w_j^2 = w_j
  (5) subspace rows    w_j (Pi_j - I)(y' + e_last <v, y'>) = 0, aggregated
      over a spanning basis of the member rows (the rows are linear in
      the data vector, so a basis of the span yields the same row space)
  (6) noise bound      +-(sum_{i in I_j} w_j eps_i) <= w_j sigma/|I_j|
      plus an optional residual-energy cap (see build_program)
  (7) hypercontractivity per Q:
      w_j (S2 - 2 S1 tr(Q Pi_j) + |I_j| tr(Q Pi_j)^2) <= C w_j S2
      with S1 = sum q_i, S2 = sum q_i^2, q_i = y'(i)^T Q y'(i)
  (8) bounded variance per Q:  w_j S2 / (mu N') <= C ||Pi_j Q Pi_j||_F^2
  (9)/(10) per-coordinate second/fourth moment caps
  plus ungated Pi_j^2 = Pi_j, optional tr(Pi_j) = rank, and u_0 = 1.

Equalities are strengthened by monomial multipliers: a row h*q is
emitted iff deg(h*q) <= ell and every monomial of h*q lies in the
allowed set U (products of block-basis pairs). Inequalities are scalar
pseudo-expectation rows only.

Block sparsity: one moment block per term over monomials in
{v, w_j, Pi_j} plus bare w_j' singletons and w_j' w_j pairs (those
supply the cross moments E~[w_j' w_j Pi_j] used at extraction and the
minors that bound them), and one block over pure selector monomials.
Dense single-block mode exists for small problems.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import DegreeError, InputError
from .model import ProblemParams
from .preprocess import PreparedDataset
from .sdp import BlockSpec, SdpProblem
from .sos import MONO_ONE, Monomial, mono_degree, mono_evaluate, mono_mul

CONSTRAINT_HANDLED = {1: "preprocessing (centering)", 2: "eliminated (eps substitution)"}

CONSTRAINT_ROW_IDS = {
    3: "budget",
    4: "boolean",
    5: "subspace",
    6: "noise",
    7: "hyper",
    8: "variance",
    9: "second_moment",
    10: "fourth_moment",
}


@dataclass(frozen=True)
class ProgramVariables:
    """Bijection between program indeterminates and integer variable ids.

    Order: v_0..v_d, then w_0..w_{m-1}, then the upper triangle of each
    Pi_j row-major. The last coordinate of v is the constant -1 and has
    no id.
    """

    d: int
    m: int

    @property
    def dim(self) -> int:
        return self.d + 2

    @property
    def n_v(self) -> int:
        return self.d + 1

    @property
    def tri_size(self) -> int:
        return self.dim * (self.dim + 1) // 2

    @property
    def n_vars(self) -> int:
        return self.n_v + self.m + self.m * self.tri_size

    def v_id(self, c: int) -> int:
        if not 0 <= c <= self.d:
            raise InputError(f"v coordinate {c} out of range")
        return c

    def w_id(self, j: int) -> int:
        if not 0 <= j < self.m:
            raise InputError(f"term index {j} out of range")
        return self.n_v + j

    def tri_index(self, r: int, s: int) -> int:
        if r > s:
            r, s = s, r
        if not 0 <= r <= s < self.dim:
            raise InputError(f"Pi entry ({r},{s}) out of range")
        return r * self.dim - r * (r - 1) // 2 + (s - r)

    def pi_id(self, j: int, r: int, s: int) -> int:
        if not 0 <= j < self.m:
            raise InputError(f"term index {j} out of range")
        return self.n_v + self.m + j * self.tri_size + self.tri_index(r, s)

    def v_ids(self) -> List[int]:
        return [self.v_id(c) for c in range(self.n_v)]

    def w_ids(self) -> List[int]:
        return [self.w_id(j) for j in range(self.m)]

    def pi_ids(self, j: int) -> List[int]:
        return [self.pi_id(j, r, s) for r in range(self.dim) for s in range(r, self.dim)]

    def name(self, var: int) -> str:
        if var < self.n_v:
            return f"v{var}"
        if var < self.n_v + self.m:
            return f"w{var - self.n_v}"
        rest = var - self.n_v - self.m
        j, t = divmod(rest, self.tri_size)
        for r in range(self.dim):
            for s in range(r, self.dim):
                if self.tri_index(r, s) == t:
                    return f"Pi{j}_{r}{s}"
        raise InputError(f"variable id {var} out of range")


PolyDict = Dict[Monomial, float]


def _pd_add(p: PolyDict, mono: Monomial, coeff: float) -> None:
    if coeff == 0.0:
        return
    s = p.get(mono, 0.0) + coeff
    if s == 0.0:
        p.pop(mono, None)
    else:
        p[mono] = s


def _pd_mul_mono(p: PolyDict, mono: Monomial) -> PolyDict:
    return {mono_mul(m, mono): c for m, c in p.items()}


def default_q_family(d: int, count_random: int, seed: int) -> List[np.ndarray]:
    """Canonical symmetric test matrices plus seeded random ones.

    All matrices have unit Frobenius norm: e_r e_r^T stays as is and the
    off-diagonal pair (e_r e_s^T + e_s e_r^T) is scaled by 1/sqrt(2).
    """
    if count_random < 0:
        raise InputError("count_random must be >= 0")
    D = d + 2
    fam: List[np.ndarray] = []
    for r in range(D):
        M = np.zeros((D, D))
        M[r, r] = 1.0
        fam.append(M)
    for r in range(D):
        for s in range(r + 1, D):
            M = np.zeros((D, D))
            M[r, s] = M[s, r] = 1.0 / np.sqrt(2.0)
            fam.append(M)
    rng = np.random.default_rng(seed)
    for _ in range(count_random):
        R = rng.standard_normal((D, D))
        M = 0.5 * (R + R.T)
        M /= np.linalg.norm(M)
        fam.append(M)
    return fam


@dataclass
class CompiledProgram:
    """The SDP problem plus the bookkeeping needed to interpret u."""

    problem: SdpProblem
    vars: ProgramVariables
    u_index: Dict[Monomial, int]
    monomials: List[Monomial]
    eq_rows: Dict[Tuple[str, int], List[int]]
    ineq_rows: Dict[Tuple[str, int], List[int]]
    raw_eq: List[Tuple[PolyDict, float]]
    raw_ineq: List[PolyDict]
    q_family: Tuple[np.ndarray, ...]
    ell: int
    mu_N: float
    term_sizes: np.ndarray
    rank: Optional[int]
    term_of_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    aux_defs: Dict[Monomial, PolyDict] = field(default_factory=dict)
    handled: Dict[int, str] = field(default_factory=lambda: dict(CONSTRAINT_HANDLED))

    def u_of(self, mono: Monomial) -> int:
        try:
            return self.u_index[mono]
        except KeyError:
            raise InputError(f"monomial {mono!r} not tracked by the program") from None

    def moment(self, u: np.ndarray, mono: Monomial) -> float:
        return float(u[self.u_of(mono)])

    def selector_coords(self) -> List[Tuple[int, float]]:
        """(u index of w_j, |I_j|) pairs; the rounding objective reads these."""
        return [
            (self.u_of(((self.vars.w_id(j), 1),)), float(self.term_sizes[j]))
            for j in range(self.vars.m)
        ]

    def term_weight_moments(self, u: np.ndarray) -> np.ndarray:
        """w(I_j) = |I_j| E~[w_j] / (mu N')."""
        vals = np.array(
            [self.moment(u, ((self.vars.w_id(j), 1),)) for j in range(self.vars.m)]
        )
        return self.term_sizes * vals / self.mu_N

    def rows_for_constraint(self, num: int) -> List[int]:
        if num in self.handled:
            return []
        cid = CONSTRAINT_ROW_IDS[num]
        out: List[int] = []
        for (name, _), rows in itertools.chain(self.eq_rows.items(), self.ineq_rows.items()):
            if name == cid:
                out.extend(rows)
        return out

    def assignment_vector(self, w: Sequence[float], v_free: Sequence[float],
                          Pis: Sequence[np.ndarray]) -> np.ndarray:
        """u at a concrete point (w, v, Pi_1..Pi_m); v gets the pinned -1."""
        pv = self.vars
        if len(w) != pv.m or len(v_free) != pv.n_v or len(Pis) != pv.m:
            raise InputError("assignment shapes do not match the program")
        assign = np.zeros(pv.n_vars)
        for c, val in enumerate(v_free):
            assign[pv.v_id(c)] = val
        for j, val in enumerate(w):
            assign[pv.w_id(j)] = val
        for j, Pi in enumerate(Pis):
            Pi = np.asarray(Pi, dtype=float)
            if Pi.shape != (pv.dim, pv.dim) or not np.allclose(Pi, Pi.T, atol=1e-12):
                raise InputError(f"Pi_{j} must be symmetric {pv.dim}x{pv.dim}")
            for r in range(pv.dim):
                for s in range(r, pv.dim):
                    assign[pv.pi_id(j, r, s)] = Pi[r, s]

        def value(mo: Monomial) -> float:
            poly = self.aux_defs.get(mo)
            if poly is None:
                return mono_evaluate(mo, assign)
            return sum(c * mono_evaluate(m, assign) for m, c in poly.items())

        return np.array([value(mo) for mo in self.monomials])

    def residuals(self, u: np.ndarray) -> Dict[str, float]:
        """Max |row residual| per constraint id, from the normalized rows."""
        p = self.problem
        eq = np.abs(p.A @ u - p.b) if p.A.shape[0] else np.zeros(0)
        ineq = np.clip(p.G @ u - p.h, 0.0, None) if p.G.shape[0] else np.zeros(0)
        out: Dict[str, float] = {}
        for (cid, _), rows in self.eq_rows.items():
            if rows:
                out[cid] = max(out.get(cid, 0.0), float(eq[rows].max()))
        for (cid, _), rows in self.ineq_rows.items():
            if rows:
                out[cid] = max(out.get(cid, 0.0), float(ineq[rows].max()))
        return out

    def max_residual(self, u: np.ndarray) -> float:
        res = self.residuals(u)
        return max(res.values()) if res else 0.0


def _pi_square_tables(pv: ProgramVariables):
    """Coefficient vectors of (Pi^2)_{ac} over the 55 quadratic pair slots.

    Pair slots enumerate tri-index pairs (p <= q). Returns the (dim, dim,
    n_pairs) array of coefficients and, per slot, the two tri indices.
    """
    T = pv.tri_size
    pairs = [(p, q) for p in range(T) for q in range(p, T)]
    pair_pos = {pq: i for i, pq in enumerate(pairs)}
    U = np.zeros((pv.dim, pv.dim, len(pairs)))
    for a in range(pv.dim):
        for c in range(pv.dim):
            for t in range(pv.dim):
                p, q = pv.tri_index(a, t), pv.tri_index(t, c)
                if p > q:
                    p, q = q, p
                U[a, c, pair_pos[(p, q)]] += 1.0
    return U, pairs


def pi_quartic_frobenius(pv: ProgramVariables, j: int, Q: np.ndarray) -> PolyDict:
    """||Pi_j Q Pi_j||_F^2 expanded over degree-4 monomials in Pi_j entries.

    Uses ||Pi Q Pi||_F^2 = sum_{a,b,c,e} Q_ab Q_ce (Pi^2)_ac (Pi^2)_be
    for symmetric Pi: each (Pi^2) factor is a quadratic in the triangle
    entries, so the product folds two quadratic coefficient vectors.
    """
    U, pairs = _pi_square_tables(pv)
    M = np.einsum("ab,ce,acp,beq->pq", Q, Q, U, U, optimize=True)
    tri_vars = pv.pi_ids(j)
    pair_mono = [
        mono_mul(((tri_vars[p], 1),), ((tri_vars[q], 1),)) for p, q in pairs
    ]
    out: PolyDict = {}
    n = len(pairs)
    for p in range(n):
        row = M[p]
        base = pair_mono[p]
        for q in range(n):
            c = row[q]
            if c != 0.0:
                _pd_add(out, mono_mul(base, pair_mono[q]), float(c))
    return out


def _block_bases(pv: ProgramVariables, ell: int, mode: str) -> List[Tuple[str, List[Monomial]]]:
    half = ell // 2
    if mode == "dense":
        all_vars = list(range(pv.n_vars))
        return [("dense", _monos_upto(all_vars, half))]
    if mode != "block":
        raise InputError(f"unknown sparsity mode {mode!r}")
    blocks = []
    for j in range(pv.m):
        local = pv.v_ids() + [pv.w_id(j)] + pv.pi_ids(j)
        basis = _monos_upto(local, half)
        # cross selectors enter both alone and paired with w_j: the pair
        # elements give the moment matrix the 2x2 minors that bound
        # E~[w_a w_j Pi_j] by E~[w_a w_j], which is what pins the rounded
        # projector once the budget rows zero the oversized selectors
        cross = [((pv.w_id(a), 1),) for a in range(pv.m) if a != j]
        if half >= 2:
            wj = pv.w_id(j)
            cross += [
                tuple(sorted(((pv.w_id(a), 1), (wj, 1))))
                for a in range(pv.m) if a != j
            ]
        blocks.append((f"term_{j}", basis + cross))
    blocks.append(("selectors", _monos_upto(pv.w_ids(), half)))
    return blocks


def _monos_upto(variables: List[int], max_degree: int) -> List[Monomial]:
    out: List[Monomial] = [MONO_ONE]
    for deg in range(1, max_degree + 1):
        for combo in itertools.combinations_with_replacement(sorted(variables), deg):
            exps: Dict[int, int] = {}
            for v in combo:
                exps[v] = exps.get(v, 0) + 1
            out.append(tuple(sorted(exps.items())))
    return out


def build_program(pd: PreparedDataset, params: ProblemParams,
                  q_family: Sequence[np.ndarray], ell: Optional[int] = None,
                  rank: Optional[int] = None, noise_scale: str = "literal",
                  one_sided_noise: bool = False, sparsity: str = "block",
                  multiplier_degree: int = 2,
                  idempotent_multiplier_degree: int = 1,
                  localizing: bool = False,
                  noise_energy: Optional[float] = None) -> CompiledProgram:
    """Compile the full constraint system at degree ell.

    rank, when given, adds tr(Pi_j) = rank rows; noise_scale picks the
    noise-bound right side sigma/|I_j| ("literal") or sigma ("sum");
    one_sided_noise drops the mirrored inequality. Idempotency rows get
    their own multiplier cap: their degree-2 multiples dominate the
    equality count while adding little, so they default off.

    localizing lifts the degree <= 2 inequality families (noise, second
    and fourth coordinate moments) to localizing matrices over the basis
    {1, v, w_j}, each backed by auxiliary coordinates tied to the base
    moments by equality rows, and adds the scalar products with every
    other selector. The lift is valid but costly and off by default;
    the selector product rows plus the budget multiples already collapse
    the selector sector at the optimum.

    noise_energy, when given, caps the per-term mean squared residual:
    w_j sum_{i in I_j} <v_ext, y'_i>^2 <= w_j |I_j| noise_energy. The
    cap respects the same Gaussian residual premise as the aggregate
    noise row and is what identifies the predictor when the selected
    condition has fewer terms than predictor coordinates.
    """
    ell = params.ell if ell is None else int(ell)
    if ell < 4 or ell % 2:
        raise DegreeError(
            f"bounded variance (constraint 8) is quartic; need even ell >= 4, got {ell}"
        )
    if noise_scale not in ("literal", "sum"):
        raise InputError(f"unknown noise_scale {noise_scale!r}")
    if pd.m == 0:
        raise InputError("prepared dataset has no terms")
    if any(t.weight == 0 for t in pd.terms):
        raise InputError("terms must be nonempty; prune first")

    pv = ProgramVariables(d=pd.d, m=pd.m)
    D = pv.dim
    sizes = np.array([t.weight for t in pd.terms], dtype=float)
    mu_N = params.mu * pd.N_prime
    q_family = [np.asarray(Q, dtype=float) for Q in q_family]
    for Q in q_family:
        if Q.shape != (D, D) or not np.allclose(Q, Q.T, atol=1e-12):
            raise InputError(f"every Q must be symmetric {D}x{D}")

    # ---- allowed monomials U and PSD blocks --------------------------------
    named_bases = _block_bases(pv, ell, sparsity)
    U_set = set()
    for _, basis in named_bases:
        nb = len(basis)
        for i in range(nb):
            bi = basis[i]
            for k in range(i, nb):
                U_set.add(mono_mul(bi, basis[k]))
    monomials = sorted(U_set, key=lambda mo: (mono_degree(mo), mo))
    u_index = {mo: i for i, mo in enumerate(monomials)}
    n_u = len(monomials)

    blocks = []
    for name, basis in named_bases:
        nb = len(basis)
        idx = np.empty((nb, nb), dtype=np.int64)
        for i in range(nb):
            for k in range(i, nb):
                ui = u_index[mono_mul(basis[i], basis[k])]
                idx[i, k] = ui
                idx[k, i] = ui
        blocks.append(BlockSpec(name, idx))

    # ---- row assembly ------------------------------------------------------
    eq_data: List[Tuple[PolyDict, float]] = []
    eq_rows: Dict[Tuple[str, int], List[int]] = {}
    ineq_data: List[PolyDict] = []
    ineq_rows: Dict[Tuple[str, int], List[int]] = {}
    seen_eq: Dict[tuple, int] = {}

    def in_U(p: PolyDict) -> bool:
        return all(m in U_set for m in p)

    def audit(p: PolyDict, cid: str) -> None:
        worst = max((mono_degree(m) for m in p), default=0)
        assert worst <= ell, f"{cid}: degree {worst} exceeds ell={ell}"
        assert in_U(p), f"{cid}: monomial escapes the allowed set"

    def canon(p: PolyDict, rhs: float) -> tuple:
        items = sorted(p.items())
        scale = max(max(abs(c) for _, c in items), abs(rhs))
        sign = 1.0 if items[0][1] > 0 else -1.0
        return tuple((m, sign * c / scale) for m, c in items) + ((None, sign * rhs / scale),)

    def add_eq(p: PolyDict, rhs: float, cid: str, j: int) -> None:
        if not p:
            return
        audit(p, cid)
        key = canon(p, rhs)
        if key in seen_eq:
            return
        seen_eq[key] = len(eq_data)
        eq_rows.setdefault((cid, j), []).append(len(eq_data))
        eq_data.append((dict(p), float(rhs)))

    def add_ineq(g: PolyDict, cid: str, j: int) -> None:
        # g >= 0 compiled as -E~[g] <= 0; no dedup or sign flip here,
        # duplicate inequality rows are harmless (independent slacks)
        if not g:
            return
        audit(g, cid)
        ineq_rows.setdefault((cid, j), []).append(len(ineq_data))
        ineq_data.append(dict(g))

    # auxiliary coordinates for localizing-matrix entries: each carries
    # one E~[g q1 q2] value, defined by an equality tie to base moments
    aux_defs: Dict[Monomial, PolyDict] = {}
    next_aux_var = [pv.n_vars]

    def new_aux(poly: PolyDict, cid: str, j: int) -> int:
        mono: Monomial = ((next_aux_var[0], 1),)
        next_aux_var[0] += 1
        U_set.add(mono)
        u_index[mono] = len(monomials)
        monomials.append(mono)
        aux_defs[mono] = dict(poly)
        tie = dict(poly)
        _pd_add(tie, mono, -1.0)
        add_eq(tie, 0.0, cid, j)
        return u_index[mono]

    def add_localizing(g: PolyDict, cid: str, j: int,
                       basis_monos: List[Monomial]) -> None:
        """PSD block for E~[g q q'] over the given basis."""
        gdeg = max(mono_degree(m) for m in g)
        kept = [
            q for q in basis_monos
            if gdeg + 2 * mono_degree(q) <= ell
            and in_U(_pd_mul_mono(_pd_mul_mono(g, q), q))
        ]
        # every pair product must stay inside U before any coordinate is
        # allocated; a failing element is dropped wholesale to keep the block square
        while True:
            bad = None
            polys = {}
            for a in range(len(kept)):
                for b in range(a, len(kept)):
                    poly = _pd_mul_mono(g, mono_mul(kept[a], kept[b]))
                    if not in_U(poly):
                        bad = b
                        break
                    polys[(a, b)] = poly
                if bad is not None:
                    break
            if bad is None:
                break
            kept.pop(bad)
        nb = len(kept)
        if nb < 2:
            return
        idx = np.empty((nb, nb), dtype=np.int64)
        for a in range(nb):
            for b in range(a, nb):
                coord = new_aux(polys[(a, b)], cid, j)
                idx[a, b] = coord
                idx[b, a] = coord
        blocks.append(BlockSpec(f"{cid}_loc_{j}_{len(blocks)}", idx))

    w_mono = [((pv.w_id(j), 1),) for j in range(pv.m)]
    v_monos = [((pv.v_id(c), 1),) for c in range(pv.n_v)]

    # multiplier pool: low-degree monomials from the block bases; a row
    # for term j only survives the U filter with multipliers over that
    # term's variables and the selectors, so pools are kept per term
    pool_set = set()
    for _, basis in named_bases:
        for mo in basis:
            if 1 <= mono_degree(mo) <= multiplier_degree:
                pool_set.add(mo)
    pool_all = sorted(pool_set, key=lambda mo: (mono_degree(mo), mo))
    w_var_set = set(pv.w_ids())
    local_vars = [
        set(pv.v_ids()) | {pv.w_id(j)} | set(pv.pi_ids(j)) | w_var_set
        for j in range(pv.m)
    ]
    pool_by_term = [
        [q for q in pool_all if {v for v, _ in q} <= local_vars[j]]
        for j in range(pv.m)
    ]

    def add_eq_multiplied(h: PolyDict, rhs: float, cid: str, j: int,
                          max_mult_degree: int = multiplier_degree) -> None:
        """Base row plus every pool multiple that stays inside U and ell."""
        base = dict(h)
        _pd_add(base, MONO_ONE, -rhs)
        add_eq(h, rhs, cid, j)
        for q in (pool_all if j < 0 else pool_by_term[j]):
            if mono_degree(q) > max_mult_degree:
                continue
            hq = _pd_mul_mono(base, q)
            if max(mono_degree(m) for m in hq) <= ell and in_U(hq):
                add_eq(hq, 0.0, cid, j)

    # u_0 = 1
    add_eq({MONO_ONE: 1.0}, 1.0, "u0", -1)

    # (3) budget
    budget = {w_mono[j]: float(sizes[j]) for j in range(pv.m)}
    add_eq_multiplied(budget, mu_N, "budget", -1)

    # (4) booleanity w_j^2 = w_j
    for j in range(pv.m):
        h = {mono_mul(w_mono[j], w_mono[j]): 1.0, w_mono[j]: -1.0}
        add_eq_multiplied(h, 0.0, "boolean", j)

    # selector products are nonnegative; valid for 0/1 selections and,
    # jointly with the budget multiples, zero every moment touching an
    # oversized term: (|I_a| - mu N') E~[w_a] = -sum_k |I_k| E~[w_k w_a]
    for a in range(pv.m):
        for b in range(a + 1, pv.m):
            pair = mono_mul(w_mono[a], w_mono[b])
            add_ineq({pair: 1.0}, "selector_product", a)
            for c in range(b + 1, pv.m):
                triple = mono_mul(pair, w_mono[c])
                if triple in U_set:
                    add_ineq({triple: 1.0}, "selector_product", a)

    # projector side constraints: idempotency, optional trace pin
    for j in range(pv.m):
        for r in range(D):
            for s in range(r, D):
                h: PolyDict = {}
                for t in range(D):
                    _pd_add(
                        h,
                        mono_mul(((pv.pi_id(j, r, t), 1),), ((pv.pi_id(j, t, s), 1),)),
                        1.0,
                    )
                _pd_add(h, ((pv.pi_id(j, r, s), 1),), -1.0)
                add_eq_multiplied(h, 0.0, "idempotent", j,
                                  max_mult_degree=idempotent_multiplier_degree)
        if rank is not None:
            h = {((pv.pi_id(j, r, r), 1),): 1.0 for r in range(D)}
            add_eq_multiplied(h, float(rank), "trace", j)

    # (5) subspace membership, aggregated over a spanning basis of the
    # member rows; each aggregate a yields D coordinate equalities
    #   w_j [ sum_s Pi_j[r,s] (a_s + last_s(a, v)) - a_r - last_r(a, v) ] = 0
    # where <v_ext, a> = sum_c v_c a_c - a_last replaces the residual.
    for j, term in enumerate(pd.terms):
        data = pd.Y_ext[term.member_ids]
        svals, Vt = np.linalg.svd(data, full_matrices=False)[1:]
        keep = svals > max(1e-12 * svals[0], 1e-300)
        basis_rows = Vt[keep]
        for a in basis_rows:
            a_last = a[D - 1]
            for r in range(D):
                h: PolyDict = {}
                for s in range(D):
                    _pd_add(h, mono_mul(w_mono[j], ((pv.pi_id(j, r, s), 1),)), float(a[s]))
                    mono_ps = ((pv.pi_id(j, r, s), 1),)
                    if s == D - 1:
                        # + Pi[r, last] * <v_ext, a>
                        for c in range(pv.n_v):
                            _pd_add(
                                h,
                                mono_mul(w_mono[j], mono_mul(mono_ps, v_monos[c])),
                                float(a[c]),
                            )
                        _pd_add(h, mono_mul(w_mono[j], mono_ps), -float(a_last))
                _pd_add(h, w_mono[j], -float(a[r]))
                if r == D - 1:
                    for c in range(pv.n_v):
                        _pd_add(h, mono_mul(w_mono[j], v_monos[c]), -float(a[c]))
                    _pd_add(h, w_mono[j], float(a_last))
                add_eq_multiplied(h, 0.0, "subspace", j)

    # (6) noise bound, two-sided by default:
    #   sum_{i in I_j} w_j eps_i = -w_j <v_ext, S_j>,  S_j = sum of members
    for j, term in enumerate(pd.terms):
        S = pd.Y_ext[term.member_ids].sum(axis=0)
        bound = params.sigma / sizes[j] if noise_scale == "literal" else params.sigma
        E: PolyDict = {}
        for c in range(pv.n_v):
            _pd_add(E, mono_mul(w_mono[j], v_monos[c]), -float(S[c]))
        _pd_add(E, w_mono[j], float(S[D - 1]))
        sides = []
        g: PolyDict = {w_mono[j]: bound}
        for m, c in E.items():
            _pd_add(g, m, -c)
        sides.append(g)
        if not one_sided_noise:
            g2: PolyDict = {w_mono[j]: bound}
            for m, c in E.items():
                _pd_add(g2, m, c)
            sides.append(g2)
        for g in sides:
            add_ineq(g, "noise", j)
            if localizing:
                add_localizing(g, "noise", j,
                               [MONO_ONE] + v_monos + [w_mono[j]])
                for jo in range(pv.m):
                    if jo == j:
                        continue
                    gw = _pd_mul_mono(g, w_mono[jo])
                    if in_U(gw):
                        add_ineq(gw, "noise", j)

    # (6b) noise energy: w_j sum_{i in I_j} <v_ext, y'_i>^2 <= w_j |I_j| e.
    # The aggregate row above pins v along one direction per selected
    # term, which underdetermines v whenever fewer than d+1 terms are
    # selected; the residual sum of squares bounds v against the term's
    # full second-moment matrix instead. Emitted only when a bound is
    # supplied; zero turns it into an exact hyperplane pin.
    if noise_energy is not None:
        e_bound = float(noise_energy)
        if not np.isfinite(e_bound) or e_bound < 0:
            raise InputError("noise_energy must be finite and >= 0")
        for j, term in enumerate(pd.terms):
            data = pd.Y_ext[term.member_ids]
            M = data.T @ data
            g: PolyDict = {w_mono[j]: float(sizes[j] * e_bound - M[D - 1, D - 1])}
            for a in range(pv.n_v):
                _pd_add(g, mono_mul(w_mono[j], v_monos[a]),
                        2.0 * float(M[a, D - 1]))
                for b in range(pv.n_v):
                    _pd_add(g, mono_mul(w_mono[j], mono_mul(v_monos[a], v_monos[b])),
                            -float(M[a, b]))
            add_ineq(g, "noise_energy", j)

    # (7)/(8) per Q rows from data aggregates S1, S2
    for j, term in enumerate(pd.terms):
        data = pd.Y_ext[term.member_ids]
        for qi, Q in enumerate(q_family):
            qvals = np.einsum("ir,rs,is->i", data, Q, data)
            S1, S2 = float(qvals.sum()), float(qvals @ qvals)
            # trace polynomial tr(Q Pi_j), full-matrix sum over the triangle
            trace_p: PolyDict = {}
            for r in range(D):
                for s in range(r, D):
                    coeff = Q[r, s] if r == s else 2.0 * Q[r, s]
                    _pd_add(trace_p, ((pv.pi_id(j, r, s), 1),), float(coeff))
            # (7): C w S2 - w S2 + 2 S1 w T - |I_j| w T^2 >= 0
            g: PolyDict = {w_mono[j]: (params.C - 1.0) * S2}
            for m, c in trace_p.items():
                _pd_add(g, mono_mul(w_mono[j], m), 2.0 * S1 * c)
            for m1, c1 in trace_p.items():
                for m2, c2 in trace_p.items():
                    _pd_add(
                        g,
                        mono_mul(w_mono[j], mono_mul(m1, m2)),
                        -sizes[j] * c1 * c2,
                    )
            add_ineq(g, "hyper", j)
            # (8): C mu_N ||Pi Q Pi||_F^2 - w_j S2 >= 0
            g8 = pi_quartic_frobenius(pv, j, Q)
            for m in list(g8):
                g8[m] *= params.C * mu_N
            _pd_add(g8, w_mono[j], -S2)
            add_ineq(g8, "variance", j)

    # (9)/(10) coordinatewise moment caps, linear in w_j
    for j, term in enumerate(pd.terms):
        data = pd.Y_ext[term.member_ids]
        m2 = (data ** 2).sum(axis=0)
        m4 = (data ** 4).sum(axis=0)
        for r in range(D):
            for cid, cap, tot in (("second_moment", params.alpha, m2[r]),
                                  ("fourth_moment", params.beta, m4[r])):
                g = {w_mono[j]: float(sizes[j] * cap - tot)}
                add_ineq(g, cid, j)
                if localizing:
                    add_localizing(g, cid, j,
                                   [MONO_ONE] + v_monos + [w_mono[j]])
                    for jo in range(pv.m):
                        if jo == j:
                            continue
                        gw = _pd_mul_mono(g, w_mono[jo])
                        if in_U(gw):
                            add_ineq(gw, cid, j)

    # ---- matrices ----------------------------------------------------------
    n_u = len(monomials)  # auxiliary coordinates included

    def to_sparse(rows: List[PolyDict]) -> sp.csr_matrix:
        data, ri, ci = [], [], []
        for i, p in enumerate(rows):
            scale = max(abs(c) for c in p.values())
            for m, c in p.items():
                ri.append(i)
                ci.append(u_index[m])
                data.append(c / scale)
        return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n_u))

    A_rows: List[PolyDict] = []
    b_vals: List[float] = []
    for p, rhs in eq_data:
        scale = max(max(abs(c) for c in p.values()), abs(rhs))
        A_rows.append(p)
        b_vals.append(rhs / scale)
    Adata, Ari, Aci = [], [], []
    for i, p in enumerate(A_rows):
        scale = max(max(abs(c) for c in p.values()), abs(eq_data[i][1]))
        for m, c in p.items():
            Ari.append(i)
            Aci.append(u_index[m])
            Adata.append(c / scale)
    A = sp.csr_matrix((Adata, (Ari, Aci)), shape=(len(A_rows), n_u))
    b = np.array(b_vals)

    G = -to_sparse(ineq_data) if ineq_data else sp.csr_matrix((0, n_u))
    h = np.zeros(G.shape[0])

    problem = SdpProblem(n_u=n_u, blocks=blocks, A=A, b=b, G=G, h=h)
    return CompiledProgram(
        problem=problem,
        vars=pv,
        u_index=u_index,
        monomials=monomials,
        eq_rows=eq_rows,
        ineq_rows=ineq_rows,
        raw_eq=eq_data,
        raw_ineq=ineq_data,
        q_family=tuple(q_family),
        ell=ell,
        mu_N=mu_N,
        term_sizes=sizes,
        rank=rank,
        term_of_rows=pd.term_of.copy(),
        aux_defs=aux_defs,
    )


def hyperplane_projector(v_free: Sequence[float]) -> np.ndarray:
    """Rank-(d+1) projector onto the hyperplane normal to (v_free, -1)."""
    v_ext = np.concatenate([np.asarray(v_free, dtype=float), [-1.0]])
    eta = v_ext / np.linalg.norm(v_ext)
    return np.eye(v_ext.size) - np.outer(eta, eta)


def planted_residuals(cp: CompiledProgram, w: Sequence[float],
                      v_free: Sequence[float], Pis: Sequence[np.ndarray]) -> Dict[str, float]:
    """Constraint residuals at a concrete assignment; the core oracle."""
    u = cp.assignment_vector(w, v_free, Pis)
    return cp.residuals(u)
