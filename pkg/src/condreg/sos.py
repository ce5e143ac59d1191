"""Sparse polynomial arithmetic, moment matrices, pseudo-expectations.

Monomials are canonical tuples ((var_id, exponent), ...) sorted by
variable id with exponents >= 1; the empty tuple is the constant
monomial. Polynomials map monomials to coefficients and never store
zeros. Moment vectors map monomials of total degree <= ell to their
pseudo-moments u_alpha with u_0 = 1; the degree-ell moment matrix is
M[alpha, beta] = u_{alpha+beta} over the degree-(ell/2) basis, and a
shift polynomial p of degree t yields the localizing matrix
M[alpha, beta] = sum_gamma p_gamma u_{alpha+beta+gamma} over the
degree-(ell/2 - t) basis.

The monomial order is graded lexicographic and fixed globally so matrix
indexing is stable across modules and runs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegreeError, InputError

Monomial = Tuple[Tuple[int, int], ...]

MONO_ONE: Monomial = ()


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    """Product of two canonical monomials."""
    if not a:
        return b
    if not b:
        return a
    out = dict(a)
    for v, e in b:
        out[v] = out.get(v, 0) + e
    return tuple(sorted(out.items()))


def mono_degree(m: Monomial) -> int:
    return sum(e for _, e in m)


def mono_from_exponents(variables: Sequence[int], exps: Sequence[int]) -> Monomial:
    return tuple((v, e) for v, e in zip(variables, exps) if e)


def mono_evaluate(m: Monomial, assignment) -> float:
    """Evaluate at a dense assignment vector (indexed by variable id)."""
    val = 1.0
    for v, e in m:
        val *= float(assignment[v]) ** e
    return val


def _mono_sort_key(m: Monomial, variables: Sequence[int]):
    pos = {v: i for i, v in enumerate(variables)}
    exps = [0] * len(variables)
    for v, e in m:
        exps[pos[v]] = e
    # graded: total degree first; then lexicographic with earlier
    # variables dominating (higher exponent on an earlier variable first)
    return (mono_degree(m), tuple(-e for e in exps))


class Poly:
    """Sparse multivariate polynomial: dict from Monomial to coefficient."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs: Optional[Dict[Monomial, float]] = None):
        self.coeffs = {}
        if coeffs:
            for m, c in coeffs.items():
                if c != 0.0:
                    self.coeffs[m] = float(c)

    @classmethod
    def const(cls, c: float) -> "Poly":
        return cls({MONO_ONE: c})

    @classmethod
    def var(cls, v: int, power: int = 1) -> "Poly":
        if power < 0:
            raise InputError("negative powers not supported")
        if power == 0:
            return cls.const(1.0)
        return cls({((v, power),): 1.0})

    @property
    def degree(self) -> int:
        return max((mono_degree(m) for m in self.coeffs), default=0)

    def __add__(self, other):
        other = _coerce(other)
        out = dict(self.coeffs)
        for m, c in other.coeffs.items():
            s = out.get(m, 0.0) + c
            if s == 0.0:
                out.pop(m, None)
            else:
                out[m] = s
        return Poly(out)

    __radd__ = __add__

    def __neg__(self):
        return Poly({m: -c for m, c in self.coeffs.items()})

    def __sub__(self, other):
        return self + (-_coerce(other))

    def __rsub__(self, other):
        return _coerce(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            if other == 0:
                return Poly()
            return Poly({m: c * other for m, c in self.coeffs.items()})
        other = _coerce(other)
        out: Dict[Monomial, float] = {}
        for m1, c1 in self.coeffs.items():
            for m2, c2 in other.coeffs.items():
                m = mono_mul(m1, m2)
                s = out.get(m, 0.0) + c1 * c2
                if s == 0.0:
                    out.pop(m, None)
                else:
                    out[m] = s
        return Poly(out)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        if n < 0:
            raise InputError("negative powers not supported")
        out = Poly.const(1.0)
        base = self
        while n:
            if n & 1:
                out = out * base
            base = base * base
            n >>= 1
        return out

    def evaluate(self, assignment) -> float:
        return sum(c * mono_evaluate(m, assignment) for m, c in self.coeffs.items())

    def variables(self) -> set:
        return {v for m in self.coeffs for v, _ in m}

    def __repr__(self):
        return f"Poly({self.coeffs!r})"


def _coerce(x) -> Poly:
    if isinstance(x, Poly):
        return x
    if isinstance(x, (int, float)):
        return Poly.const(float(x))
    raise InputError(f"cannot coerce {type(x)} to Poly")


def monomial_basis(variables: Iterable[int], max_degree: int) -> List[Monomial]:
    """All monomials of total degree <= max_degree, graded-lex ordered.

    Count is C(|variables| + max_degree, max_degree).
    """
    if max_degree < 0:
        raise InputError("max_degree must be >= 0")
    variables = sorted(set(int(v) for v in variables))
    basis: List[Monomial] = [MONO_ONE]
    for deg in range(1, max_degree + 1):
        for combo in itertools.combinations_with_replacement(variables, deg):
            exps: Dict[int, int] = {}
            for v in combo:
                exps[v] = exps.get(v, 0) + 1
            basis.append(tuple(sorted(exps.items())))
    return basis


@dataclass(frozen=True)
class MomentVector:
    """Truncated pseudo-moment sequence u indexed by monomials."""

    values: Dict[Monomial, float]
    ell: int

    def __post_init__(self):
        u0 = self.values.get(MONO_ONE)
        if u0 is None or abs(u0 - 1.0) > 1e-9:
            raise InputError("moment vector must have u_0 = 1")

    def __getitem__(self, m: Monomial) -> float:
        try:
            return self.values[m]
        except KeyError:
            raise InputError(f"moment vector is missing monomial {m!r}") from None

    def get(self, m: Monomial, default=None):
        return self.values.get(m, default)

    def variables(self) -> List[int]:
        return sorted({v for m in self.values for v, _ in m})


@dataclass(frozen=True)
class PseudoDistribution:
    """A moment vector plus the basis it was checked against."""

    moments: MomentVector
    basis: tuple
    min_eig: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def ell(self) -> int:
        return self.moments.ell


def empirical_moments(points: np.ndarray, ell: int,
                      variables: Optional[Sequence[int]] = None) -> MomentVector:
    """Moment vector of the empirical distribution of ``points`` (N, v)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    nv = pts.shape[1]
    if variables is None:
        variables = list(range(nv))
    if len(variables) != nv:
        raise InputError("variables must match the point dimension")
    values: Dict[Monomial, float] = {}
    for mono in monomial_basis(variables, ell):
        col = np.ones(pts.shape[0])
        pos = {v: i for i, v in enumerate(variables)}
        for v, e in mono:
            col = col * pts[:, pos[v]] ** e
        values[mono] = float(col.mean())
    return MomentVector(values, ell)


def point_mass_moments(assignment, ell: int,
                       variables: Optional[Sequence[int]] = None) -> MomentVector:
    """Moments of the point mass at ``assignment``."""
    arr = np.asarray(assignment, dtype=float)
    return empirical_moments(arr[None, :], ell, variables)


def moment_matrix(u: MomentVector, ell: int,
                  variables: Optional[Sequence[int]] = None,
                  basis: Optional[Sequence[Monomial]] = None) -> np.ndarray:
    """Degree-ell moment matrix over the degree-(ell/2) basis."""
    if ell % 2 != 0 or ell < 0:
        raise InputError(f"ell must be even and >= 0, got {ell}")
    if basis is None:
        if variables is None:
            variables = u.variables()
        basis = monomial_basis(variables, ell // 2)
    nb = len(basis)
    M = np.empty((nb, nb))
    for i in range(nb):
        for j in range(i, nb):
            val = u[mono_mul(basis[i], basis[j])]
            M[i, j] = val
            M[j, i] = val
    return M


def localizing_matrix(p: Poly, u: MomentVector, ell: int,
                      variables: Optional[Sequence[int]] = None) -> np.ndarray:
    """Moment matrix shifted by p over the degree-(ell/2 - deg p) basis."""
    if ell % 2 != 0 or ell < 0:
        raise InputError(f"ell must be even and >= 0, got {ell}")
    t = p.degree
    half = ell // 2 - t
    if half < 0:
        raise DegreeError(
            f"shift degree {t} does not fit localizing degree ell={ell}"
        )
    if variables is None:
        variables = sorted(set(u.variables()) | p.variables())
    basis = monomial_basis(variables, half)
    nb = len(basis)
    M = np.empty((nb, nb))
    for i in range(nb):
        for j in range(i, nb):
            prod = mono_mul(basis[i], basis[j])
            val = 0.0
            for gamma, c in p.coeffs.items():
                val += c * u[mono_mul(prod, gamma)]
            M[i, j] = val
            M[j, i] = val
    return M


def pseudo_expectation(f: Poly, pd) -> float:
    """E~[f] = sum_gamma f_gamma u_gamma; linear in f."""
    u = pd.moments if isinstance(pd, PseudoDistribution) else pd
    if f.degree > u.ell:
        raise DegreeError(
            f"polynomial degree {f.degree} exceeds moment degree {u.ell}"
        )
    return sum(c * u[m] for m, c in f.coeffs.items())


def pseudo_distribution(u: MomentVector,
                        variables: Optional[Sequence[int]] = None) -> PseudoDistribution:
    """Wrap a moment vector with its moment-matrix diagnostic."""
    if variables is None:
        variables = u.variables()
    basis = monomial_basis(variables, u.ell // 2)
    M = moment_matrix(u, u.ell, basis=basis)
    min_eig = float(np.linalg.eigvalsh(M)[0]) if M.size else 0.0
    return PseudoDistribution(u, tuple(basis), min_eig)


@dataclass
class InequalityReport:
    """Outcome of the pseudo-expectation inequality sweep."""

    n_checked: int
    violations: list
    min_eig: float
    tol: float

    @property
    def ok(self) -> bool:
        return not self.violations


def check_pseudo_inequalities(pd: PseudoDistribution, trials: int = 100,
                              rng_seed: int = 0, tol: float = 1e-8) -> InequalityReport:
    """Probe Cauchy-Schwarz, almost-triangle, and AM-GM inequalities.

    Cauchy-Schwarz: E~[fg]^2 <= E~[f^2] E~[g^2], swept over all basis
    monomial pairs and over random coefficient vectors on the basis.
    Almost-triangle: E~[(a+b)^{2t}] <= 2^{2t} (E~[a^{2t}] + E~[b^{2t}])
    for the largest t with 2t <= ell, over random degree-1 pairs.
    AM-GM (pair form): E~[((f+g)/2)^2] >= E~[fg].

    Tolerance is relative to the magnitude of the dominating side, since
    the inequalities hold exactly for true distributions and failures of
    interest are structural, not round-off. A targeted probe along the
    minimum eigenvector is included so indefinite moment matrices are
    reported deterministically.
    """
    if pd.ell < 4:
        raise DegreeError("pseudo-distribution degree must be at least 4")
    rng = np.random.default_rng(rng_seed)
    u = pd.moments
    basis = list(pd.basis)
    M = moment_matrix(u, pd.ell, basis=basis)
    min_eig = float(np.linalg.eigvalsh(M)[0]) if M.size else 0.0
    violations = []
    n_checked = 0

    def slack_cs(fvec, gvec, label):
        nonlocal n_checked
        n_checked += 1
        efg = float(fvec @ M @ gvec)
        eff = float(fvec @ M @ fvec)
        egg = float(gvec @ M @ gvec)
        lhs, rhs = efg * efg, eff * egg
        if lhs > rhs + tol * max(1.0, abs(lhs), abs(rhs)):
            violations.append(("cauchy_schwarz", label, lhs - rhs))

    # monomial sweep: CS on all basis pairs
    nb = len(basis)
    diag = np.diag(M)
    bound = np.outer(diag, diag)
    scale = np.maximum(1.0, np.maximum(np.abs(M) ** 2, np.abs(bound)))
    bad = np.argwhere(M**2 > bound + tol * scale)
    n_checked += nb * nb
    for i, j in bad:
        violations.append(
            ("cauchy_schwarz", f"monomials {basis[i]},{basis[j]}",
             float(M[i, j] ** 2 - bound[i, j]))
        )

    # random coefficient trials: CS and AM-GM on the same pairs
    for trial in range(trials):
        f = rng.standard_normal(nb)
        g = rng.standard_normal(nb)
        f /= np.linalg.norm(f)
        g /= np.linalg.norm(g)
        slack_cs(f, g, f"random trial {trial}")
        n_checked += 1
        mid = 0.5 * (f + g)
        lhs = float(f @ M @ g)
        rhs = float(mid @ M @ mid)
        if lhs > rhs + tol * max(1.0, abs(lhs), abs(rhs)):
            violations.append(("am_gm", f"random trial {trial}", lhs - rhs))

    # targeted probe along the extreme eigenvectors
    if M.size:
        evals, evecs = np.linalg.eigh(M)
        slack_cs(evecs[:, 0], evecs[:, -1], "eigenvector probe")

    # almost-triangle on random degree-1 pairs at the largest fitting t
    variables = u.variables()
    t = pd.ell // 2
    factor = 2.0 ** (2 * t)
    for trial in range(trials):
        n_checked += 1
        acoef = rng.standard_normal(len(variables) + 1)
        bcoef = rng.standard_normal(len(variables) + 1)
        a = Poly.const(acoef[0]) + sum(
            (Poly.var(v) * float(c) for v, c in zip(variables, acoef[1:])), Poly()
        )
        b = Poly.const(bcoef[0]) + sum(
            (Poly.var(v) * float(c) for v, c in zip(variables, bcoef[1:])), Poly()
        )
        lhs = pseudo_expectation((a + b) ** (2 * t), u)
        rhs = factor * (
            pseudo_expectation(a ** (2 * t), u)
            + pseudo_expectation(b ** (2 * t), u)
        )
        if lhs > rhs + tol * max(1.0, abs(lhs), abs(rhs)):
            violations.append(("almost_triangle", f"random trial {trial}", lhs - rhs))

    return InequalityReport(n_checked, violations, min_eig, tol)
