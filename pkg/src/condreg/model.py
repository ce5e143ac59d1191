"""Domain types: samples, terms, k-DNF conditions, parameters, planted truth.

A dataset couples Boolean attribute vectors x with real predictor vectors y
and a real response z. A term is a conjunction of at most k literals over
the attributes; a k-DNF is a disjunction of terms. The regression model is
affine in y, so samples are carried in an extended form [1, y, z] whose
inner product with (v, -1) is the signed prediction residual.

All types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError


def _as_bits(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise InputError(f"attribute vector must be 1-d, got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise InputError("attribute vector entries must be 0 or 1")
    out = arr.astype(np.uint8)
    out.setflags(write=False)
    return out


def _as_floats(y, name: str) -> np.ndarray:
    arr = np.asarray(y, dtype=float)
    if arr.ndim != 1:
        raise InputError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} must be finite")
    out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Sample:
    """One observation: attribute bits x, predictors y, response z."""

    x: np.ndarray
    y: np.ndarray
    z: float

    def __post_init__(self):
        object.__setattr__(self, "x", _as_bits(self.x))
        object.__setattr__(self, "y", _as_floats(self.y, "y"))
        z = float(self.z)
        if not np.isfinite(z):
            raise InputError("z must be finite")
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class ExtendedSample:
    """The working vector [1, y, z] of length d+2.

    Coordinate 0 is the intercept slot and is exactly 1; the last
    coordinate is the response.
    """

    y_ext: np.ndarray

    def __post_init__(self):
        arr = _as_floats(self.y_ext, "y_ext")
        if arr.size < 2:
            raise InputError("extended sample needs at least [1, z]")
        if arr[0] != 1.0:
            raise InputError("extended sample must start with constant 1")
        object.__setattr__(self, "y_ext", arr)

    @classmethod
    def from_sample(cls, s: Sample) -> "ExtendedSample":
        return cls(np.concatenate(([1.0], s.y, [s.z])))

    @property
    def y(self) -> np.ndarray:
        return self.y_ext[1:-1]

    @property
    def z(self) -> float:
        return float(self.y_ext[-1])


@dataclass(frozen=True)
class Term:
    """A conjunction of literals (attribute index, polarity).

    ``member_ids`` is filled during preprocessing with the indices of the
    samples whose x matches every literal; ``weight`` is their count.
    Membership is stored rather than recomputed because every constraint
    compile and cover step consults it.
    """

    literals: tuple
    member_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        lits = tuple((int(a), int(p)) for a, p in self.literals)
        for a, p in lits:
            if a < 0:
                raise InputError(f"attribute index {a} out of range")
            if p not in (0, 1):
                raise InputError(f"literal polarity must be 0 or 1, got {p}")
        attrs = [a for a, _ in lits]
        if len(set(attrs)) != len(attrs):
            raise InputError("attribute indices within a term must be distinct")
        object.__setattr__(self, "literals", lits)
        ids = np.asarray(self.member_ids, dtype=np.int64).copy()
        ids.setflags(write=False)
        object.__setattr__(self, "member_ids", ids)

    @property
    def weight(self) -> int:
        return int(self.member_ids.size)

    @property
    def width(self) -> int:
        return len(self.literals)

    def with_members(self, ids) -> "Term":
        return Term(self.literals, np.asarray(ids, dtype=np.int64))


@dataclass(frozen=True)
class KDnf:
    """A disjunction of terms."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if not isinstance(t, Term):
                raise InputError("KDnf terms must be Term instances")

    @property
    def t(self) -> int:
        return len(self.terms)

    @property
    def width(self) -> int:
        return max((t.width for t in self.terms), default=0)


def evaluate_term(term: Term, x) -> bool:
    """True iff every literal of ``term`` matches the bit-vector ``x``."""
    xv = np.asarray(x)
    for a, p in term.literals:
        if a >= xv.shape[-1]:
            raise InputError(f"attribute index {a} out of range for n={xv.shape[-1]}")
        if int(xv[a]) != p:
            return False
    return True


def evaluate_dnf(c: KDnf, x) -> bool:
    """OR of term evaluations; the empty disjunction is false."""
    return any(evaluate_term(t, x) for t in c.terms)


def term_mask(term: Term, X: np.ndarray) -> np.ndarray:
    """Vectorized membership of every row of X (N, n) in ``term``."""
    X = np.asarray(X)
    mask = np.ones(X.shape[0], dtype=bool)
    for a, p in term.literals:
        if a >= X.shape[1]:
            raise InputError(f"attribute index {a} out of range for n={X.shape[1]}")
        mask &= X[:, a] == p
    return mask


def dnf_mask(c: KDnf, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    mask = np.zeros(X.shape[0], dtype=bool)
    for t in c.terms:
        mask |= term_mask(t, X)
    return mask


@dataclass(frozen=True)
class Dataset:
    """Column-major dataset view: X (N, n) bits, Y (N, d) reals, z (N,)."""

    X: np.ndarray
    Y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X)
        if X.ndim != 2:
            raise InputError("X must be 2-d")
        if X.size and not np.isin(X, (0, 1)).all():
            raise InputError("X entries must be 0 or 1")
        Y = np.asarray(self.Y, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if Y.ndim != 2 or Y.shape[0] != X.shape[0]:
            raise InputError("Y must be 2-d with one row per sample")
        if z.shape != (X.shape[0],):
            raise InputError("z must be 1-d with one entry per sample")
        if not (np.isfinite(Y).all() and np.isfinite(z).all()):
            raise InputError("Y and z must be finite")
        for name, arr in (("X", X.astype(np.uint8)), ("Y", Y.copy()), ("z", z.copy())):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.Y.shape[1]

    @property
    def N(self) -> int:
        return self.X.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(self.X[i], self.Y[i], self.z[i])


@dataclass(frozen=True)
class ProblemParams:
    """Knobs of the constraint system and the cover step.

    mu: target covered fraction of the (duplicated) dataset.
    sigma: per-term bound on the selected noise sum.
    C: hypercontractivity / bounded-variance constant.
    alpha, beta: coordinatewise second/fourth moment bounds.
    delta: failure probability budget for the statistical checks.
    gamma: cover accuracy parameter.
    epsilon_target: promised conditional loss for cover eligibility.
    ell: relaxation degree (even, at least 4).
    h: hypercontractivity order; only degree-2 polynomials are used.
    """

    mu: float
    sigma: float = 1.0
    C: float = 8.0
    alpha: float = 1.0
    beta: float = 3.0
    delta: float = 0.05
    gamma: float = 0.2
    epsilon_target: float = 0.01
    ell: int = 4
    h: int = 2

    def __post_init__(self):
        if not (0.0 < self.mu <= 1.0):
            raise InputError(f"mu must be in (0, 1], got {self.mu}")
        for name in ("delta", "gamma"):
            val = getattr(self, name)
            if not (0.0 < val < 1.0):
                raise InputError(f"{name} must be in (0, 1), got {val}")
        for name in ("sigma", "alpha", "beta", "C", "epsilon_target"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0.0):
                raise InputError(f"{name} must be finite and >= 0, got {val}")
        if self.alpha < 1.0:
            raise InputError(f"alpha must be at least 1, got {self.alpha}")
        if self.ell < 4 or self.ell % 2 != 0:
            raise InputError(f"ell must be even and >= 4, got {self.ell}")
        if self.h != 2:
            raise InputError("only hypercontractivity order h=2 is supported")

    def replace(self, **kw) -> "ProblemParams":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass(frozen=True)
class OutlierModel:
    """How the non-conditioned population is produced.

    The outlier response follows the planted model with slopes negated
    (``flip_slopes``) and noise inflated by ``noise_scale``; predictors are
    drawn with ``y_covariance`` (identity when omitted).
    """

    flip_slopes: bool = True
    noise_scale: float = 10.0
    y_covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.noise_scale < 0:
            raise InputError("noise_scale must be >= 0")
        if self.y_covariance is not None:
            cov = np.asarray(self.y_covariance, dtype=float)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise InputError("y_covariance must be square")
            cov = cov.copy()
            cov.setflags(write=False)
            object.__setattr__(self, "y_covariance", cov)


@dataclass(frozen=True)
class PlantedSpec:
    """Ground-truth description of a generated instance.

    c_star: the hidden condition. v_star: intercept + slopes (length d+1).
    r: dimension of the subspace spanned by the extended inlier
    population. per_term_covariances: one d x d PSD predictor covariance
    per term of c_star. mu: floor on the inlier fraction (the generator
    produces ceil(mu * N) inliers). n_attributes: total Boolean attribute
    count of the instance.
    """

    c_star: KDnf
    v_star: np.ndarray
    r: int
    per_term_covariances: tuple
    noise_sigma: float
    mu: float
    n_attributes: int
    outlier_model: OutlierModel = field(default_factory=OutlierModel)

    def __post_init__(self):
        v = _as_floats(self.v_star, "v_star")
        object.__setattr__(self, "v_star", v)
        covs = []
        d = v.size - 1
        for cov in self.per_term_covariances:
            cov = np.asarray(cov, dtype=float)
            if cov.shape != (d, d):
                raise InputError(f"per-term covariance must be {d}x{d}")
            if not np.allclose(cov, cov.T):
                raise InputError("per-term covariance must be symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-10:
                raise InputError("per-term covariance must be PSD")
            cov = cov.copy()
            cov.setflags(write=False)
            covs.append(cov)
        object.__setattr__(self, "per_term_covariances", tuple(covs))
        if len(covs) != self.c_star.t:
            raise InputError(
                "need one covariance per planted term: "
                f"{len(covs)} covariances for {self.c_star.t} terms"
            )
        if not (0 <= self.r <= d + 1):
            raise InputError(f"r must be in [0, d+1], got {self.r}")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be >= 0")
        if not (0.0 < self.mu <= 1.0):
            raise InputError(f"mu must be in (0, 1], got {self.mu}")
        max_attr = max(
            (a for t in self.c_star.terms for a, _ in t.literals), default=-1
        )
        if self.n_attributes <= max_attr:
            raise InputError("n_attributes too small for c_star's literals")

    @property
    def d(self) -> int:
        return int(self.v_star.size - 1)

    @property
    def v_ext(self) -> np.ndarray:
        """The hyperplane normal (v_star, -1) in extended coordinates."""
        return np.concatenate((self.v_star, [-1.0]))
