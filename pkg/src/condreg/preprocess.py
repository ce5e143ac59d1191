"""Term family construction, point duplication, pruning, and centering.

Terms must be pairwise disjoint before the constraint system is compiled,
so a sample satisfying several terms is duplicated once per satisfied
term. The duplicated dataset has at most m*N rows and its good fraction
is at least N_good / (m*N) for any designated good subset of originals.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import InputError
from .model import Dataset, Term, term_mask

CENTERING_MODES = ("mean_zero", "empirical_recenter")


@dataclass(frozen=True)
class PreparedDataset:
    """Duplicated, extended dataset with a disjoint term family.

    Rows whose term_of entry is -1 satisfied no term: they keep no
    membership but stay in the dataset. N_prime counts member rows only,
    so it equals the sum of term weights.
    """

    X: np.ndarray          # (rows, n) attribute bits per duplicated row
    Y_ext: np.ndarray      # (rows, d+2) extended [1, y, z] per row
    terms: tuple           # Terms with member_ids into rows
    term_of: np.ndarray    # (rows,) term index or -1
    provenance: np.ndarray # (rows,) original sample index
    N_original: int
    centering: str = "mean_zero"

    def __post_init__(self):
        for name in ("X", "Y_ext", "term_of", "provenance"):
            arr = np.asarray(getattr(self, name))
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.centering not in CENTERING_MODES:
            raise InputError(f"unknown centering mode {self.centering!r}")
        rows = self.X.shape[0]
        if not (self.Y_ext.shape[0] == self.term_of.shape[0] == rows
                and self.provenance.shape[0] == rows):
            raise InputError("row counts disagree across PreparedDataset fields")

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.Y_ext.shape[1] - 2

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def N_prime(self) -> int:
        return int(sum(t.weight for t in self.terms))

    @property
    def m(self) -> int:
        return len(self.terms)

    def member_rows(self) -> np.ndarray:
        return np.flatnonzero(self.term_of >= 0)


def enumerate_terms(n: int, k: int):
    """All width-k terms: one per k-subset of attributes and polarity map.

    Count is C(n,k) * 2^k, in lexicographic order of (attribute subset,
    polarity tuple). Width-< k conditions are expressible as unions of
    these at cover time.
    """
    if not (1 <= k <= n):
        raise InputError(f"need 1 <= k <= n, got k={k}, n={n}")
    terms = []
    for attrs in itertools.combinations(range(n), k):
        for pols in itertools.product((0, 1), repeat=k):
            terms.append(Term(tuple(zip(attrs, pols))))
    return terms


def assign_and_duplicate(dataset: Dataset, terms) -> PreparedDataset:
    """Duplicate each sample once per term it satisfies.

    Each duplicated row belongs to exactly one term; rows are emitted
    term-major, then originals satisfying no term are appended with no
    membership. Provenance maps every row back to its original index.
    """
    terms = list(terms)
    masks = [term_mask(t, dataset.X) for t in terms]

    row_x = []
    row_y = []
    term_of = []
    provenance = []
    new_terms = []
    covered = np.zeros(dataset.N, dtype=bool)
    ext = np.column_stack(
        (np.ones(dataset.N), dataset.Y, dataset.z)
    )
    for j, (term, mask) in enumerate(zip(terms, masks)):
        ids = np.flatnonzero(mask)
        covered |= mask
        start = sum(len(r) for r in row_x)
        member_rows = np.arange(start, start + ids.size, dtype=np.int64)
        new_terms.append(Term(term.literals, member_rows))
        row_x.append(dataset.X[ids])
        row_y.append(ext[ids])
        term_of.append(np.full(ids.size, j, dtype=np.int64))
        provenance.append(ids.astype(np.int64))
    free = np.flatnonzero(~covered)
    if free.size:
        row_x.append(dataset.X[free])
        row_y.append(ext[free])
        term_of.append(np.full(free.size, -1, dtype=np.int64))
        provenance.append(free.astype(np.int64))

    X = np.concatenate(row_x) if row_x else np.empty((0, dataset.n), dtype=np.uint8)
    Y = np.concatenate(row_y) if row_y else np.empty((0, dataset.d + 2))
    return PreparedDataset(
        X=X,
        Y_ext=Y,
        terms=tuple(new_terms),
        term_of=np.concatenate(term_of) if term_of else np.empty(0, dtype=np.int64),
        provenance=(
            np.concatenate(provenance) if provenance else np.empty(0, dtype=np.int64)
        ),
        N_original=dataset.N,
    )


def prune_small_terms(pd: PreparedDataset, min_size: int) -> PreparedDataset:
    """Drop terms with weight < min_size together with their rows."""
    if min_size < 0:
        raise InputError("min_size must be >= 0")
    keep_terms = [j for j, t in enumerate(pd.terms) if t.weight >= min_size]
    keep_rows = np.flatnonzero(
        (pd.term_of == -1) | np.isin(pd.term_of, keep_terms)
    )
    old_to_new_row = np.full(pd.n_rows, -1, dtype=np.int64)
    old_to_new_row[keep_rows] = np.arange(keep_rows.size)
    old_to_new_term = {j: jj for jj, j in enumerate(keep_terms)}

    new_terms = tuple(
        Term(pd.terms[j].literals, old_to_new_row[pd.terms[j].member_ids])
        for j in keep_terms
    )
    term_of = np.array(
        [old_to_new_term.get(int(t), -1) for t in pd.term_of[keep_rows]],
        dtype=np.int64,
    )
    return PreparedDataset(
        X=pd.X[keep_rows],
        Y_ext=pd.Y_ext[keep_rows],
        terms=new_terms,
        term_of=term_of,
        provenance=pd.provenance[keep_rows],
        N_original=pd.N_original,
        centering=pd.centering,
    )


def extend_and_center(pd: PreparedDataset, mode: str = "mean_zero") -> PreparedDataset:
    """Apply the centering mode to the extended coordinates.

    mean_zero leaves [1, y, z] unchanged (the generated inlier population
    is mean-zero by construction). empirical_recenter subtracts the
    unweighted mean of y and z over all term member rows, then restores
    the constant coordinate.
    """
    if mode not in CENTERING_MODES:
        raise InputError(f"unknown centering mode {mode!r}")
    if mode == "mean_zero":
        return replace(pd, centering=mode)
    members = pd.member_rows()
    Y = np.array(pd.Y_ext)
    if members.size:
        shift = Y[members, 1:].mean(axis=0)
        Y[:, 1:] -= shift
    Y[:, 0] = 1.0
    return replace(pd, Y_ext=Y, centering=mode)


def prepare(
    dataset: Dataset,
    k: int,
    min_size: int = 1,
    centering: str = "mean_zero",
    terms=None,
) -> PreparedDataset:
    """enumerate -> duplicate -> prune -> center, in one call."""
    if terms is None:
        terms = enumerate_terms(dataset.n, k)
    pd = assign_and_duplicate(dataset, terms)
    pd = prune_small_terms(pd, min_size)
    return extend_and_center(pd, centering)
