"""Experiment orchestration: file formats, oracle, metrics, reports.

The harness owns everything around the algorithm: dataset CSV and
ground-truth sidecar I/O, the brute-force subset oracle used as an
independent reference, per-stage timing, and the end-to-end runner that
strings preprocess -> build -> solve -> round -> cover together into a
machine-readable report.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cover import best_pair, compute_losses, greedy_cover, score_pair
from .errors import CondregError, CoverFailure, InputError, SizeError
from .model import Dataset, KDnf, ProblemParams, Term, term_mask
from .pipeline import (
    RegressionModel,
    recover_predictor,
    round_candidates,
    solve_relaxation,
)
from .preprocess import PreparedDataset, prepare
from .program import build_program, default_q_family, hyperplane_projector
from .sdp import SolveOptions
from .synth import (
    GroundTruth,
    default_planted_spec,
    generate,
    noise_energy_from_truth,
    params_from_truth,
)

SCHEMA_VERSION = 1

ORACLE_MAX_TERMS = 15


def write_dataset_csv(ds: Dataset, path) -> None:
    """Header x1..xn,y1..yd,z; bits literal 0/1; LF newlines, no quoting."""
    cols = [f"x{i+1}" for i in range(ds.n)] + \
           [f"y{i+1}" for i in range(ds.d)] + ["z"]
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        fp.write(",".join(cols) + "\n")
        for i in range(ds.N):
            bits = [str(int(b)) for b in ds.X[i]]
            reals = [repr(float(v)) for v in ds.Y[i]] + [repr(float(ds.z[i]))]
            fp.write(",".join(bits + reals) + "\n")


def read_dataset_csv(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset not found: {path}")
    with open(path, "r", encoding="utf-8") as fp:
        header = fp.readline().strip().split(",")
        n = sum(1 for c in header if c.startswith("x"))
        d = sum(1 for c in header if c.startswith("y"))
        if header != [f"x{i+1}" for i in range(n)] + \
                [f"y{i+1}" for i in range(d)] + ["z"]:
            raise InputError(f"unrecognized dataset header: {header}")
        X, Y, z = [], [], []
        for line in fp:
            parts = line.strip().split(",")
            if len(parts) != n + d + 1:
                raise InputError(f"row has {len(parts)} fields, want {n+d+1}")
            X.append([int(p) for p in parts[:n]])
            Y.append([float(p) for p in parts[n:n + d]])
            z.append(float(parts[-1]))
    return Dataset(X=np.array(X, dtype=np.uint8), Y=np.array(Y), z=np.array(z))


def write_ground_truth(gt: GroundTruth, path) -> None:
    doc = {
        "v_star": [float(v) for v in gt.v_star],
        "c_star": [[[int(a), int(p)] for a, p in t.literals]
                   for t in gt.c_star.terms],
        "r": gt.r,
        "inlier_ids": [int(i) for i in gt.inlier_ids],
        "noise_sigma": float(gt.spec.noise_sigma),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        json.dump(doc, fp, indent=2, sort_keys=True)
        fp.write("\n")


def read_ground_truth(path, n_attributes: int, mu: float = 0.0) -> GroundTruth:
    """Rebuild the calibration-relevant parts of a GroundTruth from disk.

    The sidecar does not carry the noise record or per-term projectors;
    the returned object is sufficient for parameter calibration and
    error metrics, not for generator-internal invariant checks.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"ground truth sidecar not found: {path}")
    with open(path, "r", encoding="utf-8") as fp:
        doc = json.load(fp)
    v_star = np.array(doc["v_star"], dtype=float)
    c_star = KDnf(terms=tuple(
        Term(literals=tuple((int(a), int(p)) for a, p in lits))
        for lits in doc["c_star"]
    ))
    spec = default_planted_spec(
        n=n_attributes,
        k=max(len(t.literals) for t in c_star.terms),
        d=v_star.shape[0] - 1,
        t=len(c_star.terms),
        mu=mu if mu > 0 else 0.3,
        noise_sigma=float(doc["noise_sigma"]),
        v_star=v_star,
    )
    spec = type(spec)(
        c_star=c_star, v_star=v_star, r=int(doc["r"]),
        per_term_covariances=spec.per_term_covariances,
        noise_sigma=float(doc["noise_sigma"]), mu=spec.mu,
        n_attributes=n_attributes, outlier_model=spec.outlier_model,
    )
    return GroundTruth(
        v_star=v_star,
        c_star=c_star,
        Pi_star=hyperplane_projector(v_star),
        per_term_Pi=(),
        inlier_ids=np.array(doc["inlier_ids"], dtype=np.int64),
        term_of_inlier=np.empty(0, dtype=np.int64),
        eps=np.empty(0),
        spec=spec,
    )


def frobenius_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


@dataclass(frozen=True)
class OracleResult:
    feasible: bool
    condition: Optional[KDnf]
    v_hat: Optional[np.ndarray]
    conditional_mean_loss: float
    coverage_rows: int


def brute_force_oracle(pd: PreparedDataset, params: ProblemParams,
                       coverage_floor: Optional[float] = None) -> OracleResult:
    """Exhaustive best (subset, OLS fit) over all term subsets.

    Rows are grouped by their term-satisfaction bitmask so each of the
    2^m subsets only sums a handful of precomputed Gram blocks. The
    default coverage floor is mu N'; callers comparing against
    greedy_cover should pass greedy's (1-gamma/2) mu N' floor.
    """
    m = pd.m
    if m > ORACLE_MAX_TERMS:
        raise SizeError(f"brute-force oracle limited to {ORACLE_MAX_TERMS} terms, got {m}")
    if coverage_floor is None:
        coverage_floor = params.mu * pd.N_prime

    bits = np.zeros(pd.n_rows, dtype=np.int64)
    for j in range(m):
        bits |= term_mask(pd.terms[j], pd.X).astype(np.int64) << j

    A = pd.Y_ext[:, :-1]
    zcol = pd.Y_ext[:, -1]
    pats: Dict[int, Tuple[np.ndarray, np.ndarray, float, int]] = {}
    for pat in np.unique(bits):
        if pat == 0:
            continue
        rows = bits == pat
        Ap = A[rows]
        zp = zcol[rows]
        pats[int(pat)] = (Ap.T @ Ap, Ap.T @ zp, float(zp @ zp), int(rows.sum()))

    best = None
    dcols = A.shape[1]
    for subset in range(1, 1 << m):
        G = np.zeros((dcols, dcols))
        gz = np.zeros(dcols)
        zz = 0.0
        count = 0
        for pat, (Gp, gzp, zzp, cp) in pats.items():
            if pat & subset:
                G += Gp
                gz += gzp
                zz += zzp
                count += cp
        if count < coverage_floor or count == 0:
            continue
        v, *_ = np.linalg.lstsq(G, gz, rcond=None)
        loss = (zz - 2.0 * v @ gz + v @ G @ v) / count
        key = (loss, -count, subset)
        if best is None or key < best[0]:
            best = (key, subset, v, loss, count)
    if best is None:
        return OracleResult(False, None, None, float("nan"), 0)
    _, subset, v, loss, count = best
    terms = tuple(pd.terms[j] for j in range(m) if subset >> j & 1)
    return OracleResult(True, KDnf(terms=terms), v, max(float(loss), 0.0), count)


@dataclass
class ExperimentConfig:
    """Everything a run needs, JSON round-trippable for the CLI."""

    dataset_path: Optional[str] = None
    ground_truth_path: Optional[str] = None
    generator: Optional[dict] = None
    n_samples: int = 400
    k: int = 1
    params: Optional[dict] = None
    calibrate: bool = True
    calibration_margin: float = 1.5
    ell: int = 4
    q_random: int = 8
    multiset_factor: float = 4.0
    rank_hint: Optional[int] = None
    noise_energy: Optional[float] = None
    solver: Optional[dict] = None
    seed: int = 0
    out: Optional[str] = None

    def solve_options(self) -> SolveOptions:
        return SolveOptions(**(self.solver or {}))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        doc = json.loads(text)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise InputError(f"config not found: {path}")
        cfg = cls.from_json(path.read_text(encoding="utf-8"))
        if cfg.dataset_path and not Path(cfg.dataset_path).exists():
            raise InputError(f"dataset not found: {cfg.dataset_path}")
        if cfg.ground_truth_path and not Path(cfg.ground_truth_path).exists():
            raise InputError(f"ground truth not found: {cfg.ground_truth_path}")
        return cfg


@dataclass
class Report:
    """One seed's end-to-end outcome; serialization is deterministic."""

    schema_version: int
    seed: int
    config: dict
    success: bool
    stage_reached: str
    n_candidates: int = 0
    best_frobenius_error: Optional[float] = None
    best_v_error: Optional[float] = None
    coverage: Optional[float] = None
    conditional_mean_loss: Optional[float] = None
    condition: Optional[list] = None
    v_hat: Optional[list] = None
    oracle_loss: Optional[float] = None
    oracle_feasible: Optional[bool] = None
    solver_status: Optional[str] = None
    solver_iterations: Optional[int] = None
    failure: Optional[str] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def to_json(self, include_timings: bool = False) -> str:
        doc = asdict(self)
        if not include_timings:
            doc.pop("timings")
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


class _Stage:
    def __init__(self, timings: Dict[str, float], name: str):
        self.timings = timings
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.timings[self.name] = time.perf_counter() - self.t0
        return False


def _tag_stage(exc: CondregError, stage: str) -> CondregError:
    exc.args = (f"[{stage}] {exc.args[0]}",) + exc.args[1:]
    return exc


def load_instance(cfg: ExperimentConfig) -> Tuple[Dataset, Optional[GroundTruth]]:
    """Dataset from disk or the seeded generator, per the config."""
    if cfg.dataset_path:
        ds = read_dataset_csv(cfg.dataset_path)
        gt = None
        if cfg.ground_truth_path:
            gt = read_ground_truth(cfg.ground_truth_path, n_attributes=ds.n)
        return ds, gt
    gen = dict(cfg.generator or {})
    gen.setdefault("seed", cfg.seed)
    spec = default_planted_spec(**gen)
    return generate(spec, cfg.n_samples, cfg.seed)


def run_end_to_end(cfg: ExperimentConfig) -> Report:
    """The whole pipeline on one seed; cover failure yields a partial report."""
    timings: Dict[str, float] = {}
    report = Report(
        schema_version=SCHEMA_VERSION,
        seed=cfg.seed,
        config=asdict(cfg),
        success=False,
        stage_reached="load",
        timings=timings,
    )
    try:
        with _Stage(timings, "load"):
            ds, gt = load_instance(cfg)
        report.stage_reached = "preprocess"
        with _Stage(timings, "preprocess"):
            pdset = prepare(ds, k=cfg.k)
        report.stage_reached = "build"
        with _Stage(timings, "build"):
            qf = default_q_family(ds.d, count_random=cfg.q_random, seed=cfg.seed)
            energy = cfg.noise_energy
            if cfg.calibrate and gt is not None:
                params = params_from_truth(
                    pdset, gt, qf, margin=cfg.calibration_margin, ell=cfg.ell)
                if energy is None:
                    energy = noise_energy_from_truth(pdset, gt)
            elif cfg.params:
                params = ProblemParams(**cfg.params)
            else:
                raise InputError("no params given and no ground truth to calibrate from")
            cp = build_program(pdset, params, qf, ell=cfg.ell, rank=ds.d + 1,
                               noise_energy=energy)
        report.stage_reached = "solve"
        with _Stage(timings, "solve"):
            moments = solve_relaxation(cp, cfg.solve_options())
            report.solver_status = moments.meta["status"]
            report.solver_iterations = moments.meta["iterations"]
        report.stage_reached = "round"
        with _Stage(timings, "round"):
            cands = round_candidates(
                moments, cp, seed=cfg.seed, rank_hint=cfg.rank_hint,
                multiset_factor=cfg.multiset_factor)
            report.n_candidates = len(cands)
            models = []
            for c in cands:
                try:
                    models.append(recover_predictor(c))
                except CondregError:
                    continue
        report.stage_reached = "cover"
        with _Stage(timings, "cover"):
            if not models:
                raise CoverFailure("no candidate produced a usable predictor")
            model, condition, score = best_pair(models, pdset, params)
        report.stage_reached = "score"
        with _Stage(timings, "score"):
            report.coverage = score.coverage
            report.conditional_mean_loss = score.conditional_mean_loss
            report.condition = [[[int(a), int(p)] for a, p in t.literals]
                                for t in condition.terms]
            report.v_hat = [float(v) for v in model.v_hat]
            if gt is not None:
                Pi_best = min(
                    (c.Pi_hat for c in cands),
                    key=lambda P: frobenius_error(P, gt.Pi_star),
                )
                report.best_frobenius_error = frobenius_error(Pi_best, gt.Pi_star)
                report.best_v_error = float(
                    np.linalg.norm(model.v_hat - gt.v_star)
                    / np.linalg.norm(gt.v_star)
                )
            if pdset.m <= ORACLE_MAX_TERMS:
                floor = (1.0 - params.gamma / 2.0) * params.mu * pdset.N_prime
                orc = brute_force_oracle(pdset, params, coverage_floor=floor)
                report.oracle_feasible = orc.feasible
                if orc.feasible:
                    report.oracle_loss = orc.conditional_mean_loss
        report.success = True
        report.stage_reached = "done"
    except CoverFailure as e:
        report.failure = str(_tag_stage(e, report.stage_reached))
    return report


def aggregate_reports(reports: Sequence[Report]) -> dict:
    """Cross-seed summary used by the `report` subcommand."""
    ok = [r for r in reports if r.success]
    losses = [r.conditional_mean_loss for r in ok
              if r.conditional_mean_loss is not None]
    frobs = [r.best_frobenius_error for r in ok
             if r.best_frobenius_error is not None]
    return {
        "schema_version": SCHEMA_VERSION,
        "n_reports": len(reports),
        "n_success": len(ok),
        "seeds": sorted(r.seed for r in reports),
        "mean_conditional_loss": float(np.mean(losses)) if losses else None,
        "mean_frobenius_error": float(np.mean(frobs)) if frobs else None,
        "failures": {str(r.seed): r.failure for r in reports if not r.success},
    }
