"""Command-line interface.

Subcommands mirror the pipeline stages so each artifact (dataset,
candidates, pairs, reports) can be produced and inspected separately.
Exit codes: 0 success, 2 input error, 3 solver failure, 4 cover
failure, 5 size limit.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .cover import best_pair
from .errors import (
    CondregError,
    CoverFailure,
    InputError,
    SizeError,
    SolverFailure,
)
from .harness import (
    ExperimentConfig,
    Report,
    aggregate_reports,
    brute_force_oracle,
    load_instance,
    read_dataset_csv,
    run_end_to_end,
    write_dataset_csv,
    write_ground_truth,
)
from .model import ProblemParams
from .pipeline import recover_predictor, round_candidates, solve_relaxation
from .preprocess import prepare
from .program import build_program, default_q_family
from .synth import (
    default_planted_spec,
    generate,
    noise_energy_from_truth,
    params_from_truth,
)

EXIT_CODES = [
    (InputError, 2),
    (SolverFailure, 3),
    (CoverFailure, 4),
    (SizeError, 5),
]


def _run(fn):
    try:
        fn()
    except CondregError as e:
        for cls, code in EXIT_CODES:
            if isinstance(e, cls):
                click.echo(f"error: {e}", err=True)
                sys.exit(code)
        click.echo(f"error: {e}", err=True)
        sys.exit(2)


def _write_or_print(text: str, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


@click.group()
def main():
    """Conditional linear regression via sum-of-squares relaxation."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON generator spec (n, k, d, t, mu, noise_sigma, gap).")
@click.option("--seed", type=int, default=0)
@click.option("--n-samples", type=int, default=400)
@click.option("--out", type=click.Path(), required=True,
              help="Dataset CSV path; sidecar written alongside.")
def gen(config_path, seed, n_samples, out):
    """Generate a planted dataset plus ground-truth sidecar."""
    def go():
        genspec = {}
        if config_path:
            genspec = json.loads(Path(config_path).read_text(encoding="utf-8"))
        genspec.setdefault("seed", seed)
        spec = default_planted_spec(**genspec)
        ds, gt = generate(spec, n_samples, seed)
        write_dataset_csv(ds, out)
        sidecar = str(Path(out).with_suffix("")) + "_truth.json"
        write_ground_truth(gt, sidecar)
        click.echo(f"wrote {out} and {sidecar}")
    _run(go)


@main.command()
@click.argument("dataset", type=click.Path())
@click.option("--k", type=int, default=1)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json")
@click.option("--out", type=click.Path(), default=None)
def terms(dataset, k, fmt, out):
    """Term statistics after duplication."""
    def go():
        ds = read_dataset_csv(dataset)
        pdset = prepare(ds, k=k)
        rows = [
            {"term": j, "literals": list(map(list, t.literals)), "size": t.weight}
            for j, t in enumerate(pdset.terms)
        ]
        if fmt == "json":
            text = json.dumps(
                {"m": pdset.m, "n_prime": pdset.N_prime, "terms": rows},
                indent=2, sort_keys=True) + "\n"
        else:
            lines = ["term,literals,size"]
            for r in rows:
                lits = ";".join(f"{a}={p}" for a, p in r["literals"])
                lines.append(f"{r['term']},{lits},{r['size']}")
            text = "\n".join(lines) + "\n"
        _write_or_print(text, out)
    _run(go)


def _load_for_solve(config, seed):
    cfg = ExperimentConfig.load(config) if config else ExperimentConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg


@main.command()
@click.argument("dataset", type=click.Path(), required=False)
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--degree", type=int, default=None, help="Relaxation degree (even).")
@click.option("--out", type=click.Path(), default=None)
def solve(dataset, config, seed, degree, out):
    """Solve the relaxation and write extracted candidates as JSON."""
    def go():
        cfg = _load_for_solve(config, seed)
        if dataset:
            cfg.dataset_path = dataset
        if degree is not None:
            cfg.ell = degree
        ds, gt = load_instance(cfg)
        pdset = prepare(ds, k=cfg.k)
        qf = default_q_family(ds.d, count_random=cfg.q_random, seed=cfg.seed)
        energy = cfg.noise_energy
        if cfg.calibrate and gt is not None:
            params = params_from_truth(pdset, gt, qf,
                                       margin=cfg.calibration_margin, ell=cfg.ell)
            if energy is None:
                energy = noise_energy_from_truth(pdset, gt)
        elif cfg.params:
            params = ProblemParams(**cfg.params)
        else:
            raise InputError("provide params in the config or a ground-truth sidecar")
        cp = build_program(pdset, params, qf, ell=cfg.ell, rank=ds.d + 1,
                           noise_energy=energy)
        moments = solve_relaxation(cp, cfg.solve_options())
        cands = round_candidates(moments, cp, seed=cfg.seed,
                                 rank_hint=cfg.rank_hint,
                                 multiset_factor=cfg.multiset_factor)
        doc = {
            "solver_status": moments.meta["status"],
            "mu": params.mu,
            "params": {
                "mu": params.mu, "sigma": params.sigma, "C": params.C,
                "alpha": params.alpha, "beta": params.beta,
                "gamma": params.gamma, "epsilon_target": params.epsilon_target,
            },
            "candidates": [
                {
                    "source": c.source,
                    "probability": c.probability,
                    "Pi_hat": np.asarray(c.Pi_hat).tolist(),
                }
                for c in cands
            ],
        }
        _write_or_print(json.dumps(doc, indent=2, sort_keys=True) + "\n", out)
    _run(go)


@main.command()
@click.argument("candidates", type=click.Path())
@click.argument("dataset", type=click.Path())
@click.option("--k", type=int, default=1)
@click.option("--out", type=click.Path(), default=None)
def cover(candidates, dataset, k, out):
    """Pair candidate projectors with greedy k-DNF covers."""
    def go():
        from .pipeline import ProjectionCandidate

        doc = json.loads(Path(candidates).read_text(encoding="utf-8"))
        ds = read_dataset_csv(dataset)
        pdset = prepare(ds, k=k)
        params = ProblemParams(**doc["params"])
        models = []
        for c in doc["candidates"]:
            cand = ProjectionCandidate(
                Pi_hat=np.array(c["Pi_hat"]), source=c["source"],
                probability=c["probability"], post_processed=True)
            try:
                models.append(recover_predictor(cand))
            except CondregError:
                continue
        if not models:
            raise CoverFailure("no candidate produced a usable predictor")
        model, condition, score = best_pair(models, pdset, params)
        outdoc = {
            "v_hat": model.v_hat.tolist(),
            "condition": [list(map(list, t.literals)) for t in condition.terms],
            "coverage": score.coverage,
            "conditional_mean_loss": score.conditional_mean_loss,
        }
        _write_or_print(json.dumps(outdoc, indent=2, sort_keys=True) + "\n", out)
    _run(go)


@main.command()
@click.argument("dataset", type=click.Path())
@click.option("--k", type=int, default=1)
@click.option("--mu", type=float, required=True)
@click.option("--out", type=click.Path(), default=None)
def oracle(dataset, k, mu, out):
    """Brute-force best (subset, OLS) over all term subsets."""
    def go():
        ds = read_dataset_csv(dataset)
        pdset = prepare(ds, k=k)
        params = ProblemParams(mu=mu)
        res = brute_force_oracle(pdset, params)
        doc = {
            "feasible": res.feasible,
            "conditional_mean_loss": res.conditional_mean_loss,
            "coverage_rows": res.coverage_rows,
            "condition": [list(map(list, t.literals)) for t in res.condition.terms]
            if res.condition else None,
            "v_hat": res.v_hat.tolist() if res.v_hat is not None else None,
        }
        _write_or_print(json.dumps(doc, indent=2, sort_keys=True) + "\n", out)
    _run(go)


@main.command()
@click.option("--config", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--degree", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--timings", is_flag=True, default=False,
              help="Include wall-clock timings (breaks byte-identical reruns).")
def run(config, seed, degree, out, timings):
    """End-to-end pipeline run emitting a JSON report."""
    def go():
        cfg = ExperimentConfig.load(config)
        if seed is not None:
            cfg.seed = seed
        if degree is not None:
            cfg.ell = degree
        report = run_end_to_end(cfg)
        _write_or_print(report.to_json(include_timings=timings), out or cfg.out)
        if not report.success:
            click.echo(f"failed at stage {report.stage_reached}: {report.failure}",
                       err=True)
            sys.exit(4)
    _run(go)


@main.command()
@click.argument("reports", nargs=-1, type=click.Path())
@click.option("--out", type=click.Path(), default=None)
def report(reports, out):
    """Aggregate per-seed report JSON files."""
    def go():
        if not reports:
            raise InputError("no report files given")
        loaded = []
        for path in reports:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            doc.setdefault("timings", {})
            loaded.append(Report(**doc))
        text = json.dumps(aggregate_reports(loaded), indent=2, sort_keys=True) + "\n"
        _write_or_print(text, out)
    _run(go)


if __name__ == "__main__":
    main()
