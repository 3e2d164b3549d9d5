"""Command-line harness: single runs, seeded ensembles, the Lorenz comparison and UQ fits."""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats

from .optimizer import (
    AlphaDogsParams,
    BudgetExhausted,
    IterationRecord,
    StoppingRule,
    run,
    run_delta_dogs,
    satisfied_point,
    state_from_dict,
    state_to_dict,
)
from .problems import LORENZ_T0, LORENZ_T1, LORENZ_T_FIXED, PROBLEMS, make_problem
from .sampling import SamplerFailure, fit_uq_model

SCHEMA_VERSION = 1
OUT_ENV = "ALPHADOGS_OUT"
ALGORITHMS = ("alpha_dogs", "delta_dogs")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "parabola"
    dim: int = 1
    algorithm: str = "alpha_dogs"
    seed: int = 0
    out: str = None
    runs: int = 20
    workers: int = 1
    # stopping
    budget: int = None
    max_iterations: int = None
    measure_tol: float = None
    sigma_tol: float = None
    # algorithm parameters; None keeps the AlphaDogsParams / problem default
    params: dict = field(default_factory=dict)
    problem_args: dict = field(default_factory=dict)
    user_points: list = field(default_factory=list)
    # Delta-DOGS baseline
    samples_per_point: int = None
    delta_K: float = None
    # UQ fit
    uq_ensemble: int = 30
    uq_probes: list = field(default_factory=lambda: [50.0, 100.0, 200.0, 400.0, 800.0])
    uq_point: list = None

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {', '.join(PROBLEMS)}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.problem == "lorenz":
            self.dim = 2
        if not 1 <= self.dim <= 6:
            raise ConfigError("dim must be between 1 and 6")
        if self.runs < 1 or self.workers < 1:
            raise ConfigError("runs and workers must be positive")
        if self.budget is not None and self.budget < 1:
            raise ConfigError("budget must be positive")
        unknown = set(self.params) - {f.name for f in fields(AlphaDogsParams)}
        if unknown:
            raise ConfigError(f"unknown algorithm parameters: {', '.join(sorted(unknown))}")
        try:
            self.make_params()
            self.make_stopping()
            obj = self.make_problem()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for x in self.user_points:
            x = np.atleast_1d(np.asarray(x, float))
            if x.shape != (obj.dimension,) or np.any(x < obj.lower) or np.any(x > obj.upper):
                raise ConfigError(f"user point {list(x)} is outside the problem bounds")
        return self

    def make_problem(self):
        return make_problem(self.problem, self.dim, **self.problem_args)

    def make_params(self):
        base = {}
        if self.problem == "lorenz":
            obj = self.make_problem()
            base = {"N0": obj.samples_for(LORENZ_T0), "N_delta": obj.samples_for(LORENZ_T1)}
        base.update(self.params)
        return AlphaDogsParams(**base)

    def make_stopping(self):
        mt, st = self.measure_tol, self.sigma_tol
        if self.budget is None and self.max_iterations is None and mt is None:
            if self.problem == "lorenz":
                mt, st = 0.04, 0.02
            else:
                raise ValueError("set a budget, max_iterations or a tolerance")
        return StoppingRule(self.max_iterations, self.budget, mt, st)

    def baseline_samples(self, obj):
        if self.samples_per_point is not None:
            return int(self.samples_per_point)
        if self.problem == "lorenz":
            return obj.samples_for(LORENZ_T_FIXED)
        return self.make_params().N0


def load_config(path):
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    names = {f.name for f in fields(RunConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return RunConfig(**data)


# -- output ------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_atomic(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def format_table(kind, header, rows):
    lines = [f"# alphadogs {kind} schema {SCHEMA_VERSION}", "\t".join(header)]
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def record_table(history):
    has_regret = history[0].regret is not None
    n = len(history[0].candidate)
    header = ["iteration", "branch", "points", "cumulative_samples", "averaging_time"]
    header += [f"candidate_{i}" for i in range(n)] + ["candidate_y", "candidate_sigma"]
    if has_regret:
        header += ["regret", "best_regret"]
    header += ["reference_error", "alpha", "K", "level"]
    rows = []
    for r in history:
        row = [r.iteration, r.branch, r.point_count, r.cumulative_samples, float(r.averaging_time)]
        row += list(r.candidate) + [r.candidate_y, r.candidate_sigma]
        if has_regret:
            row += [r.regret, r.best_regret]
        row += [r.reference_error, r.alpha, r.K, r.level]
        rows.append(row)
    return format_table("record", header, rows)


def read_table(path):
    """Parse a table written by this module into (header, rows of strings)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    header = lines[0].split("\t")
    return header, [ln.split("\t") for ln in lines[1:]]


def points_table(state, algorithm, h):
    n = state.dimension
    header = ["algorithm"] + [f"x_{i}" for i in range(n)] + ["y", "sigma", "samples", "averaging_time"]
    rows = []
    for p in state.points:
        rows.append([algorithm] + [float(v) for v in p.location]
                    + [float(p.measurement), float(p.sigma), p.sample_count, float(p.sample_count * h)])
    return header, rows


def aggregate(histories):
    """Mean/min/max of the tracked metric over members, as step functions of cumulative samples.

    The metric is the regret when the truth is known, else the candidate measurement.
    """
    use_regret = histories[0][0].regret is not None
    metric = "regret" if use_regret else "candidate_y"
    checkpoints = sorted({r.cumulative_samples for h in histories for r in h})
    series = []
    for h in histories:
        cum = np.array([r.cumulative_samples for r in h])
        val = np.array([r.regret if use_regret else r.candidate_y for r in h], dtype=float)
        # value of the last record at or before each checkpoint
        idx = np.searchsorted(cum, checkpoints, side="right") - 1
        series.append(np.where(idx >= 0, val[np.maximum(idx, 0)], val[0]))
    series = np.array(series)
    ref = [h for h in histories][0]
    sigma_unit = ref[0].reference_error * np.sqrt(ref[0].cumulative_samples)
    header = ["cumulative_samples", f"mean_{metric}", f"min_{metric}", f"max_{metric}", "reference_error", "members"]
    rows = []
    for k, c in enumerate(checkpoints):
        col = series[:, k]
        rows.append([int(c), float(col.mean()), float(col.min()), float(col.max()),
                     float(sigma_unit / np.sqrt(c)), len(histories)])
    return header, rows


def _history_from_dicts(items):
    return [IterationRecord(**d) for d in items]


# -- commands ----------------------------------------------------------------

def _execute(cfg, seed, out, resume=None):
    """Run one optimization; write its record, snapshot and summary into ``out``."""
    obj = cfg.make_problem()
    params = cfg.make_params()
    rule = cfg.make_stopping()
    state = history = None
    if resume is not None:
        state = state_from_dict(resume["state"], obj)
        history = _history_from_dicts(resume["history"])
    status = "complete"
    try:
        if cfg.algorithm == "alpha_dogs":
            state, history = run(obj, params, rule, seed, cfg.user_points, state, history)
        else:
            state, history = run_delta_dogs(obj, params, rule, seed, cfg.baseline_samples(obj), cfg.delta_K,
                                            cfg.user_points, state, history)
    except BudgetExhausted as exc:
        state, history, status = exc.state, exc.history, "budget_exhausted"
    h = obj.uncertainty.sample_interval
    hit = satisfied_point(state, obj, rule) if rule.uses_tolerance else None
    final = state.points[hit] if hit is not None else None
    last = history[-1]
    summary = {
        "schema": SCHEMA_VERSION,
        "status": status,
        "problem": cfg.problem,
        "algorithm": cfg.algorithm,
        "seed": seed,
        "iterations": state.iteration,
        "points": len(state.points),
        "total_samples": state.total_samples,
        "total_averaging_time": state.total_samples * h,
        "final_candidate": last.candidate,
        "final_candidate_y": last.candidate_y,
        "final_candidate_sigma": last.candidate_sigma,
        "final_regret": last.regret,
        "tolerance_point": None if final is None else [float(v) for v in final.location],
    }
    if out is not None:
        write_atomic(os.path.join(out, "record.tsv"), record_table(history))
        snap = {"config": asdict(cfg), "seed": seed, "state": state_to_dict(state, obj),
                "history": [r.to_dict() for r in history]}
        write_atomic(os.path.join(out, "snapshot.json"), json.dumps(snap))
        write_atomic(os.path.join(out, "summary.json"), json.dumps(summary, indent=1, sort_keys=True) + "\n")
        header, rows = points_table(state, cfg.algorithm, h)
        write_atomic(os.path.join(out, "points.tsv"), format_table("points", header, rows))
    return state, history, summary


def cmd_run(cfg, resume_path=None):
    resume = None
    seed = cfg.seed
    if resume_path:
        with open(resume_path) as fh:
            resume = json.load(fh)
        seed = resume["seed"]
    _, _, summary = _execute(cfg, seed, cfg.out, resume)
    print(json.dumps(summary, sort_keys=True))
    return 0 if summary["status"] == "complete" else 1


def member_seeds(master, runs):
    return [int(s) for s in np.random.SeedSequence(master).generate_state(runs, dtype=np.uint32)]


def _member(args):
    cfg, seed, out = args
    _, history, _ = _execute(cfg, seed, out)
    return history


def cmd_ensemble(cfg):
    seeds = member_seeds(cfg.seed, cfg.runs)
    jobs = [(cfg, s, os.path.join(cfg.out, f"run_{k:03d}")) for k, s in enumerate(seeds)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            histories = list(pool.map(_member, jobs))
    else:
        histories = [_member(j) for j in jobs]
    header, rows = aggregate(histories)
    write_atomic(os.path.join(cfg.out, "aggregate.tsv"), format_table("aggregate", header, rows))
    write_atomic(os.path.join(cfg.out, "seeds.tsv"),
                 format_table("seeds", ["member", "seed"], [[k, s] for k, s in enumerate(seeds)]))
    last = rows[-1]
    print(json.dumps({"runs": cfg.runs, "final_cumulative_samples": last[0], header[1]: last[1]}))
    return 0


def cmd_compare_lorenz(cfg):
    if cfg.problem != "lorenz":
        raise ConfigError("compare-lorenz needs problem = lorenz")
    results = {}
    tables = []
    for algo in ALGORITHMS:
        sub = replace(cfg, algorithm=algo)
        state, history, summary = _execute(sub, cfg.seed, os.path.join(cfg.out, algo))
        results[algo] = (state, summary)
        h = sub.make_problem().uncertainty.sample_interval
        header, rows = points_table(state, algo, h)
        tables += rows
    write_atomic(os.path.join(cfg.out, "points.tsv"), format_table("points", header, tables))

    state_a, sum_a = results["alpha_dogs"]
    _, sum_d = results["delta_dogs"]
    y = [p.measurement for p in state_a.points]
    t = [p.sample_count for p in state_a.points]
    rho = float(stats.spearmanr(y, t).statistic) if len(set(t)) > 1 else float("nan")
    ratio = sum_d["total_averaging_time"] / sum_a["total_averaging_time"]
    comparison = {
        "schema": SCHEMA_VERSION,
        "alpha_dogs_total_averaging_time": sum_a["total_averaging_time"],
        "delta_dogs_total_averaging_time": sum_d["total_averaging_time"],
        "improvement_factor": ratio,
        "alpha_dogs_points": sum_a["points"],
        "delta_dogs_points": sum_d["points"],
        "alpha_dogs_status": sum_a["status"],
        "delta_dogs_status": sum_d["status"],
        "alpha_dogs_tolerance_point": sum_a["tolerance_point"],
        "delta_dogs_tolerance_point": sum_d["tolerance_point"],
        "spearman_cost_vs_length": rho,
    }
    write_atomic(os.path.join(cfg.out, "comparison.json"), json.dumps(comparison, indent=1, sort_keys=True) + "\n")
    print(json.dumps(comparison, sort_keys=True))
    return 0


def cmd_fit_uq(cfg):
    obj = cfg.make_problem()
    fit = fit_uq_model(obj, cfg.uq_ensemble, cfg.uq_probes, cfg.uq_point, cfg.seed)
    header = ["probe_length", "empirical_std", "fitted_std", "relative_residual"]
    rows = [[float(a), float(b), float(c), float(d)]
            for a, b, c, d in zip(fit.probe_lengths, fit.empirical_std, fit.fitted_std, fit.relative_residuals)]
    write_atomic(os.path.join(cfg.out, "uq.tsv"), format_table("uq", header, rows))
    result = {"schema": SCHEMA_VERSION, "A": fit.model.scale, "theta": fit.model.theta,
              "ensemble": fit.ensemble, "low_confidence": fit.low_confidence,
              "max_relative_residual": float(fit.relative_residuals.max())}
    write_atomic(os.path.join(cfg.out, "uq.json"), json.dumps(result, indent=1, sort_keys=True) + "\n")
    if fit.low_confidence:
        print(f"warning: ensemble of {fit.ensemble} gives a low-confidence fit", file=sys.stderr)
    print(json.dumps(result, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="alphadogs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("run", "single optimization run"), ("ensemble", "seeded ensemble of runs"),
                       ("compare-lorenz", "alpha-DOGS vs fixed-length baseline on the Lorenz problem"),
                       ("fit-uq", "fit the A/sqrt(T) uncertainty model")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON file with RunConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./alphadogs-out)")
        p.add_argument("--budget", type=int, help="total sample budget")
        p.add_argument("--runs", type=int)
        p.add_argument("--problem", choices=PROBLEMS)
        p.add_argument("--dim", type=int)
        p.add_argument("--algorithm", choices=ALGORITHMS)
        if name == "run":
            p.add_argument("--resume", help="continue from a snapshot.json")
    return parser


def config_from_args(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    for key in ("seed", "budget", "runs", "problem", "dim", "algorithm", "out"):
        v = getattr(args, key)
        if v is not None:
            setattr(cfg, key, v)
    if cfg.out is None:
        cfg.out = os.environ.get(OUT_ENV, "alphadogs-out")
    return cfg.validate()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "run":
            return cmd_run(cfg, getattr(args, "resume", None))
        if args.command == "ensemble":
            return cmd_ensemble(cfg)
        if args.command == "compare-lorenz":
            return cmd_compare_lorenz(cfg)
        return cmd_fit_uq(cfg)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"alphadogs: error: {exc}", file=sys.stderr)
        return 2
    except SamplerFailure as exc:
        print(f"alphadogs: sampler failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
