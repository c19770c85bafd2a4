"""Command-line front end: campaigns, single simulations, monitoring, training."""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import statistics
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .falsify import FalsificationProblem, FalsificationResult, falsify
from .hybrid import chasing_cars, chasing_cars_inputs, execute, read_trajectory_csv, write_trajectory_csv
from .nha import NhaSurrogate, Recording, TrainConfig, chasing_cars_layout, fit_guards, train
from .stl import Formula, SampledSignal, crisp_robustness, parse_formula, signal_names

BUILTIN_SPECS = {
    "CC1": "always[0,100] (y5 - y4 <= 40)",
    "CC2": "always[0,70] eventually[0,30] (y5 - y4 >= 15)",
    "CC3": "always[0,80] ((always[0,20] (y2 - y1 <= 20)) or (eventually[0,20] (y5 - y4 >= 40)))",
    "CC4": "always[0,65] eventually[0,30] always[0,5] (y5 - y4 >= 8)",
    "CC5": "always[0,72] eventually[0,8] ((always[0,5] (y2 - y1 >= 9)) -> (always[5,20] (y5 - y4 >= 9)))",
    "CCx": " and ".join(f"(always[0,50] (y{i + 1} - y{i} > 7.5))" for i in range(1, 5)),
}


def builtin_spec(spec_id: str) -> Formula:
    """Parsed chasing-cars requirement ``CC1`` .. ``CC5`` or ``CCx``."""
    try:
        return parse_formula(BUILTIN_SPECS[spec_id])
    except KeyError:
        raise KeyError(f"unknown specification id {spec_id!r}; "
                       f"choose from {', '.join(BUILTIN_SPECS)}") from None


def resolve_spec(text: str) -> tuple[str, Formula]:
    """``(name, formula)`` for a builtin id or inline STL text."""
    text = text.strip()
    if text in BUILTIN_SPECS:
        return text, builtin_spec(text)
    if text.isidentifier():
        builtin_spec(text)          # raises the unknown-id error
    return "custom", parse_formula(text)


# --------------------------------------------------------------------------
# Campaigns


@dataclass
class ExperimentConfig:
    spec: str = "CC1"
    runs: int = 5
    budget: int = 20
    seed: int = 0
    out: str = "results"
    smoothing: float = 2.0
    pool: int = 256
    n_initial: int = 3
    max_iters: int = 50
    memory: int = 10
    modes: int = 3
    buffer_size: int = 5
    sim_step: float = 0.01
    surrogate_step: float = 0.25
    guard_threshold: float = 1e-4
    lambda_sep: float = 0.1
    epochs: int = 300
    update_epochs: int = 100
    learning_rate: float = 1e-3
    train_step: float = 0.1
    window: int = 10
    batch: int = 256
    series: bool = True

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise KeyError(f"unknown configuration key {key!r}")
            kw[key] = _coerce(types[key], raw)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read ``key = value`` lines; ``#`` starts a comment."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        parser.optionxform = str
        parser.read_string("[experiment]\n" + Path(path).read_text())
        return cls.from_mapping({k: v.strip().strip('"').strip("'")
                                 for k, v in parser["experiment"].items()})

    def train_config(self) -> TrainConfig:
        return TrainConfig(lambda_sep=self.lambda_sep, epochs=self.epochs, learning_rate=self.learning_rate,
                           step=self.train_step, window=self.window, batch=self.batch,
                           update_epochs=self.update_epochs)

    def problem(self, formula: Formula, seed: int) -> FalsificationProblem:
        return FalsificationProblem(
            chasing_cars(), formula, chasing_cars_inputs(), budget=self.budget, seed=seed,
            smoothing=self.smoothing, pool=self.pool, n_initial=self.n_initial, max_iters=self.max_iters,
            memory=self.memory, modes=self.modes, buffer_size=self.buffer_size, sim_step=self.sim_step,
            surrogate_step=self.surrogate_step, guard_threshold=self.guard_threshold,
            train=self.train_config())


def _coerce(kind, raw):
    if not isinstance(raw, str):
        return raw
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        low = raw.lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "yes", "1")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


@dataclass
class CampaignReport:
    spec: str
    runs: list = field(default_factory=list)      # per-run summary dicts

    @property
    def successes(self) -> list:
        return [r for r in self.runs if r["status"] == "falsified"]

    @property
    def fr(self) -> tuple[int, int]:
        return len(self.successes), len(self.runs)

    @property
    def mean_executions(self) -> float | None:
        s = self.successes
        return statistics.fmean(r["executions"] for r in s) if s else None

    @property
    def median_executions(self) -> float | None:
        s = self.successes
        return float(statistics.median(r["executions"] for r in s)) if s else None

    def summary(self) -> str:
        k, n = self.fr
        fmt = (lambda v: "-" if v is None else f"{v:.1f}")
        return f"{self.spec}: FR {k}/{n}, mean {fmt(self.mean_executions)}, median {fmt(self.median_executions)}"


def _fmt(v):
    return "-" if v is None else repr(float(v))


def _run_summary(spec: str, run: int, seed: int, res: FalsificationResult) -> dict:
    rho = res.counterexample.robustness if res.counterexample else res.best_robustness
    return {"spec": spec, "run": run, "seed": seed, "status": res.status,
            "executions": res.executions, "robustness": float(rho)}


def run_campaign(cfg: ExperimentConfig, log=None) -> CampaignReport:
    """Run ``cfg.runs`` seeded falsification runs and write the report files."""
    name, formula = resolve_spec(cfg.spec)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = CampaignReport(name)
    for run in range(cfg.runs):
        seed = cfg.seed + run
        res = falsify(cfg.problem(formula, seed), log=log)
        stem = out / f"{name}_run{run}"
        res.to_json(stem.with_suffix(".json"))
        res.write_counterexample_csv(f"{stem}_counterexample.csv")
        if cfg.series:
            with open(f"{stem}_series.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["execution", "source", "robustness", "surrogate_robustness"])
                for h in res.history:
                    wr.writerow([h.execution, h.source, repr(h.robustness),
                                 "" if h.surrogate_robustness is None else repr(h.surrogate_robustness)])
        report.runs.append(_run_summary(name, run, seed, res))
        if log:
            log(f"run {run} (seed {seed}): {res.status} after {res.executions} executions")
    write_campaign_csv(report, out / f"{name}_campaign.csv")
    return report


def write_campaign_csv(report: CampaignReport, path) -> None:
    """One row per run and a final aggregate row.

    The aggregate row has ``run = aggregate``, the success fraction in the
    status column, ``mean/median`` executions over successful runs (``-`` when
    none) and the lowest robustness seen.
    """
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["spec", "run", "seed", "status", "executions", "robustness"])
        for r in report.runs:
            wr.writerow([r["spec"], r["run"], r["seed"], r["status"], r["executions"], repr(r["robustness"])])
        k, n = report.fr
        best = min(r["robustness"] for r in report.runs)
        wr.writerow([report.spec, "aggregate", "", f"{k}/{n}",
                     f"{_fmt(report.mean_executions)}/{_fmt(report.median_executions)}", repr(best)])


def report_from_json(paths, spec: str) -> CampaignReport:
    """Rebuild the aggregates from per-run JSON files alone."""
    rep = CampaignReport(spec)
    for run, p in enumerate(paths):
        d = json.loads(Path(p).read_text())
        rep.runs.append({"spec": spec, "run": run, "seed": None, "status": d["status"],
                         "executions": d["executions"], "robustness": d["robustness"]})
    return rep


# --------------------------------------------------------------------------
# Subcommands


def _load_phi(path) -> np.ndarray:
    text = Path(path).read_text().strip()
    if text.startswith("[") or text.startswith("{"):
        obj = json.loads(text)
        if isinstance(obj, dict):
            obj = obj.get("counterexample") or obj["phi"]
        return np.asarray(obj, dtype=float).ravel()
    return np.loadtxt(path, delimiter="," if "," in text else None, ndmin=1).ravel()


def _spec_arg(text: str) -> Formula:
    p = Path(text)
    if p.is_file():
        text = p.read_text()
    return resolve_spec(text)[1]


def cmd_falsify(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {k: getattr(args, k) for k in ("spec", "runs", "budget", "seed", "out") if getattr(args, k) is not None}
    cfg = replace(cfg, **over)
    say = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    report = run_campaign(cfg, log=say)
    print(report.summary())
    return 0


def cmd_simulate(args) -> int:
    phi = _load_phi(args.phi)
    params = chasing_cars_inputs(phi)
    traj = execute(chasing_cars(), params, step=args.step)
    write_trajectory_csv(traj, args.out, include_states=args.states)
    if args.spec:
        print(f"robustness {crisp_robustness(_spec_arg(args.spec), traj.outputs)!r}")
    print(f"wrote {len(traj.times)} samples and {len(traj.events)} transitions to {args.out}")
    return 0


def cmd_monitor(args) -> int:
    formula = _spec_arg(args.spec)
    cols = read_trajectory_csv(args.trajectory)
    names = sorted(signal_names(formula))
    missing = [n for n in names if n not in cols]
    if missing:
        raise KeyError(f"trajectory has no column {', '.join(missing)}")
    sig = SampledSignal(cols["t"], np.stack([cols[c] for c in names], axis=1), tuple(names))
    print(repr(crisp_robustness(formula, sig)))
    return 0


def cmd_train(args) -> int:
    system = chasing_cars()
    tmpl = chasing_cars_inputs()
    mode_cols = {c.name: c.column or f"mode_{c.name}" for c in system.components}
    layout = chasing_cars_layout(args.modes)
    sur = NhaSurrogate(layout, seed=args.seed, buffer_size=max(args.buffer, len(args.trajectories)))
    for p in args.trajectories:
        cols = read_trajectory_csv(p)
        missing = [f"x{i + 1}" for i in range(system.n) if f"x{i + 1}" not in cols]
        if missing:
            raise SystemExit(f"{p}: state columns {', '.join(missing)} are missing "
                             f"(write trajectories with 'hyfal simulate --states')")
        rec = Recording.from_columns(cols, [f"x{i + 1}" for i in range(system.n)],
                                     [f"u{i + 1}" for i in range(system.m)], tmpl.segment, mode_cols)
        sur.add_trajectory(rec)
    report = train(sur, TrainConfig(epochs=args.epochs, lambda_sep=args.lambda_sep, seed=args.seed))
    failures = fit_guards(sur)
    Path(args.out).write_text(sur.to_json())
    usage = {k: v.tolist() for k, v in report.usage.items()}
    print(f"final loss {report.loss[-1]:.6g}; mode usage {usage}; "
          f"guard failures {sum(len(v) for v in failures.values())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyfal", description="Falsification of hybrid systems "
                                 "against STL requirements with neural hybrid surrogates.")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("falsify", help="run a seeded falsification campaign")
    f.add_argument("config", nargs="?", help="key = value configuration file")
    f.add_argument("--spec", help="CC1..CC5, CCx or inline STL")
    f.add_argument("--runs", type=int)
    f.add_argument("--budget", type=int)
    f.add_argument("--seed", type=int, help="seed of the first run")
    f.add_argument("--out", help="output directory")
    f.add_argument("-v", "--verbose", action="store_true")
    f.set_defaults(func=cmd_falsify)

    s = sub.add_parser("simulate", help="simulate the chasing cars for one input vector")
    s.add_argument("phi", help="text, CSV or JSON file with the input parameters")
    s.add_argument("--out", default="trajectory.csv")
    s.add_argument("--states", action="store_true", help="also write the state columns x1..xn")
    s.add_argument("--step", type=float, default=0.01)
    s.add_argument("--spec", help="also print the robustness of this requirement")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("monitor", help="crisp robustness of a trajectory CSV")
    m.add_argument("trajectory")
    m.add_argument("spec", help="STL file, inline STL or CC1..CCx")
    m.set_defaults(func=cmd_monitor)

    t = sub.add_parser("train", help="fit a surrogate to trajectory CSVs")
    t.add_argument("trajectories", nargs="+")
    t.add_argument("--out", default="surrogate.json")
    t.add_argument("--modes", type=int, default=3)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lambda-sep", type=float, default=0.1)
    t.add_argument("--buffer", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (KeyError, ValueError, OSError) as err:
        print(f"hyfal: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
