"""Surrogate-guided falsification.

The loop: a few random experiments on the system under test (SuT), then
repeatedly (re)train a neural hybrid automaton on the most recent
trajectories, pick a promising input from a random pool, minimize the
smoothed robustness on the surrogate with projected L-BFGS, and run the
result on the SuT.  Only SuT trajectories can make a run succeed.
"""
from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .hybrid import HybridAutomaton, InputParams, Trajectory, execute, write_trajectory_csv
from .nha import (NhaSurrogate, SurrogateLayout, TrainConfig, TrainingDivergence, chasing_cars_layout,
                  fit_guards, train)
from .stl import Formula, SampledSignal, crisp_robustness, smooth_robustness

__all__ = [
    "FalsificationProblem", "FalsificationResult", "Counterexample", "IterationRecord",
    "OptimizationResult", "NonFiniteObjective", "SurrogateObjective", "initialize_candidates",
    "optimize_inputs", "falsify", "default_layout",
]

FALSIFIED = "falsified"
EXHAUSTED = "budget-exhausted"


class NonFiniteObjective(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Problem and result types


def default_layout(system: HybridAutomaton, M: int, hidden=(32, 32)) -> SurrogateLayout:
    """Chasing-cars structure when the system has car components, else one automaton."""
    names = [c.name for c in system.components]
    if names == [f"car{i}" for i in range(2, 6)] and system.n == 10:
        return chasing_cars_layout(M, hidden)
    return SurrogateLayout.single(system.n, system.m, M, 0.0, 0.0, hidden,
                                  system.output_names, system.output_idx)


@dataclass
class FalsificationProblem:
    system: HybridAutomaton
    spec: Formula
    template: InputParams
    budget: int = 20
    seed: int = 0
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
    train: TrainConfig = field(default_factory=lambda: TrainConfig(update_epochs=100))
    layout: SurrogateLayout | None = None

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.smoothing <= 0:
            raise ValueError("smoothing must be positive")
        if self.pool < 1:
            raise ValueError("pool size must be at least 1")
        if self.layout is None:
            lay = default_layout(self.system, self.modes)
            if lay.horizon == 0.0:
                lay = replace(lay, horizon=self.template.horizon,
                              segment_length=self.template.segment)
            self.layout = lay


@dataclass(frozen=True)
class Counterexample:
    phi: np.ndarray
    trajectory: Trajectory
    robustness: float

    @classmethod
    def verify(cls, spec: Formula, phi, trajectory: Trajectory) -> "Counterexample | None":
        """A counterexample when the SuT trajectory violates ``spec``, else None."""
        rho = crisp_robustness(spec, trajectory.outputs)
        return cls(np.asarray(phi, dtype=float).copy(), trajectory, rho) if rho < 0 else None


@dataclass
class IterationRecord:
    execution: int
    source: str                      # "random" or "surrogate"
    robustness: float                # crisp, on the SuT
    phi: list
    surrogate_robustness: float | None = None
    surrogate_loss: float | None = None
    optimizer_iterations: int = 0
    seconds: float = 0.0


@dataclass
class FalsificationResult:
    spec: Formula
    status: str
    executions: int
    budget: int
    history: list
    counterexample: Counterexample | None = None

    def __post_init__(self):
        if self.status not in (FALSIFIED, EXHAUSTED):
            raise ValueError(f"unknown status {self.status!r}")
        if self.executions > self.budget:
            raise ValueError("more executions than the budget allows")
        if self.status == FALSIFIED:
            ce = self.counterexample
            if ce is None:
                raise ValueError("a falsified result needs a counterexample")
            rho = crisp_robustness(self.spec, ce.trajectory.outputs)
            if not rho < 0 or rho != ce.robustness:
                raise ValueError("counterexample is not a violating SuT trajectory")

    @property
    def falsified(self) -> bool:
        return self.status == FALSIFIED

    @property
    def best_robustness(self) -> float:
        return min((h.robustness for h in self.history), default=float("nan"))

    def to_dict(self) -> dict:
        return {
            "spec": str(self.spec),
            "status": self.status,
            "executions": self.executions,
            "budget": self.budget,
            "robustness": self.counterexample.robustness if self.counterexample else self.best_robustness,
            "counterexample": None if self.counterexample is None else self.counterexample.phi.tolist(),
            # wall-clock seconds are left out so reruns export identical files
            "history": [{k: v for k, v in asdict(h).items() if k != "seconds"} for h in self.history],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def write_counterexample_csv(self, path) -> bool:
        if self.counterexample is None:
            return False
        write_trajectory_csv(self.counterexample.trajectory, path)
        return True


# --------------------------------------------------------------------------
# Surrogate objective


def _mode_sequence(modes: np.ndarray) -> tuple:
    """Per component, the modes visited in order (switch timing ignored)."""
    seq = []
    for c in range(modes.shape[1]):
        col = modes[:, c]
        keep = np.concatenate([[True], col[1:] != col[:-1]]) if col.size else np.zeros(0, bool)
        seq.append(tuple(col[keep].tolist()))
    return tuple(seq)


class SurrogateObjective:
    """Smoothed robustness of ``spec`` on surrogate rollouts, with gradient."""

    def __init__(self, sur: NhaSurrogate, spec: Formula, s: float = 2.0, step: float = 0.25):
        self.sur, self.spec, self.s, self.step = sur, spec, float(s), float(step)
        lay = sur.layout
        self.names = tuple(lay.output_names)
        self.out_idx = list(lay.output_idx)
        self.evaluations = 0

    def _signal(self, states):
        n = states.shape[0]
        return SampledSignal(np.arange(n) * self.step, states[:, self.out_idx], self.names)

    def __call__(self, phi):
        """Returns ``(value, gradient, mode sequence)``."""
        self.evaluations += 1
        states, modes, pullback = self.sur.rollout_vjp(phi, self.step)
        if not np.all(np.isfinite(states)):
            raise NonFiniteObjective("surrogate rollout is not finite")
        r = smooth_robustness(self.spec, self._signal(states), p=self.s)
        if not np.isfinite(r.value):
            raise NonFiniteObjective("smoothed robustness is not finite")
        dS = np.zeros_like(states)
        dS[:, self.out_idx] = r.gradient
        return r.value, pullback(dS), _mode_sequence(modes)

    def crisp(self, phi) -> np.ndarray:
        """Crisp robustness of each row of ``phi`` on the surrogate (NaN if not finite)."""
        phi = np.atleast_2d(phi)
        states, _ = self.sur.rollout(phi, self.step, fast=phi.shape[0] < 16)
        out = np.full(phi.shape[0], np.nan)
        for b in range(phi.shape[0]):
            if np.all(np.isfinite(states[b])):
                out[b] = crisp_robustness(self.spec, self._signal(states[b]))
        return out


# --------------------------------------------------------------------------
# Initialization


def initialize_candidates(objective, data_phi: np.ndarray, lower, upper, P: int,
                          rng: np.random.Generator):
    """Pick a start from ``P`` uniform samples.

    Each sample is scored by its surrogate robustness divided by its distance
    to the nearest training input; samples at zero distance are skipped.
    ``objective`` is a :class:`SurrogateObjective` or a callable returning
    robustness values for a batch.  Returns ``(best, scores, candidates)``.
    """
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    cands = rng.uniform(lower, upper, size=(P, lower.size))
    data = np.atleast_2d(np.asarray(data_phi, dtype=float))
    if data.size == 0:
        raise ValueError("no training inputs to measure distances against")
    rho = objective.crisp(cands) if hasattr(objective, "crisp") else np.asarray(objective(cands))
    dist = np.min(np.linalg.norm(cands[:, None, :] - data[None, :, :], axis=2), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = rho / dist
    scores[(dist <= 1e-12) | ~np.isfinite(scores)] = np.inf
    if P == 1:
        return cands[0], scores, cands
    if np.all(np.isinf(scores)):
        raise ValueError("every candidate coincides with a training input or is not finite")
    return cands[int(np.argmin(scores))], scores, cands


# --------------------------------------------------------------------------
# Projected L-BFGS


@dataclass
class OptimizationResult:
    phi: np.ndarray
    value: float                   # smoothed robustness at phi
    iterations: int
    evaluations: int
    resets: int
    values: list                   # objective after each accepted iterate
    message: str


def _projected(g, x, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return pg


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for a, rho, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def optimize_inputs(objective: Callable, phi0, lower, upper, max_iters: int = 50,
                    memory: int = 10, c1: float = 1e-4, gtol: float = 1e-8,
                    max_backtracks: int = 30) -> OptimizationResult:
    """Minimize ``objective`` over the box ``[lower, upper]``.

    ``objective(phi)`` returns ``(value, gradient, signature)``; curvature
    pairs are dropped whenever the signature (the surrogate's mode sequence)
    changes between accepted iterates.  Steps are projected onto the box and
    accepted under the sufficient-decrease condition.
    """
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    x = np.clip(np.asarray(phi0, dtype=float), lo, hi)
    f, g, sig = objective(x)
    evals = 1
    S: deque = deque(maxlen=memory)
    Y: deque = deque(maxlen=memory)
    values = [f]
    resets = 0
    message = "iteration limit"
    it = 0
    width = np.max(hi - lo) if np.all(np.isfinite(hi - lo)) else 1.0
    for it in range(1, max_iters + 1):
        pg = _projected(g, x, lo, hi)
        if np.max(np.abs(pg), initial=0.0) <= gtol:
            message = "projected gradient vanished"
            it -= 1
            break
        active = pg == 0.0
        d = -_two_loop(pg, list(S), list(Y))
        d[active] = 0.0
        if d @ pg >= 0:
            S.clear()
            Y.clear()
            d = -pg
        alpha = 1.0 if S else min(1.0, 0.25 * width / np.max(np.abs(d)))
        accepted = False
        for _ in range(max_backtracks):
            x_new = np.clip(x + alpha * d, lo, hi)
            step = x_new - x
            if not np.any(step):
                break
            f_new, g_new, sig_new = objective(x_new)
            evals += 1
            if f_new <= f + c1 * (g @ step):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            message = "line search failed"
            it -= 1
            break
        y = g_new - g
        if sig_new != sig:
            S.clear()
            Y.clear()
            resets += 1
        elif step @ y > 1e-12 * np.linalg.norm(step) * np.linalg.norm(y):
            S.append(step)
            Y.append(y)
        x, f, g, sig = x_new, f_new, g_new, sig_new
        values.append(f)
    return OptimizationResult(x, f, it, evals, resets, values, message)


# --------------------------------------------------------------------------
# Outer loop


def falsify(problem: FalsificationProblem, log: Callable[[str], None] | None = None) -> FalsificationResult:
    """Search for an input whose SuT trajectory violates the requirement."""
    pb = problem
    rng = np.random.default_rng(pb.seed)
    sur = NhaSurrogate(pb.layout, seed=pb.seed, buffer_size=pb.buffer_size)
    history: list[IterationRecord] = []
    lo, hi = pb.template.lower, pb.template.upper
    say = log or (lambda msg: None)

    def experiment(phi, source, t_start, **extra):
        traj = execute(pb.system, pb.template.with_phi(phi), pb.sim_step)
        ce = Counterexample.verify(pb.spec, phi, traj)
        rho = ce.robustness if ce else crisp_robustness(pb.spec, traj.outputs)
        history.append(IterationRecord(len(history) + 1, source, float(rho), np.asarray(phi).tolist(),
                                       seconds=time.perf_counter() - t_start, **extra))
        say(f"execution {len(history)} ({source}): robustness {rho:.4g}")
        return traj, ce

    for _ in range(min(pb.n_initial, pb.budget)):
        t0 = time.perf_counter()
        traj, ce = experiment(pb.template.sample(rng).phi, "random", t0)
        if ce:
            return FalsificationResult(pb.spec, FALSIFIED, len(history), pb.budget, history, ce)
        sur.add_trajectory(traj)

    while len(history) < pb.budget:
        t0 = time.perf_counter()
        cfg = replace(pb.train, seed=pb.seed * 1000 + len(history))
        try:
            report = train(sur, cfg)
            loss = report.loss[-1] if report.loss else None
        except TrainingDivergence as err:
            say(f"training diverged: {err}")
            sur = _rebuilt(sur, pb, len(history))
            report = train(sur, cfg)
            loss = report.loss[-1] if report.loss else None
        fit_guards(sur, pb.guard_threshold)
        objective = SurrogateObjective(sur, pb.spec, pb.smoothing, pb.surrogate_step)
        _, scores, cands = initialize_candidates(objective, sur.training_inputs, lo, hi, pb.pool, rng)
        result = None
        for idx in np.argsort(scores, kind="stable")[:5]:
            try:
                result = optimize_inputs(objective, cands[idx], lo, hi, pb.max_iters, pb.memory)
                break
            except NonFiniteObjective:
                continue
        phi = result.phi if result else cands[int(np.argmin(scores))]
        traj, ce = experiment(phi, "surrogate", t0,
                              surrogate_robustness=None if result is None else float(result.value),
                              surrogate_loss=loss,
                              optimizer_iterations=0 if result is None else result.iterations)
        if ce:
            return FalsificationResult(pb.spec, FALSIFIED, len(history), pb.budget, history, ce)
        sur.add_trajectory(traj)
    return FalsificationResult(pb.spec, EXHAUSTED, len(history), pb.budget, history)


def _rebuilt(sur: NhaSurrogate, pb: FalsificationProblem, salt: int) -> NhaSurrogate:
    """Fresh surrogate with the same buffer (after a divergent update)."""
    fresh = NhaSurrogate(pb.layout, seed=pb.seed + 7919 * salt, buffer_size=pb.buffer_size)
    for e in sur.buffer:
        fresh.add_trajectory(e.rec)
    return fresh
