"""Hybrid automata, their execution, and the chasing-cars benchmark.

Guards are affine, ``g(x) = w . [x; 1]``, and an edge fires when ``g`` goes
from strictly negative to non-negative.  Resets are the identity.  Flows are
integrated with fixed-step RK4; whenever a guard crosses inside a step the
event time is located by bisection and integration resumes from there in the
target mode.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .stl import SampledSignal

__all__ = [
    "Edge", "Component", "HybridAutomaton", "InputParams", "Event", "Trajectory",
    "ZenoError", "SimulationError", "input_signal", "execute", "rk4_step",
    "chasing_cars", "chasing_cars_inputs", "FOLLOWER_MODES",
    "write_trajectory_csv", "read_trajectory_csv",
]

Flow = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


class SimulationError(RuntimeError):
    pass


class ZenoError(SimulationError):
    pass


@dataclass(frozen=True)
class Edge:
    source: Hashable
    target: Hashable
    guard: np.ndarray
    label: str = ""

    def __post_init__(self):
        w = np.asarray(self.guard, dtype=float)
        if not np.any(w != 0):
            raise ValueError("guard coefficient vector must be nonzero")
        object.__setattr__(self, "guard", w)

    def g(self, x: np.ndarray) -> float:
        return float(self.guard[:-1] @ x + self.guard[-1])


@dataclass(frozen=True)
class Component:
    """A sub-automaton of a parallel composition.

    ``state_idx`` lists the state coordinates the component owns and
    ``modes`` its local mode names; position in the composite mode tuple
    equals position in ``HybridAutomaton.components``.
    """

    name: str
    state_idx: tuple[int, ...]
    modes: tuple[str, ...]
    column: str = ""


@dataclass(frozen=True)
class HybridAutomaton:
    modes: tuple
    flows: Mapping[Hashable, Flow]
    edges: tuple[Edge, ...]
    initial_mode: Hashable
    x0: np.ndarray
    input_dim: int
    output_names: tuple[str, ...] = ()
    output_idx: tuple[int, ...] = ()
    components: tuple[Component, ...] = ()

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        object.__setattr__(self, "x0", x0)
        modes = set(self.modes)
        for e in self.edges:
            if e.source not in modes or e.target not in modes:
                raise ValueError(f"edge {e.source!r} -> {e.target!r} references an unknown mode")
            if e.guard.size != x0.size + 1:
                raise ValueError("guard length must be state dimension + 1")
        if self.initial_mode not in modes:
            raise ValueError("initial mode is not a mode of the automaton")
        if set(self.flows) != modes:
            raise ValueError("exactly one flow per mode is required")
        if not self.output_names:
            object.__setattr__(self, "output_names", tuple(f"x{i + 1}" for i in range(x0.size)))
            object.__setattr__(self, "output_idx", tuple(range(x0.size)))
        # stacked guard matrices per mode, in edge declaration order
        table = {m: [] for m in self.modes}
        for e in self.edges:
            table[e.source].append(e)
        guards = {m: (tuple(es), np.array([e.guard for e in es]).reshape(len(es), x0.size + 1))
                  for m, es in table.items()}
        object.__setattr__(self, "_guards", guards)

    @property
    def n(self) -> int:
        return self.x0.size

    @property
    def m(self) -> int:
        return self.input_dim

    def outgoing(self, mode) -> tuple[tuple[Edge, ...], np.ndarray]:
        return self._guards[mode]


@dataclass(frozen=True)
class InputParams:
    """Piecewise-constant input: ``phi`` holds K segments of m channels,
    stored segment-major (``phi[k*m + c]``)."""

    phi: np.ndarray
    segment: float
    horizon: float
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        u_min = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        u_max = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        phi = np.asarray(self.phi, dtype=float).ravel()
        m = u_min.size
        if u_max.size != m or np.any(u_min > u_max):
            raise ValueError("bounds must have equal length with u_min <= u_max")
        if phi.size % m:
            raise ValueError("phi length must be a multiple of the channel count")
        k = phi.size // m
        if k * self.segment < self.horizon - 1e-9 * max(1.0, self.horizon):
            raise ValueError("segments do not cover the horizon")
        seg = phi.reshape(k, m)
        if np.any(seg < u_min - 1e-12) or np.any(seg > u_max + 1e-12):
            raise ValueError("phi violates the input bounds")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)

    @property
    def m(self) -> int:
        return self.u_min.size

    @property
    def n_segments(self) -> int:
        return self.phi.size // self.m

    @property
    def segments(self) -> np.ndarray:
        return self.phi.reshape(self.n_segments, self.m)

    @property
    def lower(self) -> np.ndarray:
        return np.tile(self.u_min, self.n_segments)

    @property
    def upper(self) -> np.ndarray:
        return np.tile(self.u_max, self.n_segments)

    def with_phi(self, phi) -> "InputParams":
        return InputParams(np.asarray(phi, dtype=float), self.segment, self.horizon, self.u_min, self.u_max)

    def sample(self, rng: np.random.Generator) -> "InputParams":
        return self.with_phi(rng.uniform(self.lower, self.upper))

    def segment_index(self, t):
        """Segment holding time ``t`` (right-continuous, clamped at the horizon)."""
        k = np.floor(np.asarray(t, dtype=float) / self.segment + 1e-12).astype(int)
        return np.minimum(k, self.n_segments - 1)


def input_signal(params: InputParams, t: float) -> np.ndarray:
    if not 0.0 <= t <= params.horizon:
        raise ValueError(f"t = {t} outside [0, {params.horizon}]")
    return params.segments[int(params.segment_index(t))].copy()


@dataclass(frozen=True)
class Event:
    time: float
    source: Hashable
    target: Hashable
    label: str
    state: np.ndarray
    guard_value: float


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    modes: list                 # (mode, entry time)
    sample_modes: list          # mode active at each sample
    events: list[Event]
    output_names: tuple[str, ...]
    output_idx: tuple[int, ...]
    params: InputParams | None = None
    components: tuple[Component, ...] = ()

    @property
    def outputs(self) -> SampledSignal:
        return SampledSignal(self.times, self.states[:, list(self.output_idx)], self.output_names)

    def switch_times(self, label: str | None = None) -> np.ndarray:
        """Transition times, optionally restricted to edges with ``label``."""
        return np.array([e.time for e in self.events if label is None or e.label == label])

    def mode_codes(self) -> dict[str, np.ndarray]:
        """Integer mode codes per component (or a single ``mode`` column)."""
        if not self.components:
            order = {m: i for i, m in enumerate(dict.fromkeys(self.sample_modes))}
            return {"mode": np.array([order[m] for m in self.sample_modes])}
        out = {}
        for c_i, comp in enumerate(self.components):
            code = {m: i for i, m in enumerate(comp.modes)}
            out[comp.column or f"mode_{comp.name}"] = np.array(
                [code[m[c_i]] for m in self.sample_modes])
        return out


def rk4_step(f: Flow, x: np.ndarray, u: np.ndarray, t: float, h: float) -> np.ndarray:
    k1 = f(x, u, t)
    k2 = f(x + 0.5 * h * k1, u, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, u, t + 0.5 * h)
    k4 = f(x + h * k3, u, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _steps_per(length: float, step: float, what: str) -> int:
    r = length / step
    k = int(round(r))
    if k < 1 or abs(r - k) > 1e-9 * max(1.0, r):
        raise ValueError(f"step {step} does not divide the {what} {length}")
    return k


def execute(h: HybridAutomaton, params: InputParams, step: float = 0.01,
            max_transitions: int = 1000, event_tol: float = 1e-9) -> Trajectory:
    """Simulate ``h`` under the piecewise-constant input ``params``.

    ``max_transitions`` bounds the number of transitions of any single
    component (or of the whole automaton when it has no components); more
    than that raises :class:`ZenoError`.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if params.m != h.m:
        raise ValueError("input channel count does not match the automaton")
    n_steps = _steps_per(params.horizon, step, "horizon")
    per_seg = _steps_per(params.segment, step, "segment duration")
    segs = params.segments

    x = h.x0.copy()
    mode = h.initial_mode
    states = np.empty((n_steps + 1, h.n))
    inputs = np.empty((n_steps + 1, h.m))
    states[0] = x
    sample_modes = [mode]
    mode_seq = [(mode, 0.0)]
    events: list[Event] = []
    counts: dict[str, int] = {}

    for k in range(n_steps):
        u = segs[min(k // per_seg, len(segs) - 1)]
        inputs[k] = u
        t = k * step
        t_end = (k + 1) * step
        x_start = x
        while True:
            rem = t_end - t
            f = h.flows[mode]
            x_new = rk4_step(f, x, u, t, rem) if rem > 0 else x
            edges, W = h.outgoing(mode)
            fired = None
            if edges:
                g0 = W[:, :-1] @ x + W[:, -1]
                g1 = W[:, :-1] @ x_new + W[:, -1]
                # edges whose guard crossed together with an event already taken
                late = (W[:, :-1] @ x_start + W[:, -1] < 0) & (g0 >= 0)
                if x is not x_start and np.any(late):
                    fired = (0.0, int(np.argmax(late)))
                else:
                    crossing = np.nonzero((g0 < 0) & (g1 >= 0))[0]
                    best = None
                    for i in crossing:
                        tau = _bisect(f, x, u, t, rem, W[i], event_tol)
                        if best is None or tau < best[0]:
                            best = (tau, int(i))
                    fired = best
            if fired is None:
                x = x_new
                break
            tau, i = fired
            e = edges[i]
            x = rk4_step(f, x, u, t, tau) if tau > 0 else x
            t = t + tau
            events.append(Event(t, mode, e.target, e.label, x.copy(), e.g(x)))
            mode = e.target
            mode_seq.append((mode, t))
            counts[e.label] = counts.get(e.label, 0) + 1
            if counts[e.label] > max_transitions:
                raise ZenoError(f"more than {max_transitions} transitions"
                                f"{' on ' + e.label if e.label else ''} by t = {t:.6g}")
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at t = {t_end:.6g}")
        states[k + 1] = x
        sample_modes.append(mode)
    inputs[n_steps] = segs[min(n_steps // per_seg, len(segs) - 1)]
    times = np.arange(n_steps + 1) * step
    return Trajectory(times, states, inputs, mode_seq, sample_modes, events,
                      h.output_names, h.output_idx, params, h.components)


def _bisect(f, x, u, t, h, w, tol) -> float:
    lo, hi = 0.0, h
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        xm = rk4_step(f, x, u, t, mid)
        if w[:-1] @ xm + w[-1] >= 0:
            hi = mid
        else:
            lo = mid
    return hi


# --------------------------------------------------------------------------
# Chasing cars

FOLLOWER_MODES = ("keeping", "chasing", "braking")

# (source, target, gap coefficient, constant): guard is coef*gap + const >= 0
_FOLLOWER_EDGES = (
    ("keeping", "chasing", 1.0, -15.0),
    ("keeping", "braking", -1.0, 5.0),
    ("braking", "chasing", 1.0, -20.0),
    ("chasing", "keeping", -1.0, 10.0),
)


def chasing_cars(gaps: Sequence[float] = (10.0, 10.0, 10.0, 10.0)) -> HybridAutomaton:
    """Five cars on a line; car 1 is driven by throttle ``u1`` and brake ``u2``.

    State is ``(y1, v1, y2, v2, ..., y5, v5)``.  Each follower ``i`` runs
    the keeping/chasing/braking automaton on the gap ``y_i - y_{i-1}``.
    """
    n = 10
    y0 = np.concatenate([[0.0], np.cumsum(gaps)])
    x0 = np.zeros(n)
    x0[0::2] = y0

    local = {
        "keeping": (np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros(2)),
        "chasing": (np.array([[0.0, -1.0], [0.0, 0.0]]), np.array([0.0, 1.0])),
        "braking": (np.array([[0.0, -1.0], [0.0, -1.0]]), np.zeros(2)),
    }
    B = np.zeros((n, 2))
    B[1] = (1.0, -1.0)
    A_lead = np.zeros((n, n))
    A_lead[0, 1] = 1.0

    comps = tuple(Component(f"car{i}", (2 * (i - 1), 2 * (i - 1) + 1), FOLLOWER_MODES, f"mode_{i}")
                  for i in range(2, 6))
    modes = tuple(itertools.product(FOLLOWER_MODES, repeat=4))

    def make_flow(A, c):
        def flow(x, u, t):
            return A @ x + B @ u + c
        return flow

    flows = {}
    for mode in modes:
        A = A_lead.copy()
        c = np.zeros(n)
        for comp, q in zip(comps, mode):
            i0 = comp.state_idx[0]
            Aq, cq = local[q]
            A[i0:i0 + 2, i0:i0 + 2] = Aq
            c[i0:i0 + 2] = cq
        flows[mode] = make_flow(A, c)

    edges = []
    for mode in modes:
        for c_i, comp in enumerate(comps):
            me, pred = comp.state_idx[0], comp.state_idx[0] - 2
            for src, dst, coef, const in _FOLLOWER_EDGES:
                if mode[c_i] != src:
                    continue
                w = np.zeros(n + 1)
                w[me], w[pred], w[-1] = coef, -coef, const
                target = mode[:c_i] + (dst,) + mode[c_i + 1:]
                edges.append(Edge(mode, target, w, comp.name))

    return HybridAutomaton(
        modes=modes, flows=flows, edges=tuple(edges), initial_mode=("keeping",) * 4,
        x0=x0, input_dim=2, output_names=tuple(f"y{i}" for i in range(1, 6)),
        output_idx=(0, 2, 4, 6, 8), components=comps,
    )


def chasing_cars_inputs(phi=None) -> InputParams:
    """Input template: throttle and brake in [0, 1], 20 segments of 5 s over 100 s."""
    phi = np.zeros(40) if phi is None else phi
    return InputParams(np.asarray(phi, dtype=float), 5.0, 100.0, np.zeros(2), np.ones(2))


# --------------------------------------------------------------------------
# CSV


def write_trajectory_csv(traj: Trajectory, path, include_states: bool = False) -> None:
    """Write ``t, outputs..., u1..um, mode columns`` (plus ``x1..xn`` on request)."""
    codes = traj.mode_codes()
    header = ["t", *traj.output_names, *(f"u{i + 1}" for i in range(traj.inputs.shape[1])), *codes]
    if include_states:
        header += [f"x{i + 1}" for i in range(traj.states.shape[1])]
    outs = traj.states[:, list(traj.output_idx)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for j, t in enumerate(traj.times):
            row = [repr(float(t)), *map(repr, outs[j].tolist()), *map(repr, traj.inputs[j].tolist()),
                   *(int(c[j]) for c in codes.values())]
            if include_states:
                row += list(map(repr, traj.states[j].tolist()))
            wr.writerow(row)


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    """Read a trajectory CSV into a column-name -> array mapping."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [r for r in rd if r]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}
