"""Neural hybrid automata learned from observed trajectories.

Trajectories are cut into segments at switching events.  An encoder maps
each segment to a probability vector over ``M`` latent modes; every latent
mode has its own neural vector field.  Encoder and fields are trained
jointly: the forward pass integrates each segment with its most likely mode,
the backward pass weights every mode by its probability (straight-through),
and consecutive segments are pushed toward different modes.  Guards between
latent modes are fitted afterwards from the states at the cuts.

A surrogate may be composite: a *family* is a set of components that share
one bank of mode fields (and one encoder), e.g. identical follower cars.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .diffsim import FieldBlock, NetBank, Rollout, backward, integrate_diff
from .guards import LearnedEdge, TransitionSample, assemble_edges
from .hybrid import InputParams, Trajectory

__all__ = [
    "Recording", "ComponentLayout", "FamilyLayout", "SurrogateLayout", "chasing_cars_layout",
    "Segment", "SegmentationError", "TrainingDivergence", "detect_change_points",
    "segment_trajectory", "segment_features", "ModeEncoder", "encode", "NhaSurrogate",
    "TrainConfig", "TrainReport", "LossTerms", "nha_loss", "train", "fit_guards", "Adam",
]

N_RESAMPLE = 8


class SegmentationError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Recordings


@dataclass
class Recording:
    """Sampled states plus the piecewise-constant input that produced them.

    ``switches`` maps an observer label to ``(times, states)`` of the
    transitions it reported.
    """

    times: np.ndarray
    states: np.ndarray
    input_segments: np.ndarray          # (K, m)
    segment_length: float
    switches: dict = field(default_factory=dict)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def phi(self) -> np.ndarray:
        return self.input_segments.ravel()

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "Recording":
        switches: dict[str, list] = {}
        for e in traj.events:
            switches.setdefault(e.label, []).append((e.time, e.state))
        sw = {lab: (np.array([t for t, _ in v]), np.stack([s for _, s in v])) for lab, v in switches.items()}
        if traj.params is None:
            raise ValueError("the trajectory carries no input parameters")
        return cls(traj.times.copy(), traj.states.copy(), traj.params.segments.copy(),
                   traj.params.segment, sw)

    @classmethod
    def from_columns(cls, cols: dict, state_cols: Sequence[str], input_cols: Sequence[str],
                     segment_length: float, mode_cols: dict[str, str] | None = None) -> "Recording":
        """Build a recording from CSV columns.

        Switch times are taken as the first sample showing a new mode code, so
        they are only as accurate as the sampling.
        """
        t = np.asarray(cols["t"], dtype=float)
        X = np.stack([cols[c] for c in state_cols], axis=1)
        U = np.stack([cols[c] for c in input_cols], axis=1) if input_cols else np.zeros((t.size, 0))
        K = int(np.ceil(t[-1] / segment_length - 1e-9))
        idx = np.searchsorted(t, np.arange(K) * segment_length + 1e-9 * segment_length)
        segs = U[np.minimum(idx, t.size - 1)]
        sw = {}
        for label, col in (mode_cols or {}).items():
            codes = np.asarray(cols[col])
            j = np.flatnonzero(np.diff(codes) != 0) + 1
            sw[label] = (t[j], X[j])
        return cls(t, X, segs, float(segment_length), sw)

    def inputs_at(self, t) -> np.ndarray:
        k = np.floor(np.asarray(t) / self.segment_length + 1e-9).astype(int)
        return self.input_segments[np.clip(k, 0, len(self.input_segments) - 1)]

    def observer_switches(self, label: str | None):
        """Interior switch times (deduplicated) and states for one label, or all."""
        if label is None:
            items = [v for v in self.switches.values()]
            if not items:
                return np.zeros(0), np.zeros((0, self.states.shape[1]))
            t = np.concatenate([v[0] for v in items])
            x = np.concatenate([v[1] for v in items])
            order = np.argsort(t, kind="stable")
            t, x = t[order], x[order]
        elif label in self.switches:
            t, x = self.switches[label]
        else:
            return np.zeros(0), np.zeros((0, self.states.shape[1]))
        tol = 1e-12 * max(1.0, self.horizon)
        keep = (t > self.times[0] + tol) & (t < self.times[-1] - tol)
        t, x = t[keep], x[keep]
        if t.size:
            last = np.append(np.diff(t) > tol, True)    # of equal times keep the last state
            t, x = t[last], x[last]
        return t, x


# --------------------------------------------------------------------------
# Layout


@dataclass(frozen=True)
class ComponentLayout:
    name: str
    family: str
    state_idx: tuple[int, ...]
    input_idx: tuple[int, ...] = ()
    guard_idx: tuple[int, ...] | None = None   # defaults to state_idx
    label: str | None = None                   # observer label; None means every event

    @property
    def guard_features(self) -> tuple[int, ...]:
        return self.state_idx if self.guard_idx is None else self.guard_idx


@dataclass(frozen=True)
class FamilyLayout:
    name: str
    M: int
    hidden: tuple[int, ...] = (32, 32)


@dataclass(frozen=True)
class SurrogateLayout:
    n: int
    m: int
    horizon: float
    segment_length: float
    families: tuple[FamilyLayout, ...]
    components: tuple[ComponentLayout, ...]
    output_names: tuple[str, ...] = ()
    output_idx: tuple[int, ...] = ()

    def __post_init__(self):
        names = [f.name for f in self.families]
        owned = []
        for c in self.components:
            if c.family not in names:
                raise ValueError(f"component {c.name} refers to unknown family {c.family}")
            owned += list(c.state_idx)
        if len(owned) != len(set(owned)):
            raise ValueError("components must own disjoint state coordinates")
        for f in self.families:
            shapes = {(len(c.state_idx), len(c.input_idx), len(c.guard_features))
                      for c in self.members(f.name)}
            if len(shapes) > 1:
                raise ValueError(f"components of family {f.name} differ in shape")

    def family(self, name: str) -> FamilyLayout:
        return next(f for f in self.families if f.name == name)

    def members(self, family: str) -> list[ComponentLayout]:
        return [c for c in self.components if c.family == family]

    @classmethod
    def single(cls, n: int, m: int, M: int, horizon: float, segment_length: float,
               hidden=(32, 32), output_names=(), output_idx=()) -> "SurrogateLayout":
        """One automaton over the whole state, segmented at every event."""
        return cls(n, m, horizon, segment_length, (FamilyLayout("main", M, tuple(hidden)),),
                   (ComponentLayout("main", "main", tuple(range(n)), tuple(range(m))),),
                   tuple(output_names), tuple(output_idx))

    def to_dict(self) -> dict:
        return {
            "n": self.n, "m": self.m, "horizon": self.horizon, "segment_length": self.segment_length,
            "families": [{"name": f.name, "M": f.M, "hidden": list(f.hidden)} for f in self.families],
            "components": [{"name": c.name, "family": c.family, "state_idx": list(c.state_idx),
                            "input_idx": list(c.input_idx),
                            "guard_idx": None if c.guard_idx is None else list(c.guard_idx),
                            "label": c.label} for c in self.components],
            "output_names": list(self.output_names), "output_idx": list(self.output_idx),
        }

    @classmethod
    def from_dict(cls, d) -> "SurrogateLayout":
        return cls(d["n"], d["m"], d["horizon"], d["segment_length"],
                   tuple(FamilyLayout(f["name"], f["M"], tuple(f["hidden"])) for f in d["families"]),
                   tuple(ComponentLayout(c["name"], c["family"], tuple(c["state_idx"]),
                                         tuple(c["input_idx"]),
                                         None if c["guard_idx"] is None else tuple(c["guard_idx"]),
                                         c["label"]) for c in d["components"]),
                   tuple(d["output_names"]), tuple(d["output_idx"]))


def chasing_cars_layout(M: int = 3, hidden=(32, 32)) -> SurrogateLayout:
    """Leader with a single mode; four followers sharing an ``M``-mode automaton.

    A follower's guards read the predecessor position and its own position
    and velocity.
    """
    comps = [ComponentLayout("car1", "leader", (0, 1), (0, 1), (), label="")]
    for i in range(2, 6):
        me = 2 * (i - 1)
        comps.append(ComponentLayout(f"car{i}", "follower", (me, me + 1), (),
                                     (me - 2, me, me + 1), label=f"car{i}"))
    return SurrogateLayout(10, 2, 100.0, 5.0,
                           (FamilyLayout("leader", 1, tuple(hidden)),
                            FamilyLayout("follower", M, tuple(hidden))),
                           tuple(comps), tuple(f"y{i}" for i in range(1, 6)), (0, 2, 4, 6, 8))


# --------------------------------------------------------------------------
# Segmentation


@dataclass
class Segment:
    traj_id: int
    component: str
    t0: float
    t1: float
    times: np.ndarray
    states: np.ndarray       # component-local states
    inputs: np.ndarray       # component-local inputs
    features: np.ndarray
    guard_states: np.ndarray  # guard feature coordinates along the segment

    @property
    def duration(self) -> float:
        return self.t1 - self.t0


def segment_features(times: np.ndarray, states: np.ndarray, horizon: float) -> np.ndarray:
    """Fixed-length description of a segment.

    States resampled at 8 equally spaced instants (relative to the first),
    their first differences divided by the resampling interval, and the
    duration as a fraction of the horizon.
    """
    times = np.asarray(times, dtype=float)
    dur = times[-1] - times[0]
    grid = np.linspace(times[0], times[-1], N_RESAMPLE)
    res = np.stack([np.interp(grid, times, states[:, j]) for j in range(states.shape[1])], axis=1)
    rel = res - res[0]
    rate = np.diff(res, axis=0) / (dur / (N_RESAMPLE - 1)) if dur > 0 else np.zeros((N_RESAMPLE - 1, states.shape[1]))
    return np.concatenate([rel.ravel(), rate.ravel(), [dur / horizon]])


def detect_change_points(times, states, kappa: float = 8.0) -> np.ndarray:
    """Times where the second difference is an outlier.

    A sample is flagged when the norm of its second difference exceeds the
    median by more than ``kappa`` median absolute deviations (and a round-off
    floor); flags less than 2 samples apart are merged.
    """
    times = np.asarray(times, dtype=float)
    X = np.asarray(states, dtype=float).reshape(times.size, -1)
    if times.size < 4:
        raise SegmentationError(f"trajectory has {times.size} samples; at least 4 are needed")
    d2 = np.linalg.norm(X[2:] - 2 * X[1:-1] + X[:-2], axis=1)
    med = np.median(d2)
    mad = np.median(np.abs(d2 - med))
    floor = 1e-9 * (1.0 + np.abs(X).max())
    flags = np.flatnonzero(d2 > max(med + kappa * mad, floor)) + 1
    if flags.size == 0:
        return np.zeros(0)
    groups = np.split(flags, np.flatnonzero(np.diff(flags) >= 2) + 1)
    reps = [int(np.round(g.mean())) for g in groups]
    return times[reps]


def _interp_rows(t, times, X):
    return np.stack([np.interp(t, times, X[:, j]) for j in range(X.shape[1])], axis=-1).reshape(-1, X.shape[1])


def segment_trajectory(rec, switch_times=None, component: ComponentLayout | None = None,
                       traj_id: int = 0, switch_states=None, kappa: float = 8.0) -> list[Segment]:
    """Cut a trajectory into segments.

    With ``switch_times`` the cuts are exactly there (``switch_states``, if
    given, are the full states at the cuts; otherwise they are interpolated).
    Without, :func:`detect_change_points` proposes the cuts.
    """
    if isinstance(rec, Trajectory):
        rec = Recording.from_trajectory(rec)
    times, X = rec.times, rec.states
    if times.size < 4:
        raise SegmentationError(f"trajectory has {times.size} samples; at least 4 are needed")
    comp = component or ComponentLayout("main", "main", tuple(range(X.shape[1])),
                                        tuple(range(rec.input_segments.shape[1])))
    sidx, uidx, gidx = list(comp.state_idx), list(comp.input_idx), list(comp.guard_features)
    if switch_times is None:
        cuts = detect_change_points(times, X[:, sidx], kappa)
        cut_states = _interp_rows(cuts, times, X)
    else:
        cuts = np.asarray(switch_times, dtype=float).ravel()
        if cuts.size and (np.any(np.diff(cuts) <= 0) or cuts[0] <= times[0] or cuts[-1] >= times[-1]):
            raise SegmentationError("switch times must be strictly increasing and inside the span")
        cut_states = (np.asarray(switch_states, dtype=float).reshape(cuts.size, X.shape[1])
                      if switch_states is not None else _interp_rows(cuts, times, X))
    bounds = np.concatenate([[times[0]], cuts, [times[-1]]])
    bstates = np.concatenate([X[:1], cut_states, X[-1:]])
    tol = 1e-9 * max(1.0, abs(times[-1]))
    segments = []
    for k in range(bounds.size - 1):
        t0, t1 = bounds[k], bounds[k + 1]
        lo = np.searchsorted(times, t0 + tol, side="left")
        hi = np.searchsorted(times, t1 - tol, side="right")
        ts = np.concatenate([[t0], times[lo:hi], [t1]])
        xs = np.concatenate([bstates[k:k + 1], X[lo:hi], bstates[k + 1:k + 2]])
        local = xs[:, sidx]
        segments.append(Segment(
            traj_id, comp.name, float(t0), float(t1), ts, local, rec.inputs_at(ts)[:, uidx],
            segment_features(ts, local, rec.horizon), xs[:, gidx]))
    return segments


# --------------------------------------------------------------------------
# Encoder


class ModeEncoder:
    """Segment features -> ``M`` logits through one hidden tanh layer."""

    def __init__(self, n_features: int, M: int, hidden: int = 32, rng=None, bank: NetBank | None = None):
        self.M = int(M)
        self.bank = bank if bank is not None else NetBank([n_features, hidden, self.M], 1, rng=rng)

    @classmethod
    def zeros(cls, n_features: int, M: int, hidden: int = 32) -> "ModeEncoder":
        enc = cls(n_features, M, hidden, rng=0)
        enc.bank.set_flat(np.zeros_like(enc.bank.flat()))
        return enc

    def logits(self, F: np.ndarray):
        out, acts = self.bank.forward_all(np.atleast_2d(F))
        return out[0], acts

    def probs(self, F: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(F)[0])


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def encode(enc: ModeEncoder, seg: Segment | np.ndarray):
    """Mode probabilities of a segment and its most likely mode (lowest index on ties)."""
    F = seg.features if isinstance(seg, Segment) else np.asarray(seg, dtype=float)
    p = enc.probs(F)[0]
    return p, int(np.argmax(p))


# --------------------------------------------------------------------------
# Surrogate


@dataclass
class _Entry:
    traj_id: int
    rec: Recording
    segments: dict                    # component name -> list[Segment]
    windows: dict = field(default_factory=dict)


class NhaSurrogate:
    """Composite neural hybrid automaton with a replay buffer."""

    def __init__(self, layout: SurrogateLayout, seed: int = 0, buffer_size: int = 5,
                 known: dict | None = None, x0=None):
        self.layout = layout
        rng = np.random.default_rng(seed)
        self.banks: dict[str, NetBank] = {}
        self.encoders: dict[str, ModeEncoder | None] = {}
        self.guards: dict[str, list[LearnedEdge]] = {}
        self.known = dict(known or {})
        for fam in layout.families:
            c = layout.members(fam.name)[0]
            n_loc, m_loc = len(c.state_idx), len(c.input_idx)
            self.banks[fam.name] = NetBank([n_loc + m_loc + 1, *fam.hidden, n_loc], fam.M, rng=rng)
            n_feat = N_RESAMPLE * n_loc + (N_RESAMPLE - 1) * n_loc + 1
            self.encoders[fam.name] = ModeEncoder(n_feat, fam.M, rng=rng) if fam.M > 1 else None
            self.guards[fam.name] = []
        self.initial_modes = {c.name: 0 for c in layout.components}
        self.buffer: deque[_Entry] = deque(maxlen=buffer_size)
        self.x0 = None if x0 is None else np.asarray(x0, dtype=float)
        self.normalized = False
        self._next_id = 0

    # ---- structure

    @property
    def M(self) -> int:
        return max(f.M for f in self.layout.families)

    @property
    def mode_counts(self) -> dict[str, int]:
        return {f.name: f.M for f in self.layout.families}

    def blocks(self) -> list[FieldBlock]:
        out = []
        for fam in self.layout.families:
            members = self.layout.members(fam.name)
            out.append(FieldBlock(self.banks[fam.name], [c.state_idx for c in members],
                                  np.array([c.input_idx for c in members], dtype=int).reshape(len(members), -1),
                                  self.known.get(fam.name, ())))
        return out

    def _instance_order(self) -> list[ComponentLayout]:
        return [c for fam in self.layout.families for c in self.layout.members(fam.name)]

    # ---- buffer

    def add_trajectory(self, traj: Trajectory | Recording) -> int:
        rec = Recording.from_trajectory(traj) if isinstance(traj, Trajectory) else traj
        if self.x0 is None:
            self.x0 = rec.states[0].copy()
        tid = self._next_id
        self._next_id += 1
        segs = {}
        for comp in self.layout.components:
            fam = self.layout.family(comp.family)
            if fam.M == 1:
                segs[comp.name] = segment_trajectory(rec, [], comp, tid)
            else:
                t, x = rec.observer_switches(comp.label)
                segs[comp.name] = segment_trajectory(rec, t, comp, tid, x)
        self.buffer.append(_Entry(tid, rec, segs))
        return tid

    def segments(self, family: str | None = None) -> list[Segment]:
        names = {c.name for c in self.layout.components if family is None or c.family == family}
        return [s for e in self.buffer for c in self.layout.components if c.name in names
                for s in e.segments[c.name]]

    @property
    def training_inputs(self) -> np.ndarray:
        return np.stack([e.rec.phi for e in self.buffer]) if self.buffer else np.zeros((0, 0))

    # ---- encoding

    def hard_modes(self, family: str, segs: Sequence[Segment] | None = None):
        segs = self.segments(family) if segs is None else segs
        enc = self.encoders[family]
        if enc is None or not segs:
            return np.ones((len(segs), 1)), np.zeros(len(segs), dtype=int)
        P = enc.probs(np.stack([s.features for s in segs]))
        return P, np.argmax(P, axis=1)

    # ---- simulation

    def simulate(self, phi, step: float = 0.25, record: bool = False, x0=None):
        """Roll the surrogate out under input magnitudes ``phi`` (``(B, K*m)``)."""
        lay = self.layout
        if isinstance(phi, InputParams):
            phi = phi.phi
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        B = phi.shape[0]
        segs = phi.reshape(B, -1, lay.m)
        r = lay.segment_length / step
        if abs(r - round(r)) > 1e-9 * max(1.0, r) or round(r) < 1:
            raise ValueError(f"step {step} does not divide the segment length {lay.segment_length}")
        n_steps = int(round(lay.horizon / step))
        start = self.x0 if x0 is None else np.asarray(x0, dtype=float)
        if start is None:
            raise ValueError("the surrogate has no initial state")
        Z0 = np.broadcast_to(start, (B, lay.n)).copy()
        order = self._instance_order()
        modes0 = np.array([self.initial_modes[c.name] for c in order], dtype=int)
        switch = _Switcher(self, order, Z0) if any(self.guards.values()) else None
        return integrate_diff(self.blocks(), Z0, n_steps, step, inputs=(segs, lay.segment_length),
                              switch=switch, modes0=modes0, record=record)

    def outputs(self, rollout: Rollout) -> np.ndarray:
        return rollout.states[:, :, list(self.layout.output_idx)]

    def _packed(self):
        if not _kernels.AVAILABLE or any(any(k is not None for k in v) for v in self.known.values()):
            return None
        if any(e.guard.kind != "linear" for v in self.guards.values() for e in v):
            return None
        order = self._instance_order()
        guards = [(list(c.guard_features), self.guards[c.family]) if self.guards[c.family] else None
                  for c in order]
        try:
            return _kernels.Packed(self.blocks(), guards,
                                   [self.initial_modes[c.name] for c in order])
        except ValueError:
            return None

    def _prepare(self, phi, step):
        lay = self.layout
        if isinstance(phi, InputParams):
            phi = phi.phi
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        r = lay.segment_length / step
        if abs(r - round(r)) > 1e-9 * max(1.0, r) or round(r) < 1:
            raise ValueError(f"step {step} does not divide the segment length {lay.segment_length}")
        if self.x0 is None:
            raise ValueError("the surrogate has no initial state")
        n_steps = int(round(lay.horizon / step))
        return phi.reshape(phi.shape[0], -1, lay.m), n_steps, np.broadcast_to(self.x0, (phi.shape[0], lay.n))

    def rollout(self, phi, step: float = 0.25, fast: bool = True):
        """States ``(B, N, n)`` and per-step modes ``(B, N-1, C)`` without a tape."""
        U, n_steps, X0 = self._prepare(phi, step)
        packed = self._packed() if fast else None
        if packed is None:
            ro, _ = self.simulate(U.reshape(U.shape[0], -1), step)
            return ro.states, ro.modes.transpose(1, 0, 2)
        states, modes, _ = packed.run(X0, U, self.layout.segment_length, step, n_steps)
        return states, modes

    def rollout_vjp(self, phi, step: float = 0.25, fast: bool = True):
        """One rollout plus a pullback mapping state cotangents to input gradients."""
        U, n_steps, X0 = self._prepare(phi, step)
        if U.shape[0] != 1:
            raise ValueError("rollout_vjp takes a single input vector")
        lay = self.layout
        packed = self._packed() if fast else None
        if packed is None:
            ro, tape = self.simulate(U.reshape(1, -1), step, record=True)

            def pullback(dS):
                return backward(tape, np.asarray(dS)[None]).phi[0]
            return ro.states[0], ro.modes[:, 0], pullback
        states, modes, acts = packed.run(X0, U, lay.segment_length, step, n_steps, record=True)

        def pullback(dS):
            _, gphi = packed.grad(dS, modes[0], acts[0], lay.segment_length, step, U.shape[1], lay.m)
            return gphi.ravel()
        return states[0], modes[0], pullback

    # ---- serialization

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "layout": self.layout.to_dict(),
            "families": {
                f.name: {
                    "M": f.M,
                    "fields": self.banks[f.name].to_dict(),
                    "encoder": None if self.encoders[f.name] is None else self.encoders[f.name].bank.to_dict(),
                    "guards": [e.to_dict() for e in self.guards[f.name]],
                } for f in self.layout.families},
            "initial_modes": self.initial_modes,
            "x0": None if self.x0 is None else self.x0.tolist(),
            "normalized": self.normalized,
            "buffer": [{"id": e.traj_id, "samples": int(e.rec.times.size),
                        "phi": e.rec.phi.tolist()} for e in self.buffer],
            "buffer_size": self.buffer.maxlen,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d) -> "NhaSurrogate":
        sur = cls(SurrogateLayout.from_dict(d["layout"]), buffer_size=d.get("buffer_size", 5),
                  x0=d.get("x0"))
        for name, fd in d["families"].items():
            sur.banks[name] = NetBank.from_dict(fd["fields"])
            if fd["encoder"] is not None:
                sur.encoders[name] = ModeEncoder(0, fd["M"], bank=NetBank.from_dict(fd["encoder"]))
            sur.guards[name] = [LearnedEdge.from_dict(g) for g in fd["guards"]]
        sur.initial_modes = {k: int(v) for k, v in d["initial_modes"].items()}
        sur.normalized = d.get("normalized", True)
        return sur

    @classmethod
    def from_json(cls, text: str) -> "NhaSurrogate":
        return cls.from_dict(json.loads(text))


class _Switcher:
    """Mode update after each surrogate step: upward guard crossings fire."""

    def __init__(self, sur: NhaSurrogate, order: list[ComponentLayout], Z0: np.ndarray):
        self.items = []
        for col, comp in enumerate(order):
            edges = sur.guards[comp.family]
            if not edges:
                continue
            gidx = list(comp.guard_features)
            lin = all(e.guard.kind == "linear" for e in edges)
            W = np.stack([e.guard.w for e in edges]) if lin else None
            src = np.array([e.source for e in edges])
            dst = np.array([e.target for e in edges])
            self.items.append((col, gidx, edges, W, src, dst))
        self.prev = [self._values(it, Z0) for it in self.items]

    @staticmethod
    def _values(item, Z):
        _, gidx, edges, W, _, _ = item
        G = Z[:, gidx]
        if W is not None:
            return G @ W[:, :-1].T + W[:, -1]
        return np.stack([e.guard(G) for e in edges], axis=1)

    def __call__(self, k, t_next, Z, modes):
        modes = modes.copy()
        for j, item in enumerate(self.items):
            col, _, _, _, src, dst = item
            g = self._values(item, Z)
            fire = (modes[:, col:col + 1] == src[None, :]) & (self.prev[j] < 0) & (g >= 0)
            any_fire = fire.any(axis=1)
            if any_fire.any():
                first = np.argmax(fire, axis=1)
                modes[any_fire, col] = dst[first[any_fire]]
            self.prev[j] = g
        return modes


# --------------------------------------------------------------------------
# Reconstruction windows


@dataclass
class _Windows:
    x0: np.ndarray          # (W, n)
    steps: np.ndarray       # (L, W)
    targets: np.ndarray     # (W, L, n)
    mask: np.ndarray        # (W, L) 1 where the step ends on an observed sample
    seg: np.ndarray         # (W,) segment index
    t0: np.ndarray          # (W,)
    useg: np.ndarray        # (W, K, m)

    @property
    def size(self) -> int:
        return self.x0.shape[0]

    def take(self, idx) -> "_Windows":
        return _Windows(self.x0[idx], self.steps[:, idx], self.targets[idx], self.mask[idx],
                        self.seg[idx], self.t0[idx], self.useg[idx])

    @staticmethod
    def concat(parts: list["_Windows"], offsets) -> "_Windows":
        L = max(p.steps.shape[0] for p in parts)
        pad = lambda a, axis: np.concatenate(
            [a, np.zeros(a.shape[:axis] + (L - a.shape[axis],) + a.shape[axis + 1:])], axis=axis)
        Kmax = max(p.useg.shape[1] for p in parts)
        return _Windows(
            np.concatenate([p.x0 for p in parts]),
            np.concatenate([pad(p.steps, 0) for p in parts], axis=1),
            np.concatenate([pad(p.targets, 1) for p in parts]),
            np.concatenate([pad(p.mask, 1) for p in parts]),
            np.concatenate([p.seg + o for p, o in zip(parts, offsets)]),
            np.concatenate([p.t0 for p in parts]),
            np.concatenate([np.pad(p.useg, ((0, 0), (0, Kmax - p.useg.shape[1]), (0, 0)), mode="edge")
                            for p in parts]),
        )


def _build_windows(segments: Sequence[Segment], useg: np.ndarray, step: float,
                   thin: bool, max_intervals: int | None) -> _Windows:
    """Integration windows reproducing each segment from observed samples.

    With ``thin`` only samples on the ``step`` grid (plus the segment ends)
    are used.  Between consecutive kept samples the interval is split into
    equal sub-steps no longer than ``step``.  A window covers at most
    ``max_intervals`` such intervals and starts from an observed sample.
    """
    rows = []
    for si, seg in enumerate(segments):
        ts, xs = seg.times, seg.states
        if thin and ts.size > 2:
            q = ts[1:-1] / step
            on = np.abs(q - np.round(q)) < 1e-6
            keep = np.concatenate([[0], np.flatnonzero(on) + 1, [ts.size - 1]])
            ts, xs = ts[keep], xs[keep]
        gaps = np.diff(ts)
        valid = gaps > 1e-12
        idx = np.concatenate([[0], np.flatnonzero(valid) + 1])
        ts, xs = ts[idx], xs[idx]
        if ts.size < 2:
            continue
        nsub = np.maximum(1, np.ceil(np.diff(ts) / step - 1e-9).astype(int))
        n_int = ts.size - 1
        chunk = n_int if max_intervals is None else max_intervals
        for a in range(0, n_int, chunk):
            b = min(a + chunk, n_int)
            steps, tgt, msk = [], [], []
            for j in range(a, b):
                h = (ts[j + 1] - ts[j]) / nsub[j]
                for r in range(nsub[j]):
                    steps.append(h)
                    last = r == nsub[j] - 1
                    tgt.append(xs[j + 1] if last else np.zeros(xs.shape[1]))
                    msk.append(1.0 if last else 0.0)
            rows.append((xs[a], np.array(steps), np.array(tgt), np.array(msk), si, ts[a]))
    n = segments[0].states.shape[1] if segments else 0
    if not rows:
        return _Windows(np.zeros((0, n)), np.zeros((1, 0)), np.zeros((0, 1, n)), np.zeros((0, 1)),
                        np.zeros(0, dtype=int), np.zeros(0), np.zeros((0,) + useg.shape))
    L = max(r[1].size for r in rows)
    W = len(rows)
    steps = np.zeros((L, W))
    targets = np.zeros((W, L, n))
    mask = np.zeros((W, L))
    for w, (_, st, tg, mk, _, _) in enumerate(rows):
        steps[:st.size, w] = st
        targets[w, :st.size] = tg
        mask[w, :st.size] = mk
    return _Windows(np.stack([r[0] for r in rows]), steps, targets, mask,
                    np.array([r[4] for r in rows]), np.array([r[5] for r in rows]),
                    np.broadcast_to(useg, (W,) + useg.shape).copy())


def _rollout_windows(bank: NetBank, known, win: _Windows, modes: np.ndarray,
                     segment_length: float, record: bool = True):
    n, m = win.x0.shape[1], win.useg.shape[2]
    block = FieldBlock(bank, [list(range(n))], np.arange(m)[None, :], known or ())
    sched = np.broadcast_to(modes[None, :, None], (win.steps.shape[0], win.size, 1))
    return integrate_diff([block], win.x0, win.steps.shape[0], win.steps,
                          inputs=(win.useg, segment_length), schedule=sched, t0=win.t0, record=record)


# --------------------------------------------------------------------------
# Loss


@dataclass
class LossTerms:
    total: float
    reconstruction: np.ndarray    # per segment
    separation: np.ndarray        # per segment: lambda * <p_k, p_{k+1}> (0 for the last of a component)


def nha_loss(sur: NhaSurrogate, segments: Sequence[Segment], step: float,
             lambda_sep: float = 0.1) -> LossTerms:
    """Reconstruction MSE of every segment plus the mode-separation penalty.

    Each segment is integrated from its first sample with its hard mode and
    compared with every later sample (squared error averaged over samples and
    coordinates).  The penalty sums ``<p_k, p_{k+1}>`` over consecutive
    segments of the same component.
    """
    lay = sur.layout
    comp_of = {c.name: c for c in lay.components}
    recon = np.zeros(len(segments))
    sep = np.zeros(len(segments))
    probs: list[np.ndarray | None] = [None] * len(segments)
    for fam in lay.families:
        idx = [i for i, s in enumerate(segments) if comp_of[s.component].family == fam.name]
        if not idx:
            continue
        fsegs = [segments[i] for i in idx]
        P, hard = sur.hard_modes(fam.name, fsegs)
        for j, i in enumerate(idx):
            probs[i] = P[j]
        win = _build_windows(fsegs, np.zeros((1, 0)), step, thin=False, max_intervals=None)
        win.useg = np.stack([_segment_inputs(s, lay) for s in fsegs])[win.seg]
        ro, _ = _rollout_windows(sur.banks[fam.name], sur.known.get(fam.name), win, hard[win.seg],
                                 lay.segment_length, record=False)
        err = (ro.states[:, 1:] - win.targets) ** 2
        per = (err.sum(axis=2) * win.mask).sum(axis=1) / (win.mask.sum(axis=1) * err.shape[2])
        recon[np.array(idx)[win.seg]] = per
    for i in range(len(segments) - 1):
        j = next((j for j in range(i + 1, len(segments))
                  if segments[j].component == segments[i].component
                  and segments[j].traj_id == segments[i].traj_id), None)
        if j is not None:
            sep[i] = lambda_sep * float(probs[i] @ probs[j])
    return LossTerms(float(recon.sum() + sep.sum()), recon, sep)


def _segment_inputs(seg: Segment, lay: SurrogateLayout) -> np.ndarray:
    """Input magnitudes per input segment for a component (``(K, m_local)``)."""
    K = int(round(lay.horizon / lay.segment_length))
    tk = np.arange(K) * lay.segment_length
    out = np.zeros((K, seg.inputs.shape[1]))
    if seg.inputs.shape[1]:
        j = np.searchsorted(seg.times, tk + 1e-9, side="right") - 1
        out = seg.inputs[np.clip(j, 0, seg.times.size - 1)]
    return out


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    lambda_sep: float = 0.1
    epochs: int = 300
    learning_rate: float = 1e-3
    step: float = 0.1              # integration step of the reconstruction windows
    window: int = 10               # intervals per reconstruction window
    batch: int = 256               # windows per family and epoch
    seed: int = 0
    update_epochs: int | None = None   # epochs when refining an already trained surrogate

    def __post_init__(self):
        if self.lambda_sep < 0:
            raise ValueError("lambda_sep must be non-negative")
        if self.learning_rate <= 0 or self.step <= 0 or self.epochs < 0:
            raise ValueError("learning rate and step must be positive, epochs non-negative")


@dataclass
class TrainReport:
    loss: list
    usage: dict            # family -> segment count per mode
    epochs: int


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            m, v = self.state.get(k, (np.zeros_like(g), np.zeros_like(g)))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.state[k] = (m, v)
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def _family_data(sur: NhaSurrogate, fam: str, cfg: TrainConfig):
    """Segments and windows of a family over the buffer (windows cached per entry)."""
    lay = sur.layout
    segs, parts, offsets = [], [], []
    key = (fam, cfg.step, cfg.window)
    for e in sur.buffer:
        esegs = [s for c in lay.members(fam) for s in e.segments[c.name]]
        if key not in e.windows:
            wins = []
            base = 0
            for c in lay.members(fam):
                cs = e.segments[c.name]
                w = _build_windows(cs, e.rec.input_segments[:, list(c.input_idx)], cfg.step,
                                   thin=True, max_intervals=cfg.window)
                w.seg = w.seg + base
                wins.append(w)
                base += len(cs)
            e.windows[key] = _Windows.concat(wins, [0] * len(wins))
        offsets.append(len(segs))
        parts.append(e.windows[key])
        segs += esegs
    return segs, _Windows.concat(parts, offsets)


def _std(a, axis=0, floor=1e-3):
    return np.maximum(a.std(axis=axis), floor * (1.0 + np.abs(a.mean(axis=axis))))


def _set_normalization(sur: NhaSurrogate, fam: str, segs, win: _Windows):
    """Fix input/output scalings, rewriting weights so the nets compute the same map."""
    bank = sur.banks[fam]
    X = np.concatenate([s.states for s in segs])
    U = np.concatenate([s.inputs for s in segs])
    n = X.shape[1]
    shift = np.concatenate([X.mean(axis=0), U.mean(axis=0) if U.shape[1] else [], [0.0]])
    scale = np.concatenate([_std(X), np.maximum(U.std(axis=0), 0.1) if U.shape[1] else [],
                            [sur.layout.horizon]])
    valid = win.mask > 0
    prev = np.concatenate([win.x0[:, None, :], win.targets[:, :-1]], axis=1)
    h = win.steps.T[..., None]
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = ((win.targets - prev) / np.where(h > 0, h, 1.0))[valid & (win.steps.T > 0)]
    out = _std(rates, floor=1e-2) if rates.size else np.ones(n)
    if sur.normalized:
        # a' = ((x - s')/c') W' + b' must equal ((x - s)/c) W + b
        W0 = bank.W[0]
        ratio = (scale / bank.in_scale)[None, :, None]
        b_new = bank.b[0] + np.einsum("i,mio->mo", (shift - bank.in_shift) / bank.in_scale, W0)
        bank.W[0] = W0 * ratio
        bank.b[0] = b_new
        r = (bank.out_scale / out)
        bank.W[-1] = bank.W[-1] * r[None, None, :]
        bank.b[-1] = bank.b[-1] * r[None, :]
    bank.in_shift, bank.in_scale, bank.out_scale = shift, scale, out
    enc = sur.encoders[fam]
    if enc is not None:
        F = np.stack([s.features for s in segs])
        fs, fc = F.mean(axis=0), np.maximum(F.std(axis=0), 1e-6)
        if sur.normalized:
            eb = enc.bank
            eb.b[0] = eb.b[0] + np.einsum("i,mio->mo", (fs - eb.in_shift) / eb.in_scale, eb.W[0])
            eb.W[0] = eb.W[0] * (fc / eb.in_scale)[None, :, None]
        enc.bank.in_shift, enc.bank.in_scale = fs, fc


def _least_squares_heads(sur: NhaSurrogate, fam: str, segs, win: _Windows, hard, rng, ridge=1e-4,
                         max_rows: int = 20000):
    """Fit each mode's output layer to finite-difference rates of its segments."""
    bank = sur.banks[fam]
    n = win.x0.shape[1]
    prev = np.concatenate([win.x0[:, None, :], win.targets[:, :-1]], axis=1)
    ok = (win.mask > 0) & (win.steps.T > 0)
    # only sub-steps ending on a sample whose predecessor is also a sample
    ok[:, 1:] &= win.mask[:, :-1] > 0
    w_idx, l_idx = np.nonzero(ok)
    if w_idx.size == 0:
        return
    if w_idx.size > max_rows:
        sel = rng.choice(w_idx.size, max_rows, replace=False)
        w_idx, l_idx = w_idx[sel], l_idx[sel]
    h = win.steps[l_idx, w_idx][:, None]
    x_a, x_b = prev[w_idx, l_idx], win.targets[w_idx, l_idx]
    rate = (x_b - x_a) / h
    t_mid = win.t0[w_idx] + win.steps[:, w_idx].T.cumsum(axis=1)[np.arange(w_idx.size), l_idx] - h[:, 0] / 2
    k = np.floor(t_mid / sur.layout.segment_length + 1e-9).astype(int)
    u = win.useg[w_idx, np.clip(k, 0, win.useg.shape[1] - 1)]
    Xin = np.concatenate([(x_a + x_b) / 2, u, t_mid[:, None]], axis=1)
    _, acts = bank.forward_all(Xin)
    H = acts[-1]                                   # (M, R, hidden)
    q_rows = hard[win.seg[w_idx]]
    known = sur.known.get(fam)
    for q in range(bank.M):
        r = q_rows == q
        if r.sum() < 4:
            continue
        target = rate[r]
        if known and known[q] is not None:
            target = target - known[q](Xin[r, :n], Xin[r, n:-1], Xin[r, -1])
        A = np.concatenate([H[q][r], np.ones((r.sum(), 1))], axis=1)
        reg = ridge * r.sum() * np.eye(A.shape[1])
        reg[-1, -1] = 0.0
        sol = np.linalg.solve(A.T @ A + reg, A.T @ (target / bank.out_scale))
        bank.W[-1][q] = sol[:-1]
        bank.b[-1][q] = sol[-1]


def _pairs(segs: Sequence[Segment]) -> np.ndarray:
    """Index pairs of consecutive segments of the same component and trajectory."""
    out = [(i, i + 1) for i in range(len(segs) - 1)
           if segs[i].component == segs[i + 1].component and segs[i].traj_id == segs[i + 1].traj_id]
    return np.array(out, dtype=int).reshape(-1, 2)


def train(sur: NhaSurrogate, cfg: TrainConfig = TrainConfig()) -> TrainReport:
    """Fit encoders and mode fields to the buffered trajectories."""
    if not sur.buffer:
        raise ValueError("the surrogate buffer is empty")
    rng = np.random.default_rng(cfg.seed)
    lay = sur.layout
    data = {}
    for fam in lay.families:
        segs, win = _family_data(sur, fam.name, cfg)
        _set_normalization(sur, fam.name, segs, win)
        data[fam.name] = (segs, win, _pairs(segs))
    if not sur.normalized:
        for fam in lay.families:
            segs, win, _ = data[fam.name]
            _, hard = sur.hard_modes(fam.name, segs)
            _least_squares_heads(sur, fam.name, segs, win, hard, rng)
        epochs = cfg.epochs
    else:
        epochs = cfg.epochs if cfg.update_epochs is None else cfg.update_epochs
    sur.normalized = True

    params = {}
    for fam in lay.families:
        params[("f", fam.name)] = sur.banks[fam.name].flat()
        if sur.encoders[fam.name] is not None:
            params[("e", fam.name)] = sur.encoders[fam.name].bank.flat()
    opt = Adam(cfg.learning_rate)
    curve = []
    for epoch in range(epochs):
        total, grads = 0.0, {}
        for fam in lay.families:
            segs, win, pairs = data[fam.name]
            if win.size == 0:
                continue
            bank = sur.banks[fam.name]
            enc = sur.encoders[fam.name]
            if enc is not None:
                F = np.stack([s.features for s in segs])
                logits, eacts = enc.logits(F)
                P = _softmax(logits)
            else:
                P = np.ones((len(segs), 1))
            hard = np.argmax(P, axis=1)
            pick = rng.choice(win.size, min(cfg.batch, win.size), replace=False) \
                if win.size > cfg.batch else np.arange(win.size)
            wb = win.take(np.sort(pick))
            scale = bank.in_scale[:wb.x0.shape[1]]
            try:
                ro, tape = _rollout_windows(bank, sur.known.get(fam.name), wb, hard[wb.seg],
                                            lay.segment_length)
            except FloatingPointError as err:
                raise TrainingDivergence(f"epoch {epoch}: {err}") from err
            err = (ro.states[:, 1:] - wb.targets) / scale * wb.mask[..., None]
            count = wb.mask.sum(axis=1)[:, None, None] * err.shape[2]
            recon = float(np.sum(err ** 2 / count)) / wb.size
            dS = np.zeros_like(ro.states)
            dS[:, 1:] = 2.0 * err / scale / count / wb.size
            g = backward(tape, dS, probs=[P[wb.seg][:, None, :]])
            grads[("f", fam.name)] = g.theta[0]
            total += recon
            if enc is not None:
                pbar = np.zeros_like(P)
                np.add.at(pbar, wb.seg, g.probs[0][:, 0, :])
                if pairs.size and cfg.lambda_sep > 0:
                    a, b = pairs[:, 0], pairs[:, 1]
                    c = cfg.lambda_sep / len(pairs)
                    total += c * float(np.sum(P[a] * P[b]))
                    np.add.at(pbar, a, c * P[b])
                    np.add.at(pbar, b, c * P[a])
                zbar = P * (pbar - np.sum(pbar * P, axis=1, keepdims=True))
                _, gW, gb = enc.bank.vjp(eacts, zbar[None])
                grads[("e", fam.name)] = enc.bank.grads_flat(gW, gb)
        if not np.isfinite(total) or any(not np.all(np.isfinite(v)) for v in grads.values()):
            raise TrainingDivergence(f"loss became non-finite at epoch {epoch} "
                                     f"(last finite value {curve[-1] if curve else 'none'})")
        curve.append(total)
        opt.step(params, grads)
        for (kind, name), theta in params.items():
            (sur.banks[name] if kind == "f" else sur.encoders[name].bank).set_flat(theta)

    usage = {}
    for fam in lay.families:
        segs = data[fam.name][0]
        _, hard = sur.hard_modes(fam.name, segs)
        usage[fam.name] = np.bincount(hard, minlength=fam.M)
    return TrainReport(curve, usage, epochs)


# --------------------------------------------------------------------------
# Guards of the learned automaton


def fit_guards(sur: NhaSurrogate, threshold: float = 1e-4) -> dict:
    """Fit guards between latent modes from the buffered cut states.

    Also sets each component's initial mode to the most common mode of its
    first segment.  Returns the per-family fitting failures.
    """
    lay = sur.layout
    failures = {}
    for fam in lay.families:
        segs = sur.segments(fam.name)
        if not segs:
            continue
        _, hard = sur.hard_modes(fam.name, segs)
        label = {id(s): int(q) for s, q in zip(segs, hard)}
        firsts = {c.name: [] for c in lay.members(fam.name)}
        groups: dict = {}
        donors: dict = {}
        for e in sur.buffer:
            for c in lay.members(fam.name):
                cs = e.segments[c.name]
                firsts[c.name].append(label[id(cs[0])])
                for a, b in zip(cs[:-1], cs[1:]):
                    qa, qb = label[id(a)], label[id(b)]
                    if qa == qb:
                        continue
                    groups.setdefault((qa, qb), []).append(TransitionSample(a.guard_states[-1], qa, qb))
                    donors.setdefault((qa, qb), []).append(a.guard_states[:-1])
        for c in lay.members(fam.name):
            sur.initial_modes[c.name] = int(np.argmax(np.bincount(firsts[c.name], minlength=fam.M)))
        if fam.M == 1:
            continue
        previous = {(e.source, e.target): e.guard for e in sur.guards[fam.name]}
        edges, fails = assemble_edges(groups, threshold,
                                      {k: np.concatenate(v) for k, v in donors.items()}, previous)
        sur.guards[fam.name] = edges
        if fails:
            failures[fam.name] = fails
    return failures
