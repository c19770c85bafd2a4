"""Guard inference from states observed at mode transitions.

A guard is the zero set of ``g(x) = w . features(x)``; it is fitted as the
(total least squares) null vector of the feature matrix of the transition
states.  Linear features ``[x; 1]`` are tried first, degree-2 features
only when the linear fit is poor.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "GuardFitError", "InsufficientDataError", "DegenerateFitError", "UnfitGuardError",
    "TransitionSample", "GuardModel", "LearnedEdge", "quadratic_features",
    "fit_linear_guard", "fit_quadratic_guard", "fit_guard_hierarchical", "assemble_edges",
]

DEGENERATE_TOL = 1e-9


class GuardFitError(Exception):
    pass


class InsufficientDataError(GuardFitError):
    pass


class DegenerateFitError(GuardFitError):
    pass


class UnfitGuardError(GuardFitError):
    def __init__(self, linear_residual: float, quadratic_residual: float):
        self.linear_residual = linear_residual
        self.quadratic_residual = quadratic_residual
        super().__init__(f"no guard model fits: linear residual {linear_residual:.3g}, "
                         f"quadratic residual {quadratic_residual:.3g}")


@dataclass(frozen=True)
class TransitionSample:
    state: np.ndarray
    source: int
    target: int

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("a transition sample needs distinct source and target modes")


def quadratic_features(X: np.ndarray) -> np.ndarray:
    """Degree-2 expansion without the constant: squares, cross terms, linear terms."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[1]
    cross = [X[:, i] * X[:, j] for i, j in combinations(range(n), 2)]
    cols = [X ** 2] + ([np.stack(cross, axis=1)] if cross else []) + [X]
    return np.concatenate(cols, axis=1)


@dataclass
class GuardModel:
    kind: str                # "linear" or "quadratic"
    w: np.ndarray            # unit norm, over features(x) followed by 1
    residual: float
    n: int

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)

    def features(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        F = X if self.kind == "linear" else quadratic_features(X)
        return np.concatenate([F, np.ones((X.shape[0], 1))], axis=1)

    def __call__(self, X) -> np.ndarray:
        """Guard values for a batch of states ``(B, n)`` (or one state)."""
        X = np.asarray(X, dtype=float)
        if self.kind == "linear":
            out = X @ self.w[:-1] + self.w[-1]
        else:
            out = self.features(X) @ self.w
        return out

    def flipped(self) -> "GuardModel":
        return GuardModel(self.kind, -self.w, self.residual, self.n)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "coefficients": self.w.tolist(), "residual": self.residual,
                "n": self.n}

    @classmethod
    def from_dict(cls, d) -> "GuardModel":
        return cls(d["kind"], np.asarray(d["coefficients"]), float(d["residual"]), int(d["n"]))


def _states(samples) -> np.ndarray:
    if len(samples) == 0:
        raise InsufficientDataError("no transition samples")
    if isinstance(samples, np.ndarray):
        return np.atleast_2d(samples).astype(float)
    return np.stack([np.asarray(s.state, dtype=float) for s in samples])


def _null_fit(F: np.ndarray):
    """Unit null vector of ``F``, relative residual, and the degeneracy flag."""
    _, s, vt = np.linalg.svd(F, full_matrices=True)
    sig = np.zeros(F.shape[1])
    sig[:s.size] = s
    if sig[0] == 0.0:
        raise DegenerateFitError("all transition states are zero")
    w = vt[-1]
    nz = np.flatnonzero(np.abs(w) > 1e-12 * np.abs(w).max())
    if w[nz[0]] < 0:
        w = -w
    degenerate = sig[-2] <= DEGENERATE_TOL * sig[0]
    return w / np.linalg.norm(w), sig[-1] / sig[0], degenerate, sig


def fit_linear_guard(samples: Sequence[TransitionSample] | np.ndarray) -> GuardModel:
    """Hyperplane ``w . [x; 1] = 0`` through the transition states."""
    X = _states(samples)
    n = X.shape[1]
    if X.shape[0] < n:
        raise InsufficientDataError(f"{X.shape[0]} samples for a {n}-dimensional guard; "
                                    f"at least {n} are needed")
    w, res, degenerate, sig = _null_fit(np.concatenate([X, np.ones((X.shape[0], 1))], axis=1))
    if degenerate:
        raise DegenerateFitError(f"ambiguous null space: two smallest singular values "
                                 f"{sig[-2]:.3g}, {sig[-1]:.3g}")
    return GuardModel("linear", w, res, n)


def fit_quadratic_guard(samples: Sequence[TransitionSample] | np.ndarray) -> GuardModel:
    X = _states(samples)
    n = X.shape[1]
    F = quadratic_features(X)
    if X.shape[0] < F.shape[1]:
        raise InsufficientDataError(f"{X.shape[0]} samples for {F.shape[1]} quadratic features")
    w, res, degenerate, sig = _null_fit(np.concatenate([F, np.ones((X.shape[0], 1))], axis=1))
    if degenerate:
        raise DegenerateFitError(f"ambiguous quadratic null space: {sig[-2]:.3g}, {sig[-1]:.3g}")
    return GuardModel("quadratic", w, res, n)


def fit_guard_hierarchical(samples, residual_threshold: float = 1e-4) -> GuardModel:
    """Linear guard if it fits within ``residual_threshold``, else quadratic."""
    lin = fit_linear_guard(samples)
    if lin.residual <= residual_threshold:
        return lin
    quad = fit_quadratic_guard(samples)
    if quad.residual <= residual_threshold:
        return quad
    raise UnfitGuardError(lin.residual, quad.residual)


@dataclass
class LearnedEdge:
    source: int
    target: int
    guard: GuardModel

    def to_dict(self) -> dict:
        return {"source": self.source, "target": self.target, **self.guard.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "LearnedEdge":
        return cls(int(d["source"]), int(d["target"]), GuardModel.from_dict(d))


def _varying(X: np.ndarray) -> np.ndarray:
    spread = X.max(axis=0) - X.min(axis=0)
    return spread > 1e-9 * (1.0 + np.abs(X).max(axis=0))


def _fit_dropping_constants(X: np.ndarray, threshold: float) -> GuardModel:
    """Refit on the columns that vary; constant columns get zero weight.

    A constant column is collinear with the bias, so it always yields an
    exact but useless null vector.
    """
    if X.shape[0] < X.shape[1]:
        raise InsufficientDataError(f"{X.shape[0]} samples for a {X.shape[1]}-dimensional guard; "
                                    f"at least {X.shape[1]} are needed")
    keep = _varying(X)
    if keep.all() or not keep.any():
        raise DegenerateFitError("transition states leave the guard undetermined")
    sub = fit_guard_hierarchical(X[:, keep], threshold)
    if sub.kind != "linear":
        raise DegenerateFitError("reduced fit is not planar")
    w = np.zeros(X.shape[1] + 1)
    w[np.flatnonzero(keep)] = sub.w[:-1]
    w[-1] = sub.w[-1]
    return GuardModel("linear", w, sub.residual, X.shape[1])


def assemble_edges(groups: Mapping[tuple[int, int], Sequence[TransitionSample]],
                   threshold: float = 1e-4,
                   donors: Mapping[tuple[int, int], np.ndarray] | None = None,
                   previous: Mapping[tuple[int, int], GuardModel] | None = None):
    """One edge per observed (source, target) pair.

    ``donors[pair]`` holds states visited in the source mode before the
    transition; the guard sign is chosen so that most of them give g < 0.
    Columns constant across a pair's samples are left out of its fit.
    Pairs whose fit fails keep their ``previous`` guard when one exists.
    Returns ``(edges, failures)`` with failures mapping pair to the error.
    """
    edges, failures = [], {}
    for pair in sorted(groups):
        samples = groups[pair]
        try:
            X = _states(samples)
            if len(X) >= X.shape[1] and not _varying(X).all():
                guard = _fit_dropping_constants(X, threshold)
            else:
                try:
                    guard = fit_guard_hierarchical(samples, threshold)
                except DegenerateFitError:
                    guard = _fit_dropping_constants(X, threshold)
        except GuardFitError as err:
            failures[pair] = err
            if previous and pair in previous:
                edges.append(LearnedEdge(pair[0], pair[1], previous[pair]))
            continue
        if donors is not None and pair in donors and len(donors[pair]):
            g = guard(np.asarray(donors[pair]))
            if np.count_nonzero(g > 0) > np.count_nonzero(g < 0):
                guard = guard.flipped()
        edges.append(LearnedEdge(pair[0], pair[1], guard))
    return edges, failures
