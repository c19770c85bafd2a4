"""Dense tanh networks, RK4 rollouts of neural vector fields, and their
reverse-mode gradients.

Gradients are exact for the discrete RK4 map (discretize-then-optimize).
A rollout is batched: ``B`` independent trajectories advance together, and a
``FieldBlock`` evaluates one bank of per-mode networks on every component
instance that shares it.  The forward pass always uses the hard mode of each
instance; the reverse pass weights each mode's contribution by a probability
vector, which reduces to ordinary backprop through the selected field when
the probabilities are one-hot.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .hybrid import InputParams

__all__ = [
    "DenseNet", "NetBank", "KnownTerm", "AffineKnown", "FieldBlock", "Rollout", "Tape",
    "Gradients", "net_forward", "integrate_diff", "backward",
]


# --------------------------------------------------------------------------
# Networks


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, size=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if size is None else (size, fan_in, fan_out)
    return rng.uniform(-lim, lim, shape)


class NetBank:
    """``M`` tanh MLPs with identical layer widths, stored stacked.

    ``W[l]`` has shape ``(M, in, out)`` and ``b[l]`` ``(M, out)``.  Inputs are
    normalized as ``(x - in_shift) / in_scale`` and outputs multiplied by
    ``out_scale``; neither is trained.
    """

    def __init__(self, widths: Sequence[int], M: int = 1, rng=None, W=None, b=None,
                 in_shift=None, in_scale=None, out_scale=None):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ValueError("a network needs at least an input and an output width")
        self.M = int(M)
        pairs = list(zip(self.widths[:-1], self.widths[1:]))
        if W is None:
            rng = np.random.default_rng(rng)
            W = [glorot(rng, i, o, self.M) for i, o in pairs]
            b = [np.zeros((self.M, o)) for _, o in pairs]
        self.W = [np.array(w, dtype=float).reshape(self.M, i, o) for w, (i, o) in zip(W, pairs)]
        self.b = [np.array(v, dtype=float).reshape(self.M, o) for v, (_, o) in zip(b, pairs)]
        self.in_shift = np.zeros(self.widths[0]) if in_shift is None else np.asarray(in_shift, float)
        self.in_scale = np.ones(self.widths[0]) if in_scale is None else np.asarray(in_scale, float)
        self.out_scale = np.ones(self.widths[-1]) if out_scale is None else np.asarray(out_scale, float)

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum(w[0].size + v[0].size for w, v in zip(self.W, self.b))

    def flat(self) -> np.ndarray:
        """Parameters as an ``(M, P)`` array: weights layer by layer, then biases.

        Weights are written row-major in (out, in) orientation.
        """
        parts = [w.transpose(0, 2, 1).reshape(self.M, -1) for w in self.W]
        parts += [v for v in self.b]
        return np.concatenate(parts, axis=1)

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float).reshape(self.M, -1)
        pos = 0
        for l, w in enumerate(self.W):
            _, i, o = w.shape
            self.W[l] = theta[:, pos:pos + i * o].reshape(self.M, o, i).transpose(0, 2, 1).copy()
            pos += i * o
        for l, v in enumerate(self.b):
            self.b[l] = theta[:, pos:pos + v.shape[1]].copy()
            pos += v.shape[1]

    def grads_flat(self, gW, gb) -> np.ndarray:
        parts = [g.transpose(0, 2, 1).reshape(self.M, -1) for g in gW] + list(gb)
        return np.concatenate(parts, axis=1)

    def forward_all(self, X: np.ndarray):
        """Evaluate all M nets on rows ``X (R, in)``; returns ``(M, R, out)`` and a cache."""
        a = (X - self.in_shift) / self.in_scale
        acts = [a]
        h = a
        last = len(self.W) - 1
        for l, (w, v) in enumerate(zip(self.W, self.b)):
            z = np.matmul(h, w) + v[:, None, :]
            h = np.tanh(z) if l < last else z
            if l < last:
                acts.append(h)
        out = h * self.out_scale
        return out, acts

    def vjp(self, acts, G: np.ndarray):
        """Pull back ``G (M, R, out)`` through every net.

        Returns input cotangents ``(M, R, in)`` and weight/bias gradients.
        """
        g = G * self.out_scale
        gW = [None] * len(self.W)
        gb = [None] * len(self.W)
        for l in range(len(self.W) - 1, -1, -1):
            h_in = acts[l]
            if h_in.ndim == 2:
                gW[l] = np.matmul(h_in.T, g)
            else:
                gW[l] = np.matmul(h_in.transpose(0, 2, 1), g)
            gb[l] = g.sum(axis=1)
            g = np.matmul(g, self.W[l].transpose(0, 2, 1))
            if l > 0:
                g = g * (1.0 - h_in * h_in)
        return g / self.in_scale, gW, gb

    def net(self, q: int = 0) -> "DenseNet":
        return DenseNet(self.widths, [w[q].T for w in self.W], [v[q] for v in self.b],
                        self.in_shift, self.in_scale, self.out_scale)

    def copy(self) -> "NetBank":
        return NetBank(self.widths, self.M, W=[w.copy() for w in self.W], b=[v.copy() for v in self.b],
                       in_shift=self.in_shift.copy(), in_scale=self.in_scale.copy(),
                       out_scale=self.out_scale.copy())

    def to_dict(self) -> dict:
        return {
            "widths": self.widths, "M": self.M,
            "params": self.flat().tolist(),
            "in_shift": self.in_shift.tolist(), "in_scale": self.in_scale.tolist(),
            "out_scale": self.out_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetBank":
        bank = cls(d["widths"], d["M"], rng=0, in_shift=d.get("in_shift"),
                   in_scale=d.get("in_scale"), out_scale=d.get("out_scale"))
        bank.set_flat(np.asarray(d["params"]))
        return bank

    @classmethod
    def from_nets(cls, nets: Sequence["DenseNet"]) -> "NetBank":
        first = nets[0]
        return cls(first.widths, len(nets),
                   W=[np.stack([n.weights[l].T for n in nets]) for l in range(len(first.weights))],
                   b=[np.stack([n.biases[l] for n in nets]) for l in range(len(first.biases))],
                   in_shift=first.in_shift, in_scale=first.in_scale, out_scale=first.out_scale)


class DenseNet:
    """A single tanh MLP; ``weights[l]`` has shape ``(out, in)``."""

    def __init__(self, widths, weights=None, biases=None, in_shift=None, in_scale=None,
                 out_scale=None, rng=None):
        self.widths = [int(w) for w in widths]
        if weights is None:
            bank = NetBank(self.widths, 1, rng=rng)
            weights = [w[0].T for w in bank.W]
            biases = [v[0] for v in bank.b]
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(v, dtype=float) for v in biases]
        for l, (w, v) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[l + 1], self.widths[l]) or v.shape != (self.widths[l + 1],):
                raise ValueError(f"layer {l} has shape {w.shape}, expected "
                                 f"{(self.widths[l + 1], self.widths[l])}")
        self.in_shift = np.zeros(self.widths[0]) if in_shift is None else np.asarray(in_shift, float)
        self.in_scale = np.ones(self.widths[0]) if in_scale is None else np.asarray(in_scale, float)
        self.out_scale = np.ones(self.widths[-1]) if out_scale is None else np.asarray(out_scale, float)

    @classmethod
    def zeros(cls, widths) -> "DenseNet":
        widths = [int(w) for w in widths]
        return cls(widths, [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
                   [np.zeros(o) for o in widths[1:]])

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.widths[0]:
            raise ValueError(f"network expects {self.widths[0]} inputs, got {z.shape[-1]}")
        h = (z - self.in_shift) / self.in_scale
        last = len(self.weights) - 1
        for l, (w, v) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + v
            if l < last:
                h = np.tanh(h)
        return h * self.out_scale

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights] + [v for v in self.biases])

    def to_json(self) -> str:
        return json.dumps({"widths": self.widths, "params": self.flat().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "DenseNet":
        d = json.loads(text)
        widths = d["widths"]
        theta = np.asarray(d["params"], dtype=float)
        pos, weights, biases = 0, [], []
        for i, o in zip(widths[:-1], widths[1:]):
            weights.append(theta[pos:pos + i * o].reshape(o, i))
            pos += i * o
        for o in widths[1:]:
            biases.append(theta[pos:pos + o])
            pos += o
        if pos != theta.size:
            raise ValueError("parameter vector length does not match the widths")
        return cls(widths, weights, biases)


def net_forward(net: DenseNet, x, u, t: float) -> np.ndarray:
    """Evaluate a field network on the concatenation ``[x; u; t]``."""
    z = np.concatenate([np.atleast_1d(x), np.atleast_1d(u), [t]]) if np.size(u) else \
        np.concatenate([np.atleast_1d(x), [t]])
    return net(z)


# --------------------------------------------------------------------------
# Known (grey-box) terms


class KnownTerm(Protocol):
    def __call__(self, x: np.ndarray, u: np.ndarray, t: np.ndarray) -> np.ndarray: ...

    def vjp(self, x, u, t, g) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class AffineKnown:
    """Known term ``A x + B u + c`` acting row-wise on batches."""

    A: np.ndarray
    B: np.ndarray | None = None
    c: np.ndarray | None = None

    def __call__(self, x, u, t):
        out = x @ np.asarray(self.A).T
        if self.B is not None and u.shape[-1]:
            out = out + u @ np.asarray(self.B).T
        if self.c is not None:
            out = out + self.c
        return out

    def vjp(self, x, u, t, g):
        gx = g @ np.asarray(self.A)
        gu = g @ np.asarray(self.B) if self.B is not None and u.shape[-1] else np.zeros_like(u)
        return gx, gu


def _fd_known_vjp(term, x, u, t, g, eps=1e-6):
    gx = np.zeros_like(x)
    for j in range(x.shape[1]):
        d = np.zeros_like(x)
        d[:, j] = eps
        gx[:, j] = np.sum((term(x + d, u, t) - term(x - d, u, t)) * g, axis=1) / (2 * eps)
    gu = np.zeros_like(u)
    for j in range(u.shape[1]):
        d = np.zeros_like(u)
        d[:, j] = eps
        gu[:, j] = np.sum((term(x, u + d, t) - term(x, u - d, t)) * g, axis=1) / (2 * eps)
    return gx, gu


# --------------------------------------------------------------------------
# Field blocks


@dataclass
class FieldBlock:
    """A bank of per-mode fields shared by one or more component instances.

    Each instance ``i`` owns state coordinates ``state_idx[i]`` and reads
    input channels ``input_idx[i]``.  The network input is
    ``[x_local; u_local; t]`` (time normalization lives in the bank).
    """

    bank: NetBank
    state_idx: np.ndarray                  # (I, n_local)
    input_idx: np.ndarray                  # (I, m_local)
    known: Sequence[KnownTerm | None] = ()
    use_net: bool = True

    def __post_init__(self):
        self.state_idx = np.atleast_2d(np.asarray(self.state_idx, dtype=int))
        self.input_idx = np.asarray(self.input_idx, dtype=int).reshape(self.state_idx.shape[0], -1)
        n_loc, m_loc = self.state_idx.shape[1], self.input_idx.shape[1]
        if self.bank.n_in != n_loc + m_loc + 1 or self.bank.n_out != n_loc:
            raise ValueError(f"bank widths {self.bank.widths} do not fit {n_loc} states "
                             f"and {m_loc} inputs")
        if not self.known:
            self.known = [None] * self.bank.M

    @property
    def n_instances(self) -> int:
        return self.state_idx.shape[0]

    @property
    def M(self) -> int:
        return self.bank.M

    def gather(self, Z, U, t):
        """Rows ``[x_local; u_local; t]`` ordered instance-major: ``r = i*B + b``."""
        B = Z.shape[0]
        I = self.n_instances
        xs = Z[:, self.state_idx].transpose(1, 0, 2).reshape(I * B, -1)
        us = U[:, self.input_idx].transpose(1, 0, 2).reshape(I * B, -1)
        ts = np.tile(t, I)[:, None]
        return xs, us, ts


def _all_fields(block: FieldBlock, xs, us, ts):
    """Per-mode field values ``(M, R, n_local)`` plus the net cache."""
    R = xs.shape[0]
    if block.use_net:
        out, acts = block.bank.forward_all(np.concatenate([xs, us, ts], axis=1))
    else:
        out, acts = np.zeros((block.M, R, xs.shape[1])), None
    if any(k is not None for k in block.known):
        out = out.copy()
        for q, term in enumerate(block.known):
            if term is not None:
                out[q] += term(xs, us, ts[:, 0])
    return out, acts


# --------------------------------------------------------------------------
# Rollouts


@dataclass
class Rollout:
    times: np.ndarray      # (B, N)
    states: np.ndarray     # (B, N, n)
    modes: np.ndarray      # (N - 1, B, C) mode of each instance during each step


@dataclass
class Tape:
    blocks: list
    steps: np.ndarray       # (K, B)
    times: np.ndarray       # (K, B) step start times
    seg: np.ndarray         # (K, B) input segment index per step
    modes: np.ndarray       # (K, B, C)
    states: np.ndarray      # (K + 1, B, n)
    stage_caches: list      # per step, per stage: list of (xs, us, ts, fields, acts) per block
    n_segments: int
    m: int


@dataclass
class Gradients:
    theta: list             # per block: (M, P)
    x0: np.ndarray          # (B, n)
    phi: np.ndarray         # (B, K_seg * m)
    probs: list             # per block: (B, I, M)


def _input_table(inputs, B: int, m: int):
    """Normalize inputs to ``(segments (B, K, m), segment length)``."""
    if inputs is None:
        return np.zeros((B, 1, m)), np.inf
    if isinstance(inputs, InputParams):
        segs = np.broadcast_to(inputs.segments, (B, inputs.n_segments, inputs.m))
        return np.ascontiguousarray(segs), inputs.segment
    segs, seg_len = inputs
    segs = np.asarray(segs, dtype=float)
    if segs.ndim == 2:
        segs = np.broadcast_to(segs, (B,) + segs.shape)
    return np.ascontiguousarray(segs), float(seg_len)


def _eval_field(blocks, Z, U, t, modes, record):
    """Hard-mode derivative for all blocks; optionally keep caches for VJPs."""
    dZ = np.zeros_like(Z)
    caches = []
    B = Z.shape[0]
    col = 0
    for block in blocks:
        I = block.n_instances
        xs, us, ts = block.gather(Z, U, t)
        fields, acts = _all_fields(block, xs, us, ts)
        sel = modes[:, col:col + I].T.reshape(-1)
        chosen = fields[sel, np.arange(sel.size)]
        dZ[:, block.state_idx] = chosen.reshape(I, B, -1).transpose(1, 0, 2)
        if record:
            caches.append((xs, us, ts, fields, acts))
        col += I
    return dZ, caches


def integrate_diff(blocks, x0, n_steps: int, step, inputs=None, schedule=None, switch=None,
                   t0=0.0, modes0=None, record: bool = True):
    """RK4 rollout of per-mode neural fields with a hard mode per step.

    Parameters
    ----------
    blocks : FieldBlock or list of FieldBlock (a list of DenseNet is wrapped
        as a single-component block)
    x0 : (n,) or (B, n) initial states
    step : scalar, (B,) or (n_steps, B) step sizes; a zero step freezes the
        element (used for padding)
    inputs : InputParams or ``(segments (B, K, m), segment length)``
    schedule : integer modes per step, shape (n_steps,), (n_steps, C) or
        (n_steps, B, C)
    switch : callable ``(k, t_next, Z_next, modes) -> modes`` deciding the
        modes of the next step; used instead of a fixed schedule
    """
    blocks = _as_blocks(blocks, x0)
    Z = np.array(x0, dtype=float, ndmin=2)
    B, n = Z.shape
    C = sum(b.n_instances for b in blocks)
    m_all = max([int(b.input_idx.max()) + 1 for b in blocks if b.input_idx.size] or [0])
    if isinstance(inputs, InputParams):
        m_all = inputs.m
    elif inputs is not None:
        m_all = np.asarray(inputs[0]).shape[-1]
    segs, seg_len = _input_table(inputs, B, m_all)
    Kseg = segs.shape[1]

    steps = np.asarray(step, dtype=float)
    steps = np.broadcast_to(steps if steps.ndim == 2 else steps.reshape(1, -1), (n_steps, B))
    t_start = np.broadcast_to(np.asarray(t0, dtype=float), (B,)).copy()
    starts = t_start[None, :] + np.concatenate([np.zeros((1, B)), np.cumsum(steps, axis=0)[:-1]], axis=0)

    if schedule is not None:
        sched = np.asarray(schedule, dtype=int)
        if sched.ndim == 1:
            sched = sched[:, None]
        if sched.ndim == 2:
            sched = np.broadcast_to(sched[:, None, :], (sched.shape[0], B, sched.shape[1]))
        if sched.shape[0] != n_steps or sched.shape[2] != C:
            raise ValueError(f"schedule shape {sched.shape} does not match {n_steps} steps "
                             f"and {C} component instances")
        modes_cur = sched[0]
    else:
        modes_cur = np.zeros((B, C), dtype=int) if modes0 is None else \
            np.broadcast_to(np.asarray(modes0, dtype=int), (B, C)).copy()

    states = np.empty((n_steps + 1, B, n))
    states[0] = Z
    modes_log = np.empty((n_steps, B, C), dtype=int)
    seg_log = np.empty((n_steps, B), dtype=int)
    caches = [] if record else None
    rows = np.arange(B)

    for k in range(n_steps):
        if schedule is not None:
            modes_cur = sched[k]
        h = steps[k][:, None]
        t = starts[k]
        sk = np.minimum(np.floor(t / seg_len + 1e-9).astype(int), Kseg - 1) if np.isfinite(seg_len) \
            else np.zeros(B, dtype=int)
        U = segs[rows, sk]
        k1, c1 = _eval_field(blocks, Z, U, t, modes_cur, record)
        k2, c2 = _eval_field(blocks, Z + 0.5 * h * k1, U, t + 0.5 * h[:, 0], modes_cur, record)
        k3, c3 = _eval_field(blocks, Z + 0.5 * h * k2, U, t + 0.5 * h[:, 0], modes_cur, record)
        k4, c4 = _eval_field(blocks, Z + h * k3, U, t + h[:, 0], modes_cur, record)
        Z = Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(Z)):
            raise FloatingPointError(f"non-finite state after step {k}")
        states[k + 1] = Z
        modes_log[k] = modes_cur
        seg_log[k] = sk
        if record:
            caches.append((c1, c2, c3, c4))
        if switch is not None and k + 1 < n_steps:
            modes_cur = np.asarray(switch(k, t + steps[k], Z, modes_cur), dtype=int)

    times = np.concatenate([starts, (starts[-1] + steps[-1])[None, :]], axis=0).T if n_steps else \
        t_start[:, None]
    rollout = Rollout(times, states.transpose(1, 0, 2), modes_log)
    if not record:
        return rollout, None
    tape = Tape(blocks, np.asarray(steps), starts, seg_log, modes_log, states, caches, Kseg, m_all)
    return rollout, tape


def _as_blocks(blocks, x0):
    if isinstance(blocks, FieldBlock):
        return [blocks]
    blocks = list(blocks)
    if blocks and isinstance(blocks[0], DenseNet):
        n = np.shape(x0)[-1]
        bank = NetBank.from_nets(blocks)
        m = bank.n_in - n - 1
        return [FieldBlock(bank, np.arange(n)[None, :], np.arange(m)[None, :])]
    return blocks


def _block_vjp(block, cache, Kbar, P, probs_grad, Zbar, Ubar, theta_grad, B):
    xs, us, ts, fields, acts = cache
    I = block.n_instances
    G = Kbar[:, block.state_idx].transpose(1, 0, 2).reshape(I * B, -1)   # (R, n_loc)
    # d/dp_q of p-weighted field: <G, f_q>
    probs_grad += np.einsum("mrk,rk->rm", fields, G).reshape(I, B, -1).transpose(1, 0, 2)
    Gq = P[None, :, :].transpose(2, 1, 0) * G[None, :, :]                 # (M, R, n_loc)
    gin = np.zeros((xs.shape[0], xs.shape[1] + us.shape[1] + 1))
    if block.use_net:
        gX, gW, gb = block.bank.vjp(acts, Gq)
        theta_grad += block.bank.grads_flat(gW, gb)
        gin += gX.sum(axis=0)
    n_loc, m_loc = xs.shape[1], us.shape[1]
    for q, term in enumerate(block.known):
        if term is None:
            continue
        vjp = getattr(term, "vjp", None)
        gx, gu = vjp(xs, us, ts[:, 0], Gq[q]) if vjp else _fd_known_vjp(term, xs, us, ts[:, 0], Gq[q])
        gin[:, :n_loc] += gx
        gin[:, n_loc:n_loc + m_loc] += gu
    gx = gin[:, :n_loc].reshape(I, B, n_loc).transpose(1, 0, 2)
    np.add.at(Zbar, (slice(None), block.state_idx), gx)
    if m_loc:
        gu = gin[:, n_loc:n_loc + m_loc].reshape(I, B, m_loc).transpose(1, 0, 2)
        for i in range(I):
            Ubar[:, block.input_idx[i]] += gu[:, i]


def backward(tape: Tape, dstates: np.ndarray, probs=None) -> Gradients:
    """Reverse sweep through a recorded rollout.

    ``dstates`` is the loss gradient with respect to the sampled states,
    shape ``(B, N, n)`` or ``(N, n)`` for a single rollout.  ``probs`` gives
    per block the mode probabilities of each instance, ``(B, I, M)``; by
    default the recorded hard modes are used as one-hot probabilities.
    """
    K, B = tape.steps.shape
    n = tape.states.shape[2]
    dS = np.asarray(dstates, dtype=float)
    if dS.ndim == 2:
        dS = dS[None]
    if dS.shape != (B, K + 1, n):
        raise ValueError(f"gradient shape {dS.shape} does not match the tape {(B, K + 1, n)}")
    blocks = tape.blocks
    if probs is not None and len(probs) != len(blocks):
        raise ValueError("one probability array per block is required")

    theta = [np.zeros((b.M, b.bank.n_params)) for b in blocks]
    pgrad = [np.zeros((B, b.n_instances, b.M)) for b in blocks]
    phi_bar = np.zeros((B, tape.n_segments, tape.m))
    a = dS[:, K].copy()
    rows = np.arange(B)
    offsets = np.cumsum([0] + [b.n_instances for b in blocks])

    for k in range(K - 1, -1, -1):
        h = tape.steps[k][:, None]
        modes = tape.modes[k]
        P = []
        for j, b in enumerate(blocks):
            if probs is None:
                onehot = np.zeros((B, b.n_instances, b.M))
                sel = modes[:, offsets[j]:offsets[j + 1]]
                np.put_along_axis(onehot, sel[:, :, None], 1.0, axis=2)
                P.append(onehot)
            else:
                P.append(np.asarray(probs[j], dtype=float))
        # (R, M) with rows instance-major
        P_rows = [p.transpose(1, 0, 2).reshape(-1, p.shape[2]) for p in P]

        caches = tape.stage_caches[k]
        kbar = [h / 6.0 * a, h / 3.0 * a, h / 3.0 * a, h / 6.0 * a]
        Ubar = np.zeros((B, tape.m))
        Zbar_total = a.copy()
        coef = [0.5, 0.5, 1.0]
        for stage in (3, 2, 1, 0):
            Zbar = np.zeros((B, n))
            for j, b in enumerate(blocks):
                _block_vjp(b, caches[stage][j], kbar[stage], P_rows[j], pgrad[j], Zbar, Ubar,
                           theta[j], B)
            Zbar_total += Zbar
            if stage > 0:
                kbar[stage - 1] = kbar[stage - 1] + coef[stage - 1] * h * Zbar
        np.add.at(phi_bar, (rows, tape.seg[k]), Ubar)
        a = Zbar_total + dS[:, k]
    return Gradients(theta, a, phi_bar.reshape(B, -1), pgrad)
