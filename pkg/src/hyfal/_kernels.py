"""Compiled rollout of a trained surrogate (hard modes, linear guards).

Used by the falsifier's inner loop, where only input gradients are needed.
All mode networks are packed into zero-padded arrays so that one loop nest
evaluates any of them; padding contributes exact zeros.  Falls back to the
numpy implementation when numba is unavailable.
"""
from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

AVAILABLE = numba is not None


def _jit(f):
    return numba.njit(cache=True)(f) if AVAILABLE else f


@_jit
def _net(Wall, ball, lin, lout, shift, scale, osc, q, z, cur, nxt, acts, out):
    L = Wall.shape[0]
    for i in range(lin[0]):
        cur[i] = (z[i] - shift[q, i]) / scale[q, i]
    for l in range(L):
        for o in range(lout[l]):
            s = ball[l, q, o]
            for i in range(lin[l]):
                s += cur[i] * Wall[l, q, i, o]
            nxt[o] = s
        if l < L - 1:
            for o in range(lout[l]):
                v = np.tanh(nxt[o])
                cur[o] = v
                acts[l, o] = v
        else:
            for o in range(lout[l]):
                out[o] = nxt[o] * osc[q, o]


@_jit
def _field(Z, u, t, mode, Wall, ball, lin, lout, shift, scale, osc, sidx, ns, uidx, nm, moff,
           z, cur, nxt, acts, out, dZ):
    for j in range(dZ.size):
        dZ[j] = 0.0
    for c in range(sidx.shape[0]):
        q = moff[c] + mode[c]
        for j in range(z.size):
            z[j] = 0.0
        for j in range(ns[c]):
            z[j] = Z[sidx[c, j]]
        for j in range(nm[c]):
            z[ns[c] + j] = u[uidx[c, j]]
        z[ns[c] + nm[c]] = t
        _net(Wall, ball, lin, lout, shift, scale, osc, q, z, cur, nxt, acts[c], out)
        for j in range(ns[c]):
            dZ[sidx[c, j]] = out[j]


@_jit
def rollout(X0, U, seg_len, h, n_steps, modes0, Wall, ball, lin, lout, shift, scale, osc,
            sidx, ns, uidx, nm, moff, gsrc, gdst, gW, gcount, gidx, gdim,
            record, states, modes, acts):
    """Batched RK4 rollout; ``acts`` receives hidden activations when recording."""
    B, n = X0.shape
    C = sidx.shape[0]
    K = U.shape[1]
    D = Wall.shape[2]
    z = np.zeros(D)
    cur = np.zeros(D)
    nxt = np.zeros(D)
    out = np.zeros(D)
    k1 = np.zeros(n)
    k2 = np.zeros(n)
    k3 = np.zeros(n)
    k4 = np.zeros(n)
    tmp = np.zeros(n)
    Emax = gsrc.shape[1]
    gprev = np.zeros((C, max(Emax, 1)))
    gnew = np.zeros((C, max(Emax, 1)))
    mode = np.zeros(C, dtype=np.int64)
    for b in range(B):
        Z = X0[b].copy()
        for c in range(C):
            mode[c] = modes0[c]
            for e in range(gcount[c]):
                s = gW[c, e, gdim[c]]
                for j in range(gdim[c]):
                    s += gW[c, e, j] * Z[gidx[c, j]]
                gprev[c, e] = s
        for j in range(n):
            states[b, 0, j] = Z[j]
        t = 0.0
        for k in range(n_steps):
            sk = int(np.floor(t / seg_len + 1e-9))
            if sk > K - 1:
                sk = K - 1
            u = U[b, sk]
            bi = b if record else 0
            ki = k if record else 0
            a1 = acts[bi, ki, 0]
            a2 = acts[bi, ki, 1]
            a3 = acts[bi, ki, 2]
            a4 = acts[bi, ki, 3]
            _field(Z, u, t, mode, Wall, ball, lin, lout, shift, scale, osc, sidx, ns, uidx, nm,
                   moff, z, cur, nxt, a1, out, k1)
            for j in range(n):
                tmp[j] = Z[j] + 0.5 * h * k1[j]
            _field(tmp, u, t + 0.5 * h, mode, Wall, ball, lin, lout, shift, scale, osc, sidx, ns,
                   uidx, nm, moff, z, cur, nxt, a2, out, k2)
            for j in range(n):
                tmp[j] = Z[j] + 0.5 * h * k2[j]
            _field(tmp, u, t + 0.5 * h, mode, Wall, ball, lin, lout, shift, scale, osc, sidx, ns,
                   uidx, nm, moff, z, cur, nxt, a3, out, k3)
            for j in range(n):
                tmp[j] = Z[j] + h * k3[j]
            _field(tmp, u, t + h, mode, Wall, ball, lin, lout, shift, scale, osc, sidx, ns,
                   uidx, nm, moff, z, cur, nxt, a4, out, k4)
            for j in range(n):
                Z[j] = Z[j] + (h / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                states[b, k + 1, j] = Z[j]
            for c in range(C):
                modes[b, k, c] = mode[c]
            t = t + h
            if k + 1 < n_steps:
                for c in range(C):
                    fired = -1
                    for e in range(gcount[c]):
                        s = gW[c, e, gdim[c]]
                        for j in range(gdim[c]):
                            s += gW[c, e, j] * Z[gidx[c, j]]
                        gnew[c, e] = s
                        if fired < 0 and gsrc[c, e] == mode[c] and gprev[c, e] < 0.0 and s >= 0.0:
                            fired = e
                    for e in range(gcount[c]):
                        gprev[c, e] = gnew[c, e]
                    if fired >= 0:
                        mode[c] = gdst[c, fired]


@_jit
def _net_vjp(Wall, lin, lout, scale, osc, q, acts, g_out, g, gn, g_in):
    """Input cotangent of one network given its hidden activations."""
    L = Wall.shape[0]
    for o in range(lout[L - 1]):
        g[o] = g_out[o] * osc[q, o]
    for l in range(L - 1, -1, -1):
        for i in range(lin[l]):
            s = 0.0
            for o in range(lout[l]):
                s += Wall[l, q, i, o] * g[o]
            if l > 0:
                a = acts[l - 1, i]
                s *= 1.0 - a * a
            gn[i] = s
        for i in range(lin[l]):
            g[i] = gn[i]
    for i in range(lin[0]):
        g_in[i] = g[i] / scale[q, i]


@_jit
def _field_vjp(kbar, mode, acts, Wall, lin, lout, scale, osc, sidx, ns, uidx, nm, moff,
               g_out, g, gn, g_in, Zbar, Ubar):
    for c in range(sidx.shape[0]):
        q = moff[c] + mode[c]
        for j in range(g_out.size):
            g_out[j] = 0.0
        for j in range(ns[c]):
            g_out[j] = kbar[sidx[c, j]]
        _net_vjp(Wall, lin, lout, scale, osc, q, acts[c], g_out, g, gn, g_in)
        for j in range(ns[c]):
            Zbar[sidx[c, j]] += g_in[j]
        for j in range(nm[c]):
            Ubar[uidx[c, j]] += g_in[ns[c] + j]


@_jit
def rollout_grad(dS, modes, acts, seg_len, h, K, Wall, lin, lout, scale, osc,
                 sidx, ns, uidx, nm, moff, gx0, gphi):
    """Reverse sweep for one recorded element: gradients w.r.t. x0 and inputs."""
    N1, n = dS.shape
    n_steps = N1 - 1
    D = Wall.shape[2]
    m = gphi.shape[1]
    g_out = np.zeros(D)
    g = np.zeros(D)
    gn = np.zeros(D)
    g_in = np.zeros(D)
    a = dS[n_steps].copy()
    kb = np.zeros((4, n))
    Zbar = np.zeros(n)
    Ubar = np.zeros(m)
    tot = np.zeros(n)
    t_steps = np.zeros(n_steps)
    t = 0.0
    for k in range(n_steps):
        t_steps[k] = t
        t = t + h
    for k in range(n_steps - 1, -1, -1):
        for j in range(n):
            kb[0, j] = h / 6.0 * a[j]
            kb[1, j] = h / 3.0 * a[j]
            kb[2, j] = h / 3.0 * a[j]
            kb[3, j] = h / 6.0 * a[j]
            tot[j] = a[j]
        for j in range(m):
            Ubar[j] = 0.0
        for stage in range(3, -1, -1):
            for j in range(n):
                Zbar[j] = 0.0
            _field_vjp(kb[stage], modes[k], acts[k, stage], Wall, lin, lout, scale, osc,
                       sidx, ns, uidx, nm, moff, g_out, g, gn, g_in, Zbar, Ubar)
            coef = 1.0 if stage == 3 else 0.5
            for j in range(n):
                tot[j] += Zbar[j]
                if stage > 0:
                    kb[stage - 1, j] += coef * h * Zbar[j]
        sk = int(np.floor(t_steps[k] / seg_len + 1e-9))
        if sk > K - 1:
            sk = K - 1
        for j in range(m):
            gphi[sk, j] += Ubar[j]
        for j in range(n):
            a[j] = tot[j] + dS[k, j]
    for j in range(n):
        gx0[j] = a[j]


class Packed:
    """A surrogate's networks and linear guards in padded arrays."""

    def __init__(self, blocks, guards_per_instance, modes0):
        banks = [b.bank for b in blocks]
        depth = {len(b.W) for b in banks}
        if len(depth) != 1:
            raise ValueError("all families need the same number of layers")
        L = depth.pop()
        self.L = L
        lin = np.array([max(b.W[l].shape[1] for b in banks) for l in range(L)], dtype=np.int64)
        lout = np.array([max(b.W[l].shape[2] for b in banks) for l in range(L)], dtype=np.int64)
        D = int(max(lin.max(), lout.max()))
        MT = sum(b.M for b in banks)
        self.Wall = np.zeros((L, MT, D, D))
        self.ball = np.zeros((L, MT, D))
        self.shift = np.zeros((MT, D))
        self.scale = np.ones((MT, D))
        self.osc = np.ones((MT, D))
        off = 0
        offsets = []
        for b in banks:
            for l in range(L):
                _, i, o = b.W[l].shape
                self.Wall[l, off:off + b.M, :i, :o] = b.W[l]
                self.ball[l, off:off + b.M, :o] = b.b[l]
            self.shift[off:off + b.M, :b.n_in] = b.in_shift
            self.scale[off:off + b.M, :b.n_in] = b.in_scale
            self.osc[off:off + b.M, :b.n_out] = b.out_scale
            offsets.append(off)
            off += b.M
        self.lin, self.lout, self.D = lin, lout, D
        rows_s, rows_u, moff = [], [], []
        for blk, o in zip(blocks, offsets):
            for i in range(blk.n_instances):
                rows_s.append(list(blk.state_idx[i]))
                rows_u.append(list(blk.input_idx[i]))
                moff.append(o)
        C = len(rows_s)
        self.C = C
        pad = lambda rows: np.array([r + [0] * (max(map(len, rows), default=0) - len(r)) for r in rows],
                                    dtype=np.int64).reshape(C, -1)
        self.sidx, self.ns = pad(rows_s), np.array([len(r) for r in rows_s], dtype=np.int64)
        self.uidx, self.nm = pad(rows_u), np.array([len(r) for r in rows_u], dtype=np.int64)
        if self.uidx.shape[1] == 0:
            self.uidx = np.zeros((C, 1), dtype=np.int64)
        self.moff = np.array(moff, dtype=np.int64)
        Emax = max([len(g[1]) for g in guards_per_instance if g is not None] or [0])
        gmax = max([len(g[0]) for g in guards_per_instance if g is not None] or [1])
        self.gsrc = np.zeros((C, max(Emax, 1)), dtype=np.int64)
        self.gdst = np.zeros((C, max(Emax, 1)), dtype=np.int64)
        self.gW = np.zeros((C, max(Emax, 1), gmax + 1))
        self.gcount = np.zeros(C, dtype=np.int64)
        self.gidx = np.zeros((C, gmax), dtype=np.int64)
        self.gdim = np.zeros(C, dtype=np.int64)
        for c, g in enumerate(guards_per_instance):
            if g is None:
                continue
            gidx, edges = g
            d = len(gidx)
            self.gidx[c, :d] = gidx
            self.gdim[c] = d
            self.gcount[c] = len(edges)
            for e, edge in enumerate(edges):
                self.gsrc[c, e] = edge.source
                self.gdst[c, e] = edge.target
                self.gW[c, e, :d] = edge.guard.w[:-1]
                self.gW[c, e, d] = edge.guard.w[-1]
        self.modes0 = np.asarray(modes0, dtype=np.int64)

    def nets(self):
        return (self.Wall, self.ball, self.lin, self.lout, self.shift, self.scale, self.osc,
                self.sidx, self.ns, self.uidx, self.nm, self.moff)

    def run(self, X0, U, seg_len, h, n_steps, record=False):
        B, n = X0.shape
        states = np.zeros((B, n_steps + 1, n))
        modes = np.zeros((B, n_steps, self.C), dtype=np.int64)
        shape = (B, n_steps, 4, self.C, max(self.L - 1, 1), self.D) if record else (1, 1, 4, self.C, max(self.L - 1, 1), self.D)
        acts = np.zeros(shape)
        rollout(np.ascontiguousarray(X0, dtype=float), np.ascontiguousarray(U, dtype=float),
                float(seg_len), float(h), int(n_steps), self.modes0, *self.nets(),
                self.gsrc, self.gdst, self.gW, self.gcount, self.gidx, self.gdim,
                record, states, modes, acts)
        return states, modes, acts

    def grad(self, dS, modes, acts, seg_len, h, K, m):
        n = dS.shape[1]
        gx0 = np.zeros(n)
        gphi = np.zeros((K, m))
        rollout_grad(np.ascontiguousarray(dS, dtype=float), modes, acts, float(seg_len), float(h),
                     int(K), self.Wall, self.lin, self.lout, self.scale, self.osc, self.sidx,
                     self.ns, self.uidx, self.nm, self.moff, gx0, gphi)
        return gx0, gphi
