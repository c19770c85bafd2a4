"""Two-mode sawtooth used by the surrogate tests."""
from functools import lru_cache

import numpy as np

from hyfal.hybrid import Edge, HybridAutomaton, InputParams, execute
from hyfal.nha import NhaSurrogate, SurrogateLayout, TrainConfig, train

TOP = 3.0


def sawtooth(x0=0.5):
    """x climbs at 1 + u until it reaches TOP, then falls at 1 + u until 0."""
    flows = {"up": lambda x, u, t: np.array([1.0 + u[0]]),
             "down": lambda x, u, t: np.array([-1.0 - u[0]])}
    edges = (Edge("up", "down", [1.0, -TOP]), Edge("down", "up", [-1.0, 0.0]))
    return HybridAutomaton(("up", "down"), flows, edges, "up", [x0], 1)


def sawtooth_runs(rng, count=4, horizon=20.0, zero_input=False, x0=0.5):
    out = []
    for _ in range(count):
        seg = np.zeros((4, 1)) if zero_input else rng.uniform(0, 1, (4, 1))
        p = InputParams(seg, horizon / 4, horizon, [0.0], [1.0])
        out.append(execute(sawtooth(x0), p, 0.05))
    return out


def sawtooth_surrogate(seed, M=3, count=4, **kw):
    lay = SurrogateLayout.single(1, 1, M, 20.0, 5.0, hidden=(16, 16))
    sur = NhaSurrogate(lay, seed=seed, **kw)
    for tr in sawtooth_runs(np.random.default_rng(seed), count):
        sur.add_trajectory(tr)
    return sur


@lru_cache(maxsize=None)
def pruning_run(seed, epochs=300):
    """Train with three latent modes; returns (segments per mode, loss curve)."""
    sur = sawtooth_surrogate(seed)
    rep = train(sur, TrainConfig(epochs=epochs, seed=seed))
    return rep.usage["main"], rep.loss
