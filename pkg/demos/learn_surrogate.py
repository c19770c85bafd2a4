"""Learn a neural hybrid automaton of the chasing cars from a few runs, then
compare its free-running prediction with the real system.

Run:  python demos/learn_surrogate.py     (about a minute)
"""
import numpy as np

from hyfal.hybrid import chasing_cars, chasing_cars_inputs, execute
from hyfal.nha import NhaSurrogate, TrainConfig, chasing_cars_layout, fit_guards, train

rng = np.random.default_rng(0)
system, template = chasing_cars(), chasing_cars_inputs()

# Leader: one mode.  Followers: one shared family with three latent modes.
sur = NhaSurrogate(chasing_cars_layout(M=3), seed=0, buffer_size=5)
for _ in range(4):
    sur.add_trajectory(execute(system, template.sample(rng), 0.01))
print(f"buffer: {len(sur.buffer)} trajectories, {len(sur.segments('follower'))} follower segments")

report = train(sur, TrainConfig(epochs=150, seed=0))
print(f"training loss {report.loss[0]:.4g} -> {report.loss[-1]:.4g} over {report.epochs} epochs")
print(f"follower segments per latent mode: {report.usage['follower']}")

# Guard features are (y of the car ahead, own y, own v, 1).
failures = fit_guards(sur)
for edge in sur.guards["follower"]:
    w = edge.guard.w
    print(f"  guard {edge.source} -> {edge.target}: {edge.guard.kind}, "
          f"coefficients {np.array2string(w, precision=3, suppress_small=True)}")
if any(failures.values()):
    print(f"  unfitted mode pairs: {failures}")

# Free-running rollouts: the surrogate picks its own modes through the learned
# guards, so a missed or extra switch shows up as a growing position error.
# The falsifier tolerates this because every candidate is re-run on the real
# system before it counts.
def position_error(phi):
    truth = execute(system, template.with_phi(phi), 0.25).states[:, 0::2]
    pred = sur.rollout(phi[None], step=0.25)[0][0][:, 0::2]
    return np.abs(pred - truth).max(axis=0)


print(f"\ninitial latent modes: {sur.initial_modes}")
print("max |position error| per car (m):")
print("  training input  ", np.array2string(position_error(sur.buffer[-1].rec.phi), precision=1))
print("  held-out input  ", np.array2string(position_error(template.sample(rng).phi), precision=1))
