"""Simulate the chasing-cars system under one random input and check every
built-in requirement against the resulting trajectory.

Run:  python demos/monitor_requirements.py
"""
import numpy as np

from hyfal.cli import BUILTIN_SPECS, builtin_spec
from hyfal.hybrid import chasing_cars, chasing_cars_inputs, execute
from hyfal.stl import crisp_robustness, smooth_robustness

system = chasing_cars()
phi = chasing_cars_inputs().sample(np.random.default_rng(3))
traj = execute(system, phi, step=0.01)

print(f"simulated {traj.times[-1]:.0f} s in {traj.times.size} samples, {len(traj.events)} mode switches")
for ev in traj.events[:5]:
    k = int(ev.label[3:]) - 2
    print(f"  t = {ev.time:7.3f} s  {ev.label}: {ev.source[k]} -> {ev.target[k]}")
if len(traj.events) > 5:
    print("  ...")

# The crisp value decides satisfaction. The smoothed one (s = 2) is what the
# optimizer differentiates, and it can even disagree in sign (see CC3).
print(f"\n{'req':5} {'crisp':>10} {'smooth':>10}  formula")
for name, text in BUILTIN_SPECS.items():
    f = builtin_spec(name)
    rho = crisp_robustness(f, traj.outputs)
    soft = smooth_robustness(f, traj.outputs, p=2.0).value
    verdict = "violated" if rho < 0 else "satisfied"
    print(f"{name:5} {rho:10.3f} {soft:10.3f}  {text}  [{verdict}]")
