"""Falsify CC1 ("the last two cars never drift more than 40 m apart") on the
chasing cars, logging each real execution, then re-check the counterexample.

Run:  python demos/falsify_cc1.py     (under a minute)
"""
import numpy as np

from hyfal.cli import builtin_spec
from hyfal.falsify import FalsificationProblem, falsify
from hyfal.hybrid import chasing_cars, chasing_cars_inputs, execute
from hyfal.stl import crisp_robustness

spec = builtin_spec("CC1")
problem = FalsificationProblem(chasing_cars(), spec, chasing_cars_inputs(), budget=20, seed=2)
result = falsify(problem, log=print)

print(f"\n{result.status} after {result.executions} of {result.budget} executions")
# CC1 only looks at followers, and inputs reach followers only through mode
# switches, so the smoothed objective is flat in phi almost everywhere. The
# candidate then comes from scoring the random pool, not from L-BFGS steps.
for rec in result.history:
    if rec.source == "surrogate":
        print(f"  execution {rec.execution}: surrogate predicted {rec.surrogate_robustness:.2f}, "
              f"real system gave {rec.robustness:.2f} ({rec.optimizer_iterations} L-BFGS iterations)")

if result.falsified:
    ce = result.counterexample
    # Independent check: rerun the real system on the reported input.
    rho = crisp_robustness(spec, execute(chasing_cars(), chasing_cars_inputs(ce.phi), 0.01).outputs)
    u = ce.phi.reshape(-1, 2)
    print(f"re-verified robustness {rho:.3f}")
    print("throttle per 5 s segment:", np.array2string(u[:, 0], precision=2))
    print("brake    per 5 s segment:", np.array2string(u[:, 1], precision=2))
    result.write_counterexample_csv("cc1_counterexample.csv")
    print("trajectory written to cc1_counterexample.csv")
