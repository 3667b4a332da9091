# # Lyapunov slack on a small grid world
#
# A 4x4 grid with one obstacle, turned into an exact tabular CMDP. We pick a
# feasible baseline policy, spread the constraint slack over the states it
# visits, build the Lyapunov candidate and check it. Then the exhaustive
# oracle tells us what the best safe policy costs.

import numpy as np

from lyapsafe import cmdp
from lyapsafe.gridworld import GridSpec, generate, render, to_cmdp

spec = GridSpec(width=4, height=4, noise=0.0, obstacles=[(1, 1)])
print(render(spec, generate(spec, 0)))

# %%
# Budget 1 means one obstacle landing per episode is allowed on average.
model = to_cmdp(spec, d0=1.0, gamma=1.0)

# Baseline: go right along the top row, then down the last column. It never
# touches the obstacle, so its constraint value is 0 and the whole budget is slack.
actions = [3 if c < spec.width - 1 else 1 for r in range(spec.height) for c in range(spec.width)]
baseline = cmdp.deterministic_policy(actions, model.n_actions)
print("baseline cost", cmdp.policy_return(baseline, model.c, model),
      "constraint", cmdp.policy_return(baseline, model.d, model))

# %%
eps = cmdp.epsilon_lp_tabular(baseline, model)
L = cmdp.lyapunov_candidate(baseline, eps, model)
print("slack per state\n", eps.reshape(4, 4))
print("L(x0) =", L[model.x0], "<= d0 =", model.d0)
print("Lyapunov check passed:", bool(cmdp.lyapunov_check(L, baseline, model)))

# %%
# The oracle enumerates deterministic policies and keeps the cheapest feasible one.
for d0 in (1.0, 0.0):
    sol = cmdp.exact_cmdp_solve(model.replace(d0=d0))
    print(f"d0={d0}: best cost {sol.cost:.0f}, constraint {sol.constraint:.0f}, "
          f"{sol.n_evaluated} policy classes checked")
