# # Projecting a greedy policy into the safe set
#
# At every state the agent solves a tiny linear program: minimise expected
# cost subject to not exceeding the baseline's constraint value by more than
# a slack eps. The answer mixes at most two actions.

import numpy as np

from lyapsafe.sdqn import epsilon_tilde, q_l_value, safe_policy_lp

q = np.array([4.0, 1.0, 2.5])  # expected cost to go per action
q_d = np.array([0.0, 2.0, 0.5])  # expected constraint cost per action
q_t = np.array([6.0, 4.0, 5.0])  # expected remaining steps per action
baseline = np.array([1.0, 0.0, 0.0])

# %%
# With no slack the greedy action 1 is too risky; as eps grows the projection
# moves mass towards it.
for eps in (0.0, 0.05, 0.2, 1.0):
    ql = q_l_value(q_d, q_t, eps)
    pi = safe_policy_lp(q, ql, baseline, eps)
    print(f"eps={eps:<5} pi={np.round(pi, 3)} expected cost {pi @ q:.3f}")

# %%
# The slack the agent actually uses comes from the budget left at the start state,
# shared over the expected number of remaining steps.
for d0 in (0.0, 1.0, 5.0):
    print(f"d0={d0}: eps_tilde = {epsilon_tilde(baseline, q_d, q_t, d0):.4f}")
