# # Train a small agent, evaluate it, look at its attention
#
# Uses the shipped "smoke" config with a few more iterations. Everything is
# written under ./demo_runs; rerunning gives byte-identical metrics.

import csv
from collections import defaultdict

from lyapsafe.harness import emit_plot_data, evaluate, load_config, run_experiment

cfg = load_config("smoke", ["train.iterations=30", "env.width=4", "env.height=4", "env.episode_cap=30"])
root = run_experiment(cfg, out_dir="demo_runs")
seed_dir = root / "seed_0"
print("artifacts:", sorted(p.name for p in seed_dir.iterdir()))

# %%
report = evaluate(seed_dir / "checkpoint", n=20, seed=1)
print(f"mean return {report.mean_return:.1f} +- {report.ci_return:.1f}, "
      f"mean constraint cost {report.mean_constraint:.2f}, safety rate {report.safety_rate:.2f}")

# %%
# Smoothed learning curve, ready for any plotting tool.
plot = emit_plot_data([seed_dir / "metrics.csv"], root / "curve.csv", window=5)
with plot.open() as fh:
    rows = list(csv.DictReader(fh))
for r in rows[::6]:
    print(r["episode"], r["return_ma5"], r["cum_constraint_cost_ma5"])

# %%
# Where does each head look at the last step of the greedy episode?
weights = defaultdict(dict)
with (seed_dir / "attention.csv").open() as fh:
    for r in csv.DictReader(fh):
        weights[(int(r["step"]), int(r["head"]))][int(r["key_step"])] = float(r["weight"])
last = max(step for step, _ in weights)
for head in (0, 1):
    row = weights[(last, head)]
    top = sorted(row.items(), key=lambda kv: -kv[1])[:3]
    print(f"step {last} head {head}: top keys {[(k, round(w, 3)) for k, w in top]}")
