import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lyapsafe import cmdp
from lyapsafe import gridworld as gw
from lyapsafe.errors import GenerationError, ParameterError, SizeError, UnsupportedError, UsageError
from lyapsafe.gridworld import GridSpec, GridWorld
from lyapsafe.nn.rng import RngStream


def binomial_band(n, p, level=0.99):
    """Exact two-sided acceptance band for a Binomial(n, p) count."""
    lo = stats.binom.ppf((1 - level) / 2, n, p)
    hi = stats.binom.isf((1 - level) / 2, n, p)
    return lo, hi


# -- generation ---------------------------------------------------------------------------------
def test_zero_density_has_no_obstacles():
    st0 = gw.generate(GridSpec(width=10, height=10, density=0.0), 3)
    assert len(st0.static) == 0


def test_density_count_rule():
    spec = GridSpec(width=10, height=10, density=0.3)
    assert spec.obstacle_count() == 29
    state = gw.generate(spec, 0)
    assert len(state.static) == 29
    assert spec.start not in state.static and spec.goal not in state.static


def test_density_rounds_half_up():
    # 3.5 -> 4 and 2.5 -> 3; round-half-even would give 2 for the second
    assert GridSpec(width=3, height=3, density=0.5).obstacle_count() == 4
    assert GridSpec(width=7, height=1, start=(0, 0), goal=(0, 6), density=0.5).obstacle_count() == 3


def test_generation_deterministic_per_seed():
    spec = GridSpec(width=8, height=8, density=0.3)
    assert gw.generate(spec, 7).static == gw.generate(spec, 7).static
    assert gw.generate(spec, 7).static != gw.generate(spec, 8).static


def test_generation_error_when_no_room():
    spec = GridSpec(width=3, height=3, density=0.0, dynamic=True, n_dynamic=8)
    with pytest.raises(GenerationError):
        gw.generate(spec, 0)


def test_spec_validation():
    with pytest.raises(ParameterError):
        GridSpec(start=(0, 0), goal=(0, 0))
    with pytest.raises(ParameterError):
        GridSpec(noise=1.0)
    with pytest.raises(ParameterError):
        GridSpec(obstacles=((0, 0),))
    with pytest.raises(ParameterError):
        GridSpec(obs_mode="rgb")


# -- step semantics -----------------------------------------------------------------------------
def det_spec(**kw):
    base = dict(width=4, height=4, noise=0.0, obstacles=((1, 1),))
    base.update(kw)
    return GridSpec(**base)


def test_free_move_costs_one():
    env = GridWorld(det_spec(), 0)
    env.reset()
    res = env.step(3)
    assert env.state.agent == (0, 1)
    assert (res.cost, res.constraint_cost, res.terminal, res.reward_event) == (1.0, 0.0, False, False)


def test_obstacle_landing_costs_constraint():
    env = GridWorld(det_spec(), 0)
    env.reset()
    env.step(3)
    res = env.step(1)
    assert env.state.agent == (1, 1) and res.constraint_cost == 1.0 and res.cost == 1.0
    # passing through is allowed
    res = env.step(1)
    assert env.state.agent == (2, 1) and res.constraint_cost == 0.0


def test_goal_reached():
    env = GridWorld(det_spec(start=(3, 2)), 0)
    env.reset()
    res = env.step(3)
    assert res.terminal and res.reward_event and not res.truncated
    assert res.cost == 1.0 - 1000.0
    with pytest.raises(UsageError):
        env.step(0)


def test_off_grid_clamps_and_stay():
    env = GridWorld(det_spec(), 0)
    env.reset()
    assert env.step(0).cost == 1.0 and env.state.agent == (0, 0)
    assert env.step(2).cost == 1.0 and env.state.agent == (0, 0)
    env.step(4)
    assert env.state.agent == (0, 0)


def test_episode_cap_truncates():
    env = GridWorld(det_spec(episode_cap=5), 0)
    env.reset()
    results = [env.step(4) for _ in range(5)]
    assert [r.terminal for r in results] == [False] * 4 + [True]
    assert results[-1].truncated and not results[-1].reward_event
    total = sum(r.cost for r in results)
    assert -total == -5.0


def test_noise_frequency_in_binomial_band():
    spec = GridSpec(width=6, height=6, noise=0.05, episode_cap=10**6)
    env = GridWorld(spec, 11)
    env.reset()
    n = 100_000
    differ = flagged = 0
    for _ in range(n):
        res = env.step(4)
        flagged += res.noise
        differ += res.applied_action != 4
        if res.terminal:
            env.reset()
    lo, hi = binomial_band(n, 0.05)
    assert lo <= flagged <= hi
    # commanded "stay" differs whenever noise fires
    assert lo <= differ <= hi


def test_noise_differs_rate_for_moves():
    spec = GridSpec(width=6, height=6, noise=0.05, episode_cap=10**6)
    env = GridWorld(spec, 12)
    env.reset()
    n = 100_000
    differ = 0
    for i in range(n):
        a = i % 4
        res = env.step(a)
        differ += res.applied_action != a
        if res.terminal:
            env.reset()
    lo, hi = binomial_band(n, 0.05 * 3 / 4)
    assert lo <= differ <= hi


def test_trajectory_determinism():
    spec = GridSpec(width=8, height=8, density=0.2, noise=0.1, dynamic=True, n_dynamic=4, obs_mode="partial")
    actions = np.random.default_rng(5).integers(0, 5, size=200)

    def run():
        env = GridWorld(spec, 21)
        env.reset()
        out = []
        for a in actions:
            r = env.step(int(a))
            out.append((env.state.agent, tuple(env.state.moving), r.cost, r.constraint_cost, r.observation.tobytes()))
            if r.terminal:
                env.reset()
        return out

    assert run() == run()


def test_conservation():
    spec = GridSpec(width=8, height=8, density=0.2, dynamic=True, n_dynamic=5, obs_mode="image")
    env = GridWorld(spec, 4)
    obs = env.reset()
    n_obst = len(env.state.obstacle_cells())
    for a in np.random.default_rng(0).integers(0, 5, size=300):
        r = env.step(int(a))
        assert r.observation[0].sum() == 1.0
        assert len(env.state.moving) == 5 and len(env.state.static) == len(env.initial.static)
        if r.terminal:
            obs = env.reset()
    assert obs[0].sum() == 1.0 and n_obst <= 5 + len(env.initial.static)


# -- moving obstacles ---------------------------------------------------------------------------
def test_paper_dynamic_setting_generates():
    spec = GridSpec(width=16, height=16, dynamic=True, n_dynamic=8, obs_mode="partial")
    assert len(gw.generate(spec, 0).moving) == 8


def test_interior_obstacle_moves_uniformly():
    spec = GridSpec(width=5, height=5, dynamic=True, dynamic_start=((2, 2),))
    state = gw.generate(spec, 0)
    rng = RngStream(3, "test")
    counts = {}
    for _ in range(100_000):
        cell = gw.move_obstacles(state, spec, rng).moving[0]
        counts[cell] = counts.get(cell, 0) + 1
    assert set(counts) == {(1, 2), (3, 2), (2, 1), (2, 3)}
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_corner_obstacle_support():
    spec = GridSpec(width=5, height=5, dynamic=True, dynamic_start=((0, 4),))
    state = gw.generate(spec, 0)
    rng = RngStream(4, "test")
    seen = {gw.move_obstacles(state, spec, rng).moving[0] for _ in range(500)}
    assert seen == {(1, 4), (0, 3)}


def test_end_of_step_colocation_counts_as_hit():
    # obstacle at (0,2) in a 1x3 corridor must move to (0,1), where the agent stays
    spec = GridSpec(width=3, height=1, start=(0, 1), goal=(0, 0), noise=0.0, dynamic=True, dynamic_start=((0, 2),))
    env = GridWorld(spec, 0)
    env.reset()
    res = env.step(4)
    assert env.state.moving == [(0, 1)] and res.constraint_cost == 1.0


def test_move_obstacles_requires_dynamic():
    spec = GridSpec()
    with pytest.raises(UsageError):
        gw.move_obstacles(gw.generate(spec, 0), spec, RngStream(0))


# -- observations -------------------------------------------------------------------------------
def test_discrete_one_hot():
    spec = GridSpec(start=(1, 1))
    obs = gw.observe(gw.generate(spec, 0), spec)
    assert obs.shape == (16,) and obs[5] == 1.0 and obs.sum() == 1.0


def test_image_channels():
    spec = GridSpec(width=5, height=4, obstacles=((1, 2), (3, 0)), obs_mode="image")
    obs = gw.observe(gw.generate(spec, 0), spec)
    assert obs.shape == (3, 4, 5)
    assert obs[0].sum() == 1.0 and obs[0, 0, 0] == 1.0
    assert obs[1, 1, 2] == 1.0 and obs[1, 3, 0] == 1.0 and obs[1].sum() == 2.0
    assert obs[2, 3, 4] == 1.0 and obs[2].sum() == 1.0
    assert set(np.unique(obs)) <= {0.0, 1.0}


def test_partial_window_at_corner_zero_outside():
    spec = GridSpec(width=6, height=6, obs_mode="partial", obstacles=((2, 0), (3, 1)))
    state = gw.generate(spec, 0)
    obs = gw.observe(state, spec)
    assert obs.shape == (3, 8, 5)
    # facing down from (0,0): columns -2 and -1 and rows 6, 7 fall outside the grid
    assert np.all(obs[:, :, :2] == 0) and np.all(obs[:, 6:, :] == 0)
    assert obs[0, 0, 2] == 1.0
    assert obs[1, 2, 2] == 1.0 and obs[1, 3, 3] == 1.0


def test_partial_window_rotates_with_heading():
    spec = GridSpec(width=9, height=9, start=(4, 4), noise=0.0, obs_mode="partial", window=(3, 3), obstacles=((4, 6),))
    env = GridWorld(spec, 0)
    env.reset()
    env.step(4)
    assert env.observe()[1].sum() == 0  # facing down by default; obstacle is to the right
    env.step(3)  # now at (4,5) facing right: obstacle one cell ahead, centred
    obs = env.observe()
    assert obs[1, 1, 1] == 1.0 and obs[1].sum() == 1.0


# -- tabular model ------------------------------------------------------------------------------
def test_to_cmdp_deterministic_rows_are_one_hot():
    m = gw.to_cmdp(det_spec(), d0=0.0)
    live = [x for x in range(16) if x not in m.terminals]
    assert np.all(np.isin(m.P[live], [0.0, 1.0]))


def test_to_cmdp_noise_row_masses():
    spec = GridSpec(width=5, height=5, noise=0.05)
    m = gw.to_cmdp(spec, d0=1.0)
    x = spec.index((2, 2))
    row = m.P[x, 4]  # stay: 0.95 on self, 0.0125 on each neighbour
    assert row[x] == pytest.approx(0.95)
    for nb in gw.legal_neighbours(spec, (2, 2)):
        assert row[spec.index(nb)] == pytest.approx(0.0125)
    right = m.P[x, 3]
    assert right[spec.index((2, 3))] == pytest.approx(0.95 + 0.0125)
    # corner, moving up: clamping folds the off-grid outcomes back onto the cell
    corner = m.P[0, 0]
    assert corner[0] == pytest.approx(0.95 + 0.025)
    # cross-check a kernel row against 10^6 simulated landings
    env = GridWorld(GridSpec(width=5, height=5, noise=0.05, start=(2, 2), episode_cap=10**7), 9)
    counts = np.zeros(25)
    rng = env.rng
    state = env.initial
    for _ in range(1_000_000):
        nxt, _ = gw.step(state, 3, env.spec, rng)
        counts[spec.index(nxt.agent)] += 1
    se = np.sqrt(right * (1 - right) / 1e6)
    assert np.all(np.abs(counts / 1e6 - right) <= 4 * se + 1e-12)


def test_to_cmdp_errors():
    with pytest.raises(UnsupportedError):
        gw.to_cmdp(GridSpec(dynamic=True, n_dynamic=1), 1.0)
    with pytest.raises(SizeError):
        gw.to_cmdp(GridSpec(width=11, height=10), 1.0)


def simulate_policy(spec, policy, episodes, seed, map_seed=0):
    env = GridWorld(spec, map_seed, rng=RngStream(seed, "sim"))
    rng = np.random.default_rng(seed)
    cum = np.cumsum(policy, axis=1)
    costs, hits = np.zeros(episodes), np.zeros(episodes)
    for e in range(episodes):
        env.reset()
        while True:
            x = spec.index(env.state.agent)
            a = int((rng.random() > cum[x]).sum())
            r = env.step(min(a, 4))
            costs[e] += r.cost
            hits[e] += r.constraint_cost
            if r.terminal:
                break
    return costs, hits


def test_simulation_matches_tabular_returns():
    spec = GridSpec(width=4, height=4, density=0.25, noise=0.05, episode_cap=100_000)
    m = gw.to_cmdp(spec, d0=1.0, gamma=1.0, seed=0)
    # fixed stochastic policy biased toward the goal
    policy = np.tile([0.1, 0.35, 0.1, 0.35, 0.1], (16, 1))
    C = cmdp.policy_return(policy, m.c, m)
    D = cmdp.policy_return(policy, m.d, m)
    costs, hits = simulate_policy(spec, policy, 4000, 2)
    assert abs(costs.mean() - C) <= 3 * costs.std(ddof=1) / math.sqrt(len(costs))
    assert abs(hits.mean() - D) <= 3 * hits.std(ddof=1) / math.sqrt(len(hits))


def test_shortest_path():
    assert gw.shortest_path_length(GridSpec(width=5, height=5)) == 8
    spec = det_spec()
    assert gw.shortest_path_length(spec, avoid=frozenset(spec.obstacles)) == 6


# -- map files ----------------------------------------------------------------------------------
@settings(max_examples=30, deadline=None)
@given(
    st.integers(2, 9), st.integers(2, 9), st.floats(0, 0.6), st.integers(0, 1000),
    st.sampled_from(gw.OBS_MODES), st.booleans(),
)
def test_map_round_trip(w, h, rho, seed, mode, dynamic):
    spec = GridSpec(width=w, height=h, density=rho, noise=0.05, obs_mode=mode, dynamic=dynamic,
                    n_dynamic=1 if dynamic and w * h > 3 else 0)
    try:
        state = gw.generate(spec, seed)
    except GenerationError:
        return
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "map.txt"
        gw.save_map(spec, state, path)
        spec2, state2 = gw.load_map(path)
        gw.save_map(spec2, state2, Path(tmp) / "again.txt")
        assert path.read_text() == (Path(tmp) / "again.txt").read_text()
    assert state2.static == state.static and state2.moving == state.moving
    assert (spec2.width, spec2.height, spec2.noise, spec2.obs_mode, spec2.density) == (w, h, spec.noise, mode, spec.density)
