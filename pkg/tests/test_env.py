"""Skirmish dynamics, observations and the scripted expert."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masd import env as E


def make_state(cfg, agents, enemies, agent_health=None, enemy_health=None, t=0):
    agents = np.array(agents, dtype=np.int64).reshape(-1, 2)
    enemies = np.array(enemies, dtype=np.int64).reshape(-1, 2)
    ah = np.full(len(agents), E.AGENT_HEALTH) if agent_health is None else np.array(agent_health)
    eh = np.full(len(enemies), cfg.enemy_health) if enemy_health is None else np.array(enemy_health)
    return E.EnvState(cfg, agents, ah.astype(np.int64), enemies, eh.astype(np.int64), t)


def observe_oracle(state):
    """Slot-by-slot recomputation of the observation layout."""
    cfg = state.config
    n, r = cfg.n_agents, cfg.view_radius
    out = np.zeros((n, E.OBS_DIM))
    living_allies = [i for i in range(n) if state.agent_health[i] > 0]
    living_enemies = [j for j in range(cfg.n_enemies) if state.enemy_health[j] > 0]
    for i in range(n):
        if state.agent_health[i] <= 0:
            continue
        x, y = state.agent_pos[i]
        out[i, 0] = x / (cfg.grid_width - 1)
        out[i, 1] = y / (cfg.grid_height - 1)
        out[i, 2] = 1.0
        groups = (
            ([a for a in living_allies if a != i], state.agent_pos, state.agent_health, E.AGENT_HEALTH, 3),
            (living_enemies, state.enemy_pos, state.enemy_health, cfg.enemy_health, 3 + E.SLOT * E.N_MAX),
        )
        for units, pos, health, full, base in groups:
            for slot, u in enumerate(units):
                dx, dy = pos[u][0] - x, pos[u][1] - y
                if max(abs(dx), abs(dy)) <= r:
                    o = base + E.SLOT * slot
                    out[i, o:o + 4] = [dx / r, dy / r, health[u] / full, 1.0]
    return out


def test_reset_is_deterministic():
    cfg = E.get_task("g5")
    s1, o1 = E.reset(cfg, 42)
    s2, o2 = E.reset(cfg, 42)
    np.testing.assert_array_equal(s1.agent_pos, s2.agent_pos)
    np.testing.assert_array_equal(s1.enemy_pos, s2.enemy_pos)
    np.testing.assert_array_equal(o1, o2)


def test_one_versus_one_on_small_grid():
    cfg = E.TaskConfig("tiny", 4, 4, 1, 1, 3, 3, 10)
    state, obs = E.reset(cfg, 0)
    assert state.agent_alive.all() and state.enemy_alive.all()
    assert tuple(state.agent_pos[0]) != tuple(state.enemy_pos[0])
    assert obs.shape == (1, E.OBS_DIM)


def test_resets_stay_in_their_thirds():
    cfg = E.TaskConfig("t8", 8, 8, 3, 3, 3, 5, 40)
    third = 8 // 3
    for seed in range(1000):
        state, _ = E.reset(cfg, seed)
        cells = [tuple(p) for p in state.agent_pos] + [tuple(p) for p in state.enemy_pos]
        assert len(set(cells)) == 6
        assert (state.agent_pos[:, 0] < third).all()
        assert (state.enemy_pos[:, 0] >= 8 - third).all()
        assert ((state.agent_pos >= 0) & (state.agent_pos < 8)).all()
        assert ((state.enemy_pos >= 0) & (state.enemy_pos < 8)).all()


def test_staying_far_from_enemies_gives_nothing():
    cfg = E.get_task("g3")
    state, _ = E.reset(cfg, 0)
    r, nxt, _, done = E.step(state, [E.STAY] * 3)
    assert r == 0.0 and not done and nxt.t == 1


def test_two_attacks_kill_a_health_two_enemy():
    cfg = E.TaskConfig("duel", 6, 6, 1, 1, 2, 3, 20)
    state = make_state(cfg, [[2, 2]], [[3, 2]])
    r1, state, _, done1 = E.step(state, [E.ATTACK])
    assert (r1, done1) == (1.0, False)
    assert state.agent_health[0] == E.AGENT_HEALTH - 1  # the damaged survivor hits back
    r2, state, _, done2 = E.step(state, [E.ATTACK])
    assert done2 and state.won
    assert r1 + r2 == 2.0 + cfg.win_bonus
    assert state.agent_health[0] == E.AGENT_HEALTH - 1  # a dead enemy does not retaliate


def test_sparse_win_pays_exactly_once():
    cfg = E.get_task("g3", sparse=True)
    assert cfg.win_bonus == 20.0
    state, obs = E.reset(cfg, 5)
    rewards, done = [], False
    while not done:
        r, state, obs, done = E.step(state, E.scripted_expert(state, obs))
        rewards.append(r)
    assert state.won
    nonzero = [r for r in rewards if r != 0.0]
    assert nonzero == [20.0]
    assert rewards[-1] == 20.0


def test_collisions_lowest_index_moves_first():
    cfg = E.TaskConfig("c", 6, 6, 2, 1, 3, 3, 20)
    state = make_state(cfg, [[0, 1], [1, 0]], [[5, 5]])
    _, nxt, _, _ = E.step(state, [E.RIGHT, E.DOWN])  # both target (1, 1)
    assert tuple(nxt.agent_pos[0]) == (1, 1)
    assert tuple(nxt.agent_pos[1]) == (1, 0)


def test_invalid_actions_are_rejected():
    cfg = E.get_task("g3")
    state, _ = E.reset(cfg, 0)
    with pytest.raises(E.ActionError):
        E.step(state, [0, 0])
    with pytest.raises(E.ActionError):
        E.step(state, [0, 0, 6])
    dead = state.copy()
    dead.agent_health[1] = 0
    with pytest.raises(E.ActionError):
        E.step(dead, [0, E.UP, 0])


def test_episode_ends_at_step_limit():
    cfg = E.TaskConfig("short", 10, 10, 1, 1, 3, 5, 3)
    state, _ = E.reset(cfg, 0)
    done = False
    while not done:
        _, state, _, done = E.step(state, [E.STAY])
    assert state.t == 3
    with pytest.raises(E.ActionError):
        E.step(state, [E.STAY])


def test_config_validation():
    with pytest.raises(E.ConfigError):
        E.get_task("g99")
    with pytest.raises(E.ConfigError):
        E.TaskConfig("bad", 10, 10, 11, 1).validate()
    with pytest.raises(E.ConfigError):
        E.TaskConfig("bad", 10, 10, 3, 3, reward_mode="other").validate()


@given(seed=st.integers(0, 10_000), steps=st.integers(0, 25), task=st.sampled_from(["g3", "g5", "g7", "g5v7"]),
       noise=st.floats(0.0, 1.0))
@settings(max_examples=60, deadline=None)
def test_observations_match_slot_oracle(seed, steps, task, noise):
    cfg = E.get_task(task)
    rng = np.random.default_rng(seed)
    state, obs = E.reset(cfg, seed)
    for _ in range(steps):
        if state.done:
            break
        _, state, obs, _ = E.step(state, E.scripted_expert(state, obs, noise, rng))
    np.testing.assert_array_equal(obs, observe_oracle(state))
    assert obs.shape == (cfg.n_agents, E.OBS_DIM)


def test_first_enemy_slot_tracks_focus_target():
    cfg = E.TaskConfig("slots", 10, 10, 1, 3, 1, 9, 20)
    state = make_state(cfg, [[0, 0]], [[7, 0], [8, 0], [9, 0]], enemy_health=[0, 1, 1])
    obs = E.observe(state)
    base = 3 + E.SLOT * E.N_MAX
    np.testing.assert_allclose(obs[0, base:base + 4], [8 / 9, 0.0, 1.0, 1.0])
    np.testing.assert_allclose(obs[0, base + 8:base + 12], 0.0)


def test_global_state_layout():
    cfg = E.get_task("g3")
    state, _ = E.reset(cfg, 1)
    s = E.global_state(state)
    assert s.shape == (E.STATE_DIM,)
    assert s[3] == 1.0 and s[4 * 3 + 3] == 0.0
    assert s[-1] == 0.0


# ---------------------------------------------------------------- expert

def test_expert_attacks_adjacent_enemy():
    cfg = E.TaskConfig("adj", 6, 6, 1, 1, 3, 3, 20)
    state = make_state(cfg, [[2, 2]], [[3, 3]])
    assert E.scripted_expert(state)[0] == E.ATTACK


def test_expert_wins_three_versus_one_tank():
    cfg = E.TaskConfig("tank", 8, 8, 3, 1, 6, 5, 40)
    for seed in range(100):
        state, obs = E.reset(cfg, seed)
        done = False
        while not done:
            _, state, obs, done = E.step(state, E.scripted_expert(state, obs))
        assert state.won, f"seed {seed}"


def test_full_noise_makes_actions_uniform():
    cfg = E.get_task("g10")
    state, _ = E.reset(cfg, 0)
    rng = np.random.default_rng(0)
    counts = np.zeros(E.N_ACTIONS)
    for _ in range(10_000):
        counts += np.bincount(E.scripted_expert(state, None, 1.0, rng), minlength=E.N_ACTIONS)
    freq = counts / counts.sum()
    assert counts.sum() == 100_000
    np.testing.assert_allclose(freq, 1 / 6, atol=0.02)


def test_noise_requires_generator():
    state, _ = E.reset(E.get_task("g3"), 0)
    with pytest.raises(ValueError):
        E.scripted_expert(state, None, 0.5)


def test_wrapper_matches_functional_api():
    cfg = E.get_task("g3")
    env = E.SkirmishEnv(cfg)
    obs = env.reset(3)
    state, obs2 = E.reset(cfg, 3)
    np.testing.assert_array_equal(obs, obs2)
    r, o, d = env.step(E.scripted_expert(env.state))
    r2, state, o2, d2 = E.step(state, E.scripted_expert(state))
    assert (r, d) == (r2, d2)
    np.testing.assert_array_equal(o, o2)
    np.testing.assert_array_equal(env.global_state(), E.global_state(state))
