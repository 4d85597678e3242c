"""Partitions, the autoregressive grouping policy and its PPO training."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masd import env as E
from masd.dataset import collect_episodes, sample_minibatch, segment
from masd.discovery import restrict
from masd.grouper import (
    HISTORY_DIM, Grouper, GrouperConfig, PartitionError, RunningNorm, choose_groups, init_grouper_params, partition_of,
    rollout_groups, singletons, validate_partition,
)
from masd.seeding import stream

PLANTED = ((0, 1), (2,))


def uniform_actor(seed=0):
    actor, _ = init_grouper_params(np.random.default_rng(seed), GrouperConfig())
    last = max(k for k in actor if k.startswith("grouper/pi/W"))
    return actor.replace({last: np.zeros_like(actor[last]), last.replace("W", "b"): np.zeros(E.N_MAX)})


def test_partition_from_group_ids():
    assert partition_of([0, 0, 1]) == ((0, 1), (2,))
    assert partition_of([2, 1, 0]) == ((0,), (1,), (2,))
    assert partition_of([4, 1, 4, 1, 0]) == ((0, 2), (1, 3), (4,))
    with pytest.raises(PartitionError):
        partition_of([0, 3, 0])


@given(st.lists(st.integers(0, 5), min_size=6, max_size=6))
@settings(max_examples=300, deadline=None)
def test_partition_invariants_and_relabeling(ids):
    part = partition_of(ids)
    validate_partition(part, 6)
    rebuilt = [None] * 6
    for g, sub in enumerate(part):
        for i in sub:
            rebuilt[i] = g
    mapping = {}
    for a, b in zip(ids, rebuilt):
        assert mapping.setdefault(a, b) == b  # a consistent relabeling of the ids
    assert len(set(mapping.values())) == len(mapping)


def test_validate_partition_rejects_bad_covers():
    validate_partition(((0, 2), (1,)), 3)
    for bad in (((0, 1),), ((0, 1), (1, 2)), ((1,), (0,)), ((2, 0), (1,)), ((0,), ()), ((0,), (1,), (3,))):
        with pytest.raises(PartitionError):
            validate_partition(bad, 3)


def test_single_agent_always_alone():
    actor, _ = init_grouper_params(np.random.default_rng(0), GrouperConfig())
    for seed in range(20):
        g = choose_groups(actor, np.zeros(E.STATE_DIM), rng=np.random.default_rng(seed), n_agents=1)
        assert g.tolist() == [0]


def test_uniform_logits_greedy_puts_everyone_together():
    actor = uniform_actor()
    for n in (2, 5, 10):
        g = choose_groups(actor, np.random.default_rng(n).normal(size=E.STATE_DIM), greedy=True, n_agents=n)
        assert g.tolist() == [0] * n
        assert partition_of(g) == (tuple(range(n)),)


def test_sampling_is_seeded():
    actor, _ = init_grouper_params(np.random.default_rng(1), GrouperConfig(mode="obs"))
    obs = np.random.default_rng(2).normal(size=(6, E.OBS_DIM))
    a = choose_groups(actor, obs, mode="obs", rng=np.random.default_rng(3))
    b = choose_groups(actor, obs, mode="obs", rng=np.random.default_rng(3))
    assert a.tolist() == b.tolist()
    with pytest.raises(ValueError):
        choose_groups(actor, obs, mode="obs")


def test_random_grouper_outputs_are_valid_partitions():
    rng = np.random.default_rng(4)
    actor = uniform_actor()
    contexts = [np.zeros((n, E.STATE_DIM)) for n in rng.integers(1, 11, size=10_000)]
    ro = rollout_groups(actor, contexts, [c[0] for c in contexts], rng)
    for c, g in zip(contexts, ro.groups):
        assert len(g) == len(c) and (g >= 0).all() and (g < len(c)).all()
        validate_partition(partition_of(g), len(c))


def history_row(choices, i):
    row = np.zeros(HISTORY_DIM + E.N_MAX)
    for j, g in enumerate(choices[:i]):
        row[j * E.N_MAX + g] = 1.0
    row[HISTORY_DIM + i] = 1.0
    return row


def test_rollout_inputs_match_loop_oracle():
    rng = np.random.default_rng(6)
    actor, _ = init_grouper_params(np.random.default_rng(7), GrouperConfig())
    contexts = [rng.normal(size=(n, E.STATE_DIM)) for n in (3, 1, 10, 5)]
    states = [rng.normal(size=E.STATE_DIM) for _ in contexts]
    ro = rollout_groups(actor, contexts, states, rng)
    for r in range(len(ro.actions)):
        b, i = ro.episode[r], ro.step[r]
        h = history_row(ro.groups[b].tolist(), i)
        np.testing.assert_array_equal(ro.actor_inputs[r], np.concatenate([contexts[b][i], h]))
        np.testing.assert_array_equal(ro.critic_inputs[r], np.concatenate([states[b], h]))
        assert ro.masks[r].sum() == len(contexts[b]) and ro.actions[r] == ro.groups[b][i]


def test_restricting_to_enabled_sizes():
    assert restrict(((0, 1, 2), (3, 4)), (1, 2)) == ((0,), (1,), (2,), (3, 4))
    assert restrict(singletons(3), (1,)) == singletons(3)


@given(st.lists(st.integers(0, 9), min_size=1, max_size=10), st.sets(st.integers(2, 10)))
@settings(max_examples=200, deadline=None)
def test_restriction_keeps_a_valid_cover(ids, extra):
    ids = [i % len(ids) for i in ids]
    sizes = {1} | extra
    part = restrict(partition_of(ids), sizes)
    validate_partition(part, len(ids))
    assert all(len(s) in sizes for s in part)


def test_running_norm_matches_batch_statistics():
    rng = np.random.default_rng(5)
    chunks = [rng.normal(3.0, 2.0, size=int(rng.integers(1, 50))) for _ in range(20)]
    norm = RunningNorm()
    for c in chunks:
        norm.update(c)
    allv = np.concatenate(chunks)
    assert norm.mean == pytest.approx(allv.mean())
    assert norm.std == pytest.approx(allv.std())


@pytest.fixture(scope="module")
def g3_pool():
    return segment(collect_episodes(E.get_task("g3"), 20, seed=0), 5)


def planted_loss(batches, partitions):
    return np.array([0.0 if p == PLANTED else 1.0 for p in partitions])


def test_planted_grouping_is_recovered(g3_pool):
    g = Grouper(GrouperConfig(), stream(0, "grouper_init"))
    rng = stream(0, "grouper")
    for _ in range(200):
        g.ppo_phase(sample_minibatch(g3_pool, 32, rng), planted_loss, rng)
        if all(p == PLANTED for p in g.partitions(g3_pool, greedy=True)):
            break
    assert all(p == PLANTED for p in g.partitions(g3_pool, greedy=True))


def test_constant_loss_leaves_policy_without_entropy_bonus(g3_pool):
    cfg = GrouperConfig()
    cfg.ppo.ent_coef = 0.0
    g = Grouper(cfg, np.random.default_rng(0))
    last = max(k for k in g.learner.critic if "/W" in k)
    g.learner.critic = g.learner.critic.replace({last: np.zeros_like(g.learner.critic[last]),
                                                 last.replace("W", "b"): np.zeros(1)})  # zero values, so zero advantages
    before = {k: v.copy() for k, v in g.learner.actor.items()}
    g.ppo_phase(g3_pool[:16], lambda bs, ps: np.full(len(bs), 3.0), np.random.default_rng(1))
    assert all(np.array_equal(before[k], g.learner.actor[k]) for k in before)


def test_non_finite_losses_are_skipped(g3_pool):
    g = Grouper(GrouperConfig(), np.random.default_rng(0))
    stats = g.ppo_phase(g3_pool[:8], lambda bs, ps: np.array([np.nan] + [1.0] * 7), np.random.default_rng(1))
    assert g.skipped == 1 and stats["mean_loss"] == 1.0
