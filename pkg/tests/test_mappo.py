"""Advantage estimation, policy heads and the clipped-surrogate update."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masd.mappo import (
    DiscreteHead, GaussianHead, MetricsWriter, PPOConfig, PPOLearner, RolloutBuffer, gae, normalized, ppo_update,
    surrogate_terms,
)
from masd.nn import AdamState, ParameterSet, Tensor, adam_step, clip_global_norm, evaluate_with_gradients, finite_diff_check, init_mlp
from masd.nn import ops as T


def gae_oracle(r, v, gamma, lam):
    """Direct sum of discounted TD errors for a single terminal episode."""
    T_ = len(r)
    v_next = list(v[1:]) + [0.0]
    deltas = [r[t] + gamma * v_next[t] - v[t] for t in range(T_)]
    return np.array([sum((gamma * lam) ** (k - t) * deltas[k] for k in range(t, T_)) for t in range(T_)])


def test_gae_trivial_cases():
    adv, ret = gae(np.zeros(4), np.zeros(4), [False, False, False, True], 0.99, 0.95)
    assert not adv.any() and not ret.any()
    adv, ret = gae([1.0], [0.0], [True], 0.99, 0.95)
    assert adv.tolist() == [1.0] and ret.tolist() == [1.0]


def test_gae_three_step_recursion():
    r, v = [1.0, 0.0, 2.0], [0.5, 0.5, 0.5]
    adv, ret = gae(r, v, [False, False, True], 0.9, 0.95)
    np.testing.assert_allclose(adv, gae_oracle(r, v, 0.9, 0.95), rtol=1e-14)
    np.testing.assert_allclose(ret, adv + np.array(v))


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
@settings(max_examples=100, deadline=None)
def test_gae_matches_oracle(rewards, gamma, lam, seed):
    v = np.random.default_rng(seed).normal(size=len(rewards))
    dones = [False] * (len(rewards) - 1) + [True]
    adv, _ = gae(rewards, v, dones, gamma, lam)
    np.testing.assert_allclose(adv, gae_oracle(rewards, v, gamma, lam), rtol=1e-9, atol=1e-9)


def test_gae_resets_across_episode_boundaries():
    adv, _ = gae([1.0, 1.0, 5.0], [0.0, 0.0, 0.0], [False, True, True], 1.0, 1.0)
    assert adv.tolist() == [2.0, 1.0, 5.0]


def discrete_learner(seed=0, **ppo):
    rng = np.random.default_rng(seed)
    actor = ParameterSet(init_mlp(rng, "pi/", [4, 8, 3]))
    critic = ParameterSet(init_mlp(rng, "v/", [5, 8, 1]))
    return PPOLearner(actor, critic, DiscreteHead("pi/"), "v/", PPOConfig(**ppo))


def fresh_buffer(learner, n=40, seed=1, advantages=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4))
    logits = learner.head.numpy_logits(learner.actor, x, None)
    logp_all = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    acts = rng.integers(0, 3, size=n)
    adv = rng.normal(size=n) if advantages is None else advantages
    cin = rng.normal(size=(n, 5))
    return RolloutBuffer(x, acts, logp_all[np.arange(n), acts], adv, rng.normal(size=n), cin, learner.values(cin))


def test_ratio_one_gives_vanilla_policy_gradient():
    learner = discrete_learner()
    buf = fresh_buffer(learner)
    cfg = learner.config
    params = dict(learner.actor.items()) | dict(learner.critic.items())
    _, surrogate = evaluate_with_gradients(params, lambda p: surrogate_terms(p, learner.head, "v/", buf, buf.advantages, cfg)[1])

    def vanilla(p):
        logp, _ = learner.head.log_prob_entropy(p, Tensor(buf.actor_inputs), buf.actions, None)
        return T.scale(T.mean(T.mul(logp, Tensor(buf.advantages))), -1.0)

    _, pg = evaluate_with_gradients(params, vanilla)
    for k in learner.actor:
        np.testing.assert_allclose(surrogate[k], pg[k], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("head", ["discrete", "gaussian"])
def test_surrogate_gradient_matches_finite_differences(head):
    rng = np.random.default_rng(2)
    if head == "discrete":
        learner = discrete_learner(ent_coef=0.05)
        buf = fresh_buffer(learner, n=12)
        buf.old_logp = buf.old_logp + rng.normal(scale=0.1, size=12)  # ratios away from 1, some clipped
    else:
        actor = init_mlp(rng, "a/", [4, 6, 2])
        actor["a/log_std"] = np.array([-0.3, 0.2])
        critic = init_mlp(rng, "v/", [5, 6, 1])
        learner = PPOLearner(ParameterSet(actor), ParameterSet(critic), GaussianHead("a/", 2), "v/", PPOConfig(ent_coef=0.05))
        x = rng.normal(size=(12, 4))
        acts = rng.normal(size=(12, 2))
        buf = RolloutBuffer(x, acts, rng.normal(size=12) - 2.0, rng.normal(size=12), rng.normal(size=12),
                            rng.normal(size=(12, 5)), np.zeros(12))
    params = dict(learner.actor.items()) | dict(learner.critic.items())
    graph = lambda p: surrogate_terms(p, learner.head, "v/", buf, buf.advantages, learner.config)[0]  # noqa: E731
    assert finite_diff_check(params, graph) < 1e-5


def test_equal_advantages_move_policy_only_through_entropy():
    learner = discrete_learner(ent_coef=0.0, epochs=2, minibatch_size=16)
    buf = fresh_buffer(learner, advantages=np.full(40, 1.7))
    assert not normalized(buf.advantages).any()
    before = {k: v.copy() for k, v in learner.actor.items()}
    ppo_update(learner, buf, np.random.default_rng(0))
    assert all(np.array_equal(before[k], learner.actor[k]) for k in before)

    learner = discrete_learner(ent_coef=0.1, epochs=1, minibatch_size=40)
    buf = fresh_buffer(learner, advantages=np.full(40, 1.7))
    params = dict(learner.actor.items()) | dict(learner.critic.items())

    def entropy_only(p):
        _, ent = learner.head.log_prob_entropy(p, Tensor(buf.actor_inputs), buf.actions, None)
        return T.scale(T.mean(ent), -0.1)

    _, g = evaluate_with_gradients(params, entropy_only)
    grads = clip_global_norm({k: g[k] for k in learner.actor}, learner.config.max_grad_norm)
    expected, _ = adam_step(learner.actor, grads, AdamState(lr=learner.config.actor_lr, eps=1e-5))
    ppo_update(learner, buf, np.random.default_rng(0))
    for k in expected:
        np.testing.assert_allclose(learner.actor[k], expected[k], rtol=0, atol=1e-15)


def test_reward_scale_does_not_change_normalized_update():
    adv = np.random.default_rng(3).normal(size=40)
    runs = []
    for scale in (1.0, 2.0):
        learner = discrete_learner(epochs=2, minibatch_size=20)
        ppo_update(learner, fresh_buffer(learner, advantages=adv * scale), np.random.default_rng(0))
        runs.append(learner.actor)
    for k in runs[0]:
        np.testing.assert_allclose(runs[0][k], runs[1][k], rtol=1e-6, atol=1e-9)


def test_gaussian_log_prob_matches_closed_form():
    head = GaussianHead("a/", 3)
    p = {"a/log_std": np.array([-1.0, 0.0, 0.5])}
    mean = np.array([[0.1, -0.2, 0.3]])
    act = np.array([[0.0, 0.5, -1.0]])
    std = np.exp(p["a/log_std"])
    expected = (-0.5 * ((act - mean) / std) ** 2 - np.log(std) - 0.5 * np.log(2 * np.pi)).sum()
    assert head.numpy_log_prob(p, mean, act)[0] == pytest.approx(expected)


def test_buffer_rejects_misaligned_fields():
    with pytest.raises(ValueError):
        RolloutBuffer(np.zeros((3, 2)), np.zeros(2), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros((3, 1)), np.zeros(3))


def test_metrics_writer_formats_plain_numbers(tmp_path):
    w = MetricsWriter(tmp_path / "m.csv", ["step", "x"])
    w.write(step=np.int64(3), x=np.float64(0.1234567891))
    assert (tmp_path / "m.csv").read_text().splitlines() == ["step,x", "3,0.123457"]
    with pytest.raises(KeyError):
        w.write(y=1)
