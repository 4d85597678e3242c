"""PPO with a centralized critic, shared by the grouper and the downstream learner."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from masd.nn import AdamState, NumericError, ParameterSet, ShapeError, Tensor, adam_step, clip_global_norm, mlp, mlp_numpy
from masd.nn import ops as T
from masd.nn import evaluate_with_gradients

LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = math.log(2.0)
LOG_STD_INIT = math.log(0.5)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch_size: int = 256
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    normalize_advantages: bool = True
    max_grad_norm: float | None = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")


def gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates for one trajectory stream.

    ``dones[t]`` marks that the episode ended after step ``t``; ``last_value``
    bootstraps a stream cut before its episode finished.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape) or rewards.ndim != 1:
        raise ShapeError(f"gae: rewards {rewards.shape}, values {values.shape}, dones {dones.shape} must align")
    adv = np.zeros_like(rewards)
    running = 0.0
    next_value = last_value
    for t in range(len(rewards) - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# ---------------------------------------------------------------- policy heads

class DiscreteHead:
    """Categorical policy over masked logits from an MLP."""

    def __init__(self, prefix: str):
        self.prefix = prefix

    def log_probs(self, p, x: Tensor, mask: np.ndarray | None) -> Tensor:
        return T.log_softmax(mlp(p, self.prefix, x), mask)

    def log_prob_entropy(self, p, x: Tensor, actions: np.ndarray, mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
        logp_all = self.log_probs(p, x, mask)
        probs = T.exp(logp_all)
        logp = T.pick(logp_all, actions)
        ent = T.scale(T.sum_(T.mul(probs, logp_all), axis=1), -1.0)
        return logp, ent

    def numpy_logits(self, p, x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
        logits = mlp_numpy(p, self.prefix, x)
        if mask is not None:
            logits = np.where(mask, logits, -np.inf)
        return logits


class GaussianHead:
    """Diagonal Gaussian with a state-independent, clamped log-std."""

    def __init__(self, prefix: str, dim: int):
        self.prefix = prefix
        self.dim = dim

    def log_std(self, p) -> Tensor:
        return T.clip(p[f"{self.prefix}log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def log_prob_entropy(self, p, x: Tensor, actions: np.ndarray, mask=None) -> tuple[Tensor, Tensor]:
        mean = mlp(p, self.prefix, x)
        B = mean.shape[0]
        log_std = T.broadcast_rows(self.log_std(p), B)
        inv_std = T.exp(T.scale(log_std, -1.0))
        z = T.mul(T.sub(Tensor(actions), mean), inv_std)
        per_dim = T.sub(T.scale(T.mul(z, z), -0.5), log_std)
        logp = T.add(T.sum_(per_dim, axis=1), Tensor(np.full(B, -self.dim * _HALF_LOG_2PI)))
        ent = T.add(T.sum_(log_std, axis=1), Tensor(np.full(B, self.dim * (0.5 + _HALF_LOG_2PI))))
        return logp, ent

    def numpy_log_std(self, p) -> np.ndarray:
        return np.clip(p[f"{self.prefix}log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def numpy_log_prob(self, p, mean: np.ndarray, actions: np.ndarray) -> np.ndarray:
        log_std = self.numpy_log_std(p)
        z = (actions - mean) * np.exp(-log_std)
        return (-0.5 * z * z - log_std).sum(axis=-1) - self.dim * _HALF_LOG_2PI


# ---------------------------------------------------------------- buffer and update

@dataclass
class RolloutBuffer:
    """Flat per-decision samples; every field has the same leading length."""

    actor_inputs: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    critic_inputs: np.ndarray
    old_values: np.ndarray
    masks: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.actor_inputs)
        for name in ("actions", "old_logp", "advantages", "returns", "critic_inputs", "old_values"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"rollout buffer field {name} has length {len(getattr(self, name))}, expected {n}")
        if self.masks is not None and len(self.masks) != n:
            raise ShapeError("rollout buffer masks misaligned")
        for name in ("old_logp", "advantages", "returns", "old_values"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"rollout buffer field {name} has non-finite entries")

    def __len__(self) -> int:
        return len(self.actor_inputs)

    def take(self, idx: np.ndarray) -> "RolloutBuffer":
        return RolloutBuffer(
            self.actor_inputs[idx], self.actions[idx], self.old_logp[idx], self.advantages[idx],
            self.returns[idx], self.critic_inputs[idx], self.old_values[idx],
            None if self.masks is None else self.masks[idx],
        )


@dataclass
class PPOLearner:
    """Actor/critic parameters with their optimizer states."""

    actor: ParameterSet
    critic: ParameterSet
    head: DiscreteHead | GaussianHead
    critic_prefix: str
    config: PPOConfig
    actor_opt: AdamState = field(default=None)
    critic_opt: AdamState = field(default=None)

    def __post_init__(self):
        if self.actor_opt is None:
            self.actor_opt = AdamState(lr=self.config.actor_lr, eps=1e-5)
        if self.critic_opt is None:
            self.critic_opt = AdamState(lr=self.config.critic_lr, eps=1e-5)

    def values(self, critic_inputs: np.ndarray) -> np.ndarray:
        return mlp_numpy(self.critic, self.critic_prefix, critic_inputs)[:, 0]


def surrogate_terms(p, head, critic_prefix: str, mb: RolloutBuffer, adv: np.ndarray, config: PPOConfig):
    """Policy, value and entropy losses on a minibatch; returns (total, policy, value, entropy, ratio)."""
    logp, ent = head.log_prob_entropy(p, Tensor(mb.actor_inputs), mb.actions, mb.masks)
    ratio = T.exp(T.sub(logp, Tensor(mb.old_logp)))
    adv_t = Tensor(adv)
    unclipped = T.mul(ratio, adv_t)
    clipped = T.mul(T.clip(ratio, 1.0 - config.clip, 1.0 + config.clip), adv_t)
    policy_loss = T.scale(T.mean(T.minimum(unclipped, clipped)), -1.0)
    entropy = T.mean(ent)
    value = mlp(p, critic_prefix, Tensor(mb.critic_inputs))
    value = T.reshape(value, (value.shape[0],))
    err = T.sub(value, Tensor(mb.returns))
    value_loss = T.mean(T.mul(err, err))
    total = T.total([policy_loss, T.scale(value_loss, config.vf_coef), T.scale(entropy, -config.ent_coef)])
    return total, policy_loss, value_loss, entropy, ratio


def normalized(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    if std < 1e-8:
        return adv - adv.mean()
    return (adv - adv.mean()) / (std + 1e-8)


def ppo_update(learner: PPOLearner, buffer: RolloutBuffer, rng: np.random.Generator) -> dict[str, float]:
    """Run ``config.epochs`` passes of clipped-surrogate updates; mutates ``learner`` in place.

    Raises NumericError (leaving the learner untouched) if any loss is non-finite.
    """
    cfg = learner.config
    if len(buffer) == 0:
        raise ValueError("empty rollout buffer")
    adv_all = normalized(buffer.advantages) if cfg.normalize_advantages else buffer.advantages
    actor, critic = learner.actor, learner.critic
    a_opt, c_opt = learner.actor_opt, learner.critic_opt
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_frac": 0.0, "approx_kl": 0.0}
    n_updates = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(buffer))
        for start in range(0, len(buffer), cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            mb = buffer.take(idx)
            adv = adv_all[idx]
            params = dict(actor.items()) | dict(critic.items())

            def graph(p):
                return surrogate_terms(p, learner.head, learner.critic_prefix, mb, adv, cfg)

            try:
                (total, pl, vl, ent, ratio), grads = evaluate_with_gradients(params, graph)
            except NumericError as exc:
                raise NumericError(f"PPO update aborted: {exc}") from None
            ag = clip_global_norm({k: grads[k] for k in actor}, cfg.max_grad_norm)
            cg = clip_global_norm({k: grads[k] for k in critic}, cfg.max_grad_norm)
            actor, a_opt = adam_step(actor, ag, a_opt)
            critic, c_opt = adam_step(critic, cg, c_opt)
            stats["policy_loss"] += float(pl)
            stats["value_loss"] += float(vl)
            stats["entropy"] += float(ent)
            stats["clip_frac"] += float((np.abs(ratio - 1.0) > cfg.clip).mean())
            stats["approx_kl"] += float(np.mean(-np.log(ratio)))
            n_updates += 1
    learner.actor, learner.critic, learner.actor_opt, learner.critic_opt = actor, critic, a_opt, c_opt
    out = {k: v / n_updates for k, v in stats.items()}
    var = buffer.returns.var()
    out["explained_variance"] = float(1.0 - (buffer.returns - buffer.old_values).var() / var) if var > 1e-12 else 0.0
    return out


class MetricsWriter:
    """Append rows to a CSV, writing the header on first use."""

    def __init__(self, path: str | Path | None, columns: Sequence[str]):
        self.path = Path(path) if path else None
        self.columns = list(columns)
        self.rows: list[dict] = []
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def write(self, **row) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(c, "")) for c in self.columns])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(round(float(v), 6))
    if isinstance(v, np.integer):
        return int(v)
    return v
