"""Downstream execution with frozen skills and high-level MAPPO training.

Every H steps a Gaussian actor emits one embedding per agent; an
assignment manner turns the embeddings into code rows; the frozen decoder
then acts for H steps conditioned on those rows. The high-level reward of
a skill is the plain sum of the environment rewards it spans.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from masd import env as E
from masd import skillnet as S
from masd.dataset import EpisodeRecord
from masd.discovery import DiscoveryResult, config_from_meta
from masd.grouper import Partition, choose_groups, partition_of, validate_partition
from masd.mappo import (
    DiscreteHead, GaussianHead, LOG_STD_INIT, MetricsWriter, PPOConfig, PPOLearner, RolloutBuffer, gae, ppo_update,
)
from masd.nn import NumericError, ParameterSet, checkpoint, init_mlp, mlp_numpy
from masd.quantize import nearest
from masd.seeding import stream
from masd.vq3d import Codebook3D, nearest_joint
from masd.vqhier import BTM, TOP, aggregate_top

log = logging.getLogger(__name__)

MANNERS = ("3d", "hier", "mixed", "rule")
METRIC_COLUMNS = (
    "step", "episodes", "win_rate", "return", "train_return", "train_win_rate",
    "policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac",
)
ACTOR_PREFIX = "actor/"
CRITIC_PREFIX = "critic/"


class CompatibilityError(ValueError):
    pass


class FreezeViolation(RuntimeError):
    pass


class InfeasibleAssignment(RuntimeError):
    pass


# ---------------------------------------------------------------- frozen skills

@dataclass
class SkillSet:
    """Frozen skill components read from a discovery checkpoint."""

    config: S.DiscoveryConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "SkillSet":
        tensors, meta = checkpoint.load(path)
        return cls(config_from_meta(meta), tensors, meta)

    @classmethod
    def from_result(cls, result: DiscoveryResult) -> "SkillSet":
        return cls(result.config, result.tensors(), result.meta())

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def H(self) -> int:
        return self.config.H

    def codebook(self) -> Codebook3D:
        return Codebook3D.from_tensors(self.tensors)

    def grouper_actor(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("grouper/pi/")}

    def aggregator(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("agg/")}

    def decoder(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("dec/")}

    def required(self, manner: str) -> list[str]:
        if manner not in MANNERS:
            raise CompatibilityError(f"unknown assignment manner {manner!r}; choose from {MANNERS}")
        dec = ["dec/W0"]
        if manner == "3d":
            return dec + ["grouper/pi/W0", "E3d/m1"]
        if manner == "hier":
            return dec + ["grouper/pi/W0", "agg/query", BTM, TOP]
        if manner == "mixed":
            return dec + (["E3d/m1"] if self.method == "3d" else [BTM])
        return dec + ["E3d/m1"]

    def check(self, manner: str) -> None:
        missing = [name for name in self.required(manner) if name not in self.tensors]
        if self.method == "hier" and manner != "hier":
            missing = missing or [f"{manner} codes (a two-level checkpoint only supports the hier manner)"]
        if missing:
            raise CompatibilityError(f"manner {manner!r} needs tensors missing from the {self.method} skills checkpoint: {', '.join(missing)}")

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    @property
    def embed_dim(self) -> int:
        return self.config.d


# ---------------------------------------------------------------- assignment manners

@dataclass
class Assignment:
    code_rows: np.ndarray  # (n, decoder code width)
    partition: Partition
    labels: list[str]  # human-readable code id per agent


def _fallback_rows(z: np.ndarray, members: Sequence[int], codebook: Codebook3D) -> tuple[np.ndarray, list[str]]:
    table = codebook.tables[1][:, 0, :]
    idx = nearest(z[list(members)], table)
    return table[idx], [f"m1:c{int(i)}" for i in idx]


def assign_3d(z: np.ndarray, grouper_actor: Mapping, codebook: Codebook3D, context: np.ndarray,
              mode: str = "state") -> Assignment:
    """Greedy grouping, then one joint lookup per subgroup in its size's table."""
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    groups = choose_groups(grouper_actor, context, mode, greedy=True, n_agents=n)
    partition = partition_of(groups)
    rows = np.zeros_like(z)
    labels = [""] * n
    for sub in partition:
        m = len(sub)
        if m in codebook.tables:
            idx = nearest_joint(z[list(sub)], codebook.tables[m])
            for r, i in enumerate(sub):
                rows[i] = codebook.tables[m][idx, r]
                labels[i] = f"m{m}:c{idx}:r{r}"
        else:
            log.warning("subgroup size %d has no codebook; using nearest single-agent codes", m)
            fb, lab = _fallback_rows(z, sub, codebook)
            for r, i in enumerate(sub):
                rows[i], labels[i] = fb[r], lab[r]
    return Assignment(rows, partition, labels)


def assign_hier(z: np.ndarray, grouper_actor: Mapping, aggregator: Mapping, top: np.ndarray, btm: np.ndarray,
                context: np.ndarray, mode: str = "state", heads: int = 2) -> Assignment:
    """Bottom code per agent from its own embedding; top code per subgroup from the pooled members."""
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    partition = partition_of(choose_groups(grouper_actor, context, mode, greedy=True, n_agents=n))
    b_idx = nearest(z, btm)
    rows = np.zeros((n, btm.shape[1] + top.shape[1]))
    rows[:, :btm.shape[1]] = btm[b_idx]
    labels = [f"b{int(i)}" for i in b_idx]
    for g, sub in enumerate(partition):
        z_top = aggregate_top(aggregator, [z[i] for i in sub], heads)
        t_idx = int(nearest(z_top[None, :], top)[0])
        for i in sub:
            rows[i, btm.shape[1]:] = top[t_idx]
            labels[i] += f":t{t_idx}"
    return Assignment(rows, partition, labels)


@dataclass
class RowPool:
    rows: np.ndarray  # (R, d) deduplicated
    keys: list[tuple[int, int, int]]  # (size, code, row) of the first occurrence


def row_pool(codebook: Codebook3D | np.ndarray) -> RowPool:
    """Every single-agent row of every code, in (size, code, row) order, exact duplicates dropped."""
    if isinstance(codebook, np.ndarray):
        codebook = Codebook3D({1: codebook[:, None, :]})
    rows, keys, seen = [], [], set()
    for m in codebook.sizes:
        table = codebook.tables[m]
        for c in range(table.shape[0]):
            for r in range(m):
                key = table[c, r].tobytes()
                if key in seen:
                    continue
                seen.add(key)
                rows.append(table[c, r])
                keys.append((m, c, r))
    return RowPool(np.array(rows), keys)


def assign_mixed(z: np.ndarray, pool: RowPool) -> Assignment:
    """Each agent independently takes its nearest single-agent row."""
    z = np.asarray(z, dtype=np.float64)
    idx = nearest(z, pool.rows)
    labels = ["m{}:c{}:r{}".format(*pool.keys[i]) for i in idx]
    return Assignment(pool.rows[idx], tuple((i,) for i in range(len(z))), labels)


def rule_candidates(z: np.ndarray, codebook: Codebook3D) -> list[tuple[float, int, tuple[int, ...], int]]:
    """All (distance / size, size, subgroup, code) entries over enabled sizes."""
    n = len(z)
    out = []
    for m in codebook.sizes:
        if m > n:
            continue
        table = codebook.tables[m].reshape(len(codebook.tables[m]), -1)
        subs = list(itertools.combinations(range(n), m))
        joint = z[np.array(subs)].reshape(len(subs), -1)
        dist = ((joint[:, None, :] - table[None, :, :]) ** 2).sum(axis=-1) / m
        for s, sub in enumerate(subs):
            for c in range(len(table)):
                out.append((float(dist[s, c]), m, sub, c))
    return out


def assign_rule(z: np.ndarray, codebook: Codebook3D) -> Assignment:
    """Greedy matching: pop the smallest size-normalized distance, keep it if all its agents are free."""
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    heap = rule_candidates(z, codebook)
    heapq.heapify(heap)
    free = set(range(n))
    rows = np.zeros_like(z)
    labels = [""] * n
    chosen: list[tuple[int, ...]] = []
    while free and heap:
        _, m, sub, c = heapq.heappop(heap)
        if not free.issuperset(sub):
            continue
        free.difference_update(sub)
        chosen.append(sub)
        for r, i in enumerate(sub):
            rows[i] = codebook.tables[m][c, r]
            labels[i] = f"m{m}:c{c}:r{r}"
    if free:
        raise InfeasibleAssignment(f"agents {sorted(free)} left without a code; enable subgroup size 1")
    partition = tuple(sorted(chosen))
    validate_partition(partition, n)
    return Assignment(rows, partition, labels)


class Assigner:
    """Binds a manner to the frozen components it needs."""

    def __init__(self, skills: SkillSet, manner: str):
        skills.check(manner)
        self.skills = skills
        self.manner = manner
        self.mode = skills.config.grouper_mode
        if manner in ("3d", "rule") or (manner == "mixed" and skills.method == "3d"):
            self.codebook = skills.codebook()
        if manner == "mixed":
            self.pool = row_pool(self.codebook if skills.method == "3d" else skills.tensors[BTM])
        if manner in ("3d", "hier"):
            self.grouper = skills.grouper_actor()
        if manner == "hier":
            self.aggregator = skills.aggregator()

    def __call__(self, z: np.ndarray, state_vec: np.ndarray, obs: np.ndarray) -> Assignment:
        context = state_vec if self.mode == "state" else obs
        if self.manner == "3d":
            return assign_3d(z, self.grouper, self.codebook, context, self.mode)
        if self.manner == "hier":
            t = self.skills.tensors
            return assign_hier(z, self.grouper, self.aggregator, t[TOP], t[BTM], context, self.mode, self.skills.config.heads)
        if self.manner == "mixed":
            return assign_mixed(z, self.pool)
        return assign_rule(z, self.codebook)


# ---------------------------------------------------------------- high-level actor

def actor_input(obs: np.ndarray, prev_obs: np.ndarray) -> np.ndarray:
    """Stacked (current, one-skill-ago) observations plus the agent one-hot."""
    n = len(obs)
    return np.concatenate([obs, prev_obs, np.eye(E.N_MAX)[:n]], axis=1)


def critic_input(state_vec: np.ndarray, n: int) -> np.ndarray:
    return np.concatenate([np.tile(state_vec, (n, 1)), np.eye(E.N_MAX)[:n]], axis=1)


def init_skill_learner(rng: np.random.Generator, embed_dim: int, ppo: PPOConfig, hidden: int = 64) -> PPOLearner:
    actor = init_mlp(rng, ACTOR_PREFIX, [2 * E.OBS_DIM + E.N_MAX, hidden, hidden, embed_dim])
    actor[f"{ACTOR_PREFIX}log_std"] = np.full(embed_dim, LOG_STD_INIT)
    critic = init_mlp(rng, CRITIC_PREFIX, [E.STATE_DIM + E.N_MAX, hidden, hidden, 1])
    return PPOLearner(ParameterSet(actor, "actor"), ParameterSet(critic, "critic"),
                      GaussianHead(ACTOR_PREFIX, embed_dim), CRITIC_PREFIX, ppo)


def init_flat_learner(rng: np.random.Generator, ppo: PPOConfig, hidden: int = 64) -> PPOLearner:
    actor = init_mlp(rng, ACTOR_PREFIX, [E.OBS_DIM + E.N_MAX, hidden, hidden, E.N_ACTIONS])
    critic = init_mlp(rng, CRITIC_PREFIX, [E.STATE_DIM + E.N_MAX, hidden, hidden, 1])
    return PPOLearner(ParameterSet(actor, "actor"), ParameterSet(critic, "critic"),
                      DiscreteHead(ACTOR_PREFIX), CRITIC_PREFIX, ppo)


def decoder_actions(decoder: Mapping, obs: np.ndarray, code_rows: np.ndarray, alive: np.ndarray,
                    rng: np.random.Generator | None, greedy: bool) -> np.ndarray:
    """Frozen decoder: argmax when greedy, otherwise a sample. Dead agents stay."""
    logits = mlp_numpy(decoder, "dec/", np.concatenate([obs, code_rows], axis=1))
    if greedy:
        act = np.argmax(logits, axis=1)
    else:
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        act = np.minimum((probs.cumsum(axis=1) < rng.random(len(probs))[:, None]).sum(axis=1), E.N_ACTIONS - 1)
    return np.where(alive, act, E.STAY)


# ---------------------------------------------------------------- rollouts

@dataclass
class SkillTransition:
    start_state: np.ndarray
    actor_inputs: np.ndarray  # (n, 2*OBS_DIM + N_MAX)
    z: np.ndarray  # (n, d) emitted embeddings
    logp: np.ndarray  # (n,)
    assignment: Assignment
    reward: float
    next_state: np.ndarray
    done: bool
    steps: int


@dataclass
class SkillEpisode:
    record: EpisodeRecord
    transitions: list[SkillTransition]
    trace: list[dict]

    @property
    def ret(self) -> float:
        return float(self.record.rewards.sum())


def run_skill_episode(
    config: E.TaskConfig, episode_seed: int, actor: Mapping, skills: SkillSet, assigner: Assigner,
    rng: np.random.Generator | None, greedy: bool = False, trace: bool = False,
) -> SkillEpisode:
    """One episode of high-level decisions every H steps; the last skill may be cut short by termination."""
    H = skills.H
    head = GaussianHead(ACTOR_PREFIX, skills.embed_dim)
    decoder = skills.decoder()
    state, obs = E.reset(config, episode_seed)
    n = config.n_agents
    prev_obs = obs
    states, observations, actions, rewards, transitions, lines = [], [], [], [], [], []
    done = False
    t = 0
    while not done:
        start_vec = E.global_state(state)
        x = actor_input(obs, prev_obs)
        mean = mlp_numpy(actor, ACTOR_PREFIX, x)
        if greedy:
            z = mean
        else:
            z = mean + np.exp(head.numpy_log_std(actor)) * rng.standard_normal(mean.shape)
        logp = head.numpy_log_prob(actor, mean, z)
        assignment = assigner(z, start_vec, obs)
        skill_start_obs = obs
        total = 0.0
        steps = 0
        while steps < H and not done:
            act = decoder_actions(decoder, obs, assignment.code_rows, state.agent_alive, rng, greedy)
            if trace:
                lines.append({
                    "t": t, "agents": state.agent_pos.tolist(), "enemies": state.enemy_pos.tolist(),
                    "actions": act.tolist(), "codes": assignment.labels,
                    "partition": [list(s) for s in assignment.partition],
                })
            states.append(E.global_state(state))
            observations.append(obs)
            actions.append(act)
            r, state, obs, done = E.step(state, act)
            rewards.append(r)
            total += r
            steps += 1
            t += 1
        transitions.append(SkillTransition(start_vec, x, z, logp, assignment, total, E.global_state(state), done, steps))
        prev_obs = skill_start_obs
    record = EpisodeRecord(config.task_id, n, np.array(states), np.array(observations),
                           np.array(actions, dtype=np.int64), np.array(rewards), bool(state.won))
    return SkillEpisode(record, transitions, lines)


@dataclass
class FlatStep:
    actor_inputs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    masks: np.ndarray
    state: np.ndarray
    reward: float
    done: bool


def flat_actor_input(obs: np.ndarray) -> np.ndarray:
    return np.concatenate([obs, np.eye(E.N_MAX)[:len(obs)]], axis=1)


def run_flat_episode(config: E.TaskConfig, episode_seed: int, actor: Mapping, rng: np.random.Generator | None,
                     greedy: bool = False, trace: bool = False) -> tuple[EpisodeRecord, list[FlatStep], list[dict]]:
    head = DiscreteHead(ACTOR_PREFIX)
    state, obs = E.reset(config, episode_seed)
    steps, lines = [], []
    states, observations, actions, rewards = [], [], [], []
    done = False
    t = 0
    while not done:
        x = flat_actor_input(obs)
        mask = np.ones((len(obs), E.N_ACTIONS), dtype=bool)
        mask[~state.agent_alive, 1:] = False
        logits = head.numpy_logits(actor, x, mask)
        logits = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        if greedy:
            act = np.argmax(logits, axis=1)
        else:
            act = np.minimum((probs.cumsum(axis=1) < rng.random(len(probs))[:, None]).sum(axis=1), E.N_ACTIONS - 1)
            act = np.where(state.agent_alive, act, E.STAY)
        if trace:
            lines.append({"t": t, "agents": state.agent_pos.tolist(), "enemies": state.enemy_pos.tolist(),
                          "actions": act.tolist(), "codes": None, "partition": None})
        s_vec = E.global_state(state)
        states.append(s_vec)
        observations.append(obs)
        actions.append(act)
        r, state, obs, done = E.step(state, act)
        rewards.append(r)
        steps.append(FlatStep(x, act, np.log(probs[np.arange(len(act)), act]), mask, s_vec, r, done))
        t += 1
    record = EpisodeRecord(config.task_id, config.n_agents, np.array(states), np.array(observations),
                           np.array(actions, dtype=np.int64), np.array(rewards), bool(state.won))
    return record, steps, lines


# ---------------------------------------------------------------- training

@dataclass
class DownstreamConfig:
    manner: str = "mixed"  # one of MANNERS, or "flat" for primitive actions
    steps: int = 300_000
    rollout_steps: int = 2_000
    eval_interval: int = 20_000
    eval_episodes: int = 32
    target_win_rate: float | None = None  # stop early once an evaluation reaches it
    seed: int = 0
    ppo: PPOConfig | None = None  # default: no entropy bonus for the Gaussian skill actor, 0.01 for flat

    def __post_init__(self):
        if self.manner not in MANNERS + ("flat",):
            raise ValueError(f"manner must be one of {MANNERS + ('flat',)}, got {self.manner!r}")
        if self.ppo is None:
            self.ppo = PPOConfig(ent_coef=0.01 if self.manner == "flat" else 0.0)
        if self.steps < 1 or self.rollout_steps < 1 or self.eval_interval < 1 or self.eval_episodes < 1:
            raise ValueError("steps, rollout_steps, eval_interval and eval_episodes must be positive")


def effective_horizon(max_steps: int, H: int) -> int:
    return math.ceil(max_steps / H)


def skill_returns(episode: SkillEpisode) -> float:
    return float(sum(tr.reward for tr in episode.transitions))


@dataclass
class DownstreamResult:
    config: DownstreamConfig
    task: E.TaskConfig
    learner: PPOLearner
    skills: SkillSet | None
    metrics: list[dict]
    best_win_rate: float
    env_steps: int

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.learner.actor.items()) | dict(self.learner.critic.items())
        if self.skills is not None:
            out |= {f"skills/{k}": v for k, v in self.skills.tensors.items()}
        return out

    def meta(self) -> dict:
        meta = {
            "kind": "policy", "manner": self.config.manner, "task": self.task.task_id,
            "reward_mode": self.task.reward_mode, "seed": self.config.seed, "env_steps": self.env_steps,
            "obs_dim": E.OBS_DIM, "state_dim": E.STATE_DIM,
        }
        if self.skills is not None:
            meta["skills_meta"] = self.skills.meta
            meta["skills_digest"] = self.skills.digest()
        return meta

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.tensors(), self.meta())


class DivergenceError(RuntimeError):
    def __init__(self, message: str, actor: ParameterSet, critic: ParameterSet):
        super().__init__(message)
        self.actor = actor
        self.critic = critic


def _skill_buffer(episodes: Sequence[SkillEpisode], learner: PPOLearner, gamma: float, lam: float) -> RolloutBuffer:
    xs, zs, lps, advs, rets, cins, vals = [], [], [], [], [], [], []
    for ep in episodes:
        n = ep.record.n_agents
        c_in = np.stack([critic_input(tr.start_state, n) for tr in ep.transitions])  # (K, n, ·)
        v = learner.values(c_in.reshape(-1, c_in.shape[-1])).reshape(len(ep.transitions), n)
        r = np.array([tr.reward for tr in ep.transitions])
        d = np.array([tr.done for tr in ep.transitions])
        for i in range(n):
            a, ret = gae(r, v[:, i], d, gamma, lam)
            advs.append(a)
            rets.append(ret)
            vals.append(v[:, i])
            xs.append(np.stack([tr.actor_inputs[i] for tr in ep.transitions]))
            zs.append(np.stack([tr.z[i] for tr in ep.transitions]))
            lps.append(np.array([tr.logp[i] for tr in ep.transitions]))
            cins.append(c_in[:, i])
    return RolloutBuffer(np.concatenate(xs), np.concatenate(zs), np.concatenate(lps), np.concatenate(advs),
                         np.concatenate(rets), np.concatenate(cins), np.concatenate(vals))


def _flat_buffer(episodes: Sequence[list[FlatStep]], learner: PPOLearner, gamma: float, lam: float) -> RolloutBuffer:
    xs, acts, lps, advs, rets, cins, vals, masks = [], [], [], [], [], [], [], []
    for steps in episodes:
        n = len(steps[0].actions)
        c_in = np.stack([critic_input(s.state, n) for s in steps])
        v = learner.values(c_in.reshape(-1, c_in.shape[-1])).reshape(len(steps), n)
        r = np.array([s.reward for s in steps])
        d = np.array([s.done for s in steps])
        for i in range(n):
            a, ret = gae(r, v[:, i], d, gamma, lam)
            advs.append(a)
            rets.append(ret)
            vals.append(v[:, i])
            xs.append(np.stack([s.actor_inputs[i] for s in steps]))
            acts.append(np.array([s.actions[i] for s in steps]))
            lps.append(np.array([s.logp[i] for s in steps]))
            masks.append(np.stack([s.masks[i] for s in steps]))
            cins.append(c_in[:, i])
    return RolloutBuffer(np.concatenate(xs), np.concatenate(acts), np.concatenate(lps), np.concatenate(advs),
                         np.concatenate(rets), np.concatenate(cins), np.concatenate(vals), np.concatenate(masks))


def evaluate_policy(task: E.TaskConfig, learner_actor: Mapping, skills: SkillSet | None, assigner: Assigner | None,
                    episodes: int, seed: int) -> tuple[float, float]:
    """Greedy win rate and mean return over ``episodes`` fixed-seed episodes."""
    wins = 0
    total = 0.0
    for k in range(episodes):
        ep_seed = seed * 1_000_003 + k
        if skills is None:
            record, _, _ = run_flat_episode(task, ep_seed, learner_actor, None, greedy=True)
        else:
            record = run_skill_episode(task, ep_seed, learner_actor, skills, assigner, None, greedy=True).record
        wins += int(record.won)
        total += float(record.rewards.sum())
    return wins / episodes, total / episodes


def train_downstream(
    task: E.TaskConfig,
    skills: SkillSet | None,
    config: DownstreamConfig,
    metrics_csv: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> DownstreamResult:
    """High-level MAPPO over skills (or flat MAPPO when ``config.manner == 'flat'``)."""
    flat = config.manner == "flat"
    if not flat and skills is None:
        raise CompatibilityError("a skills checkpoint is required unless the manner is 'flat'")
    assigner = None if flat else Assigner(skills, config.manner)
    digest = None if flat else skills.digest()
    init_rng = stream(config.seed, "init")
    learner = init_flat_learner(init_rng, config.ppo) if flat else init_skill_learner(init_rng, skills.embed_dim, config.ppo)
    rng_policy = stream(config.seed, "policy")
    rng_update = stream(config.seed, "sampling")
    eval_seed = int(stream(config.seed, "eval").integers(1 << 30))
    writer = MetricsWriter(metrics_csv, METRIC_COLUMNS)
    metrics: list[dict] = []
    env_steps = episodes = 0
    next_eval = config.eval_interval
    best = 0.0
    stats: dict[str, float] = {}
    recent_returns: list[float] = []
    recent_wins: list[bool] = []
    env_seed_base = int(stream(config.seed, "env").integers(1 << 30))
    while env_steps < config.steps:
        batch, used = [], 0
        while used < config.rollout_steps and env_steps + used < config.steps:
            ep_seed = env_seed_base + episodes
            if flat:
                record, steps, _ = run_flat_episode(task, ep_seed, learner.actor, rng_policy)
                batch.append(steps)
            else:
                ep = run_skill_episode(task, ep_seed, learner.actor, skills, assigner, rng_policy)
                record = ep.record
                batch.append(ep)
            used += len(record)
            episodes += 1
            recent_returns.append(float(record.rewards.sum()))
            recent_wins.append(record.won)
        env_steps += used
        buf = (_flat_buffer if flat else _skill_buffer)(batch, learner, config.ppo.gamma, config.ppo.lam)
        good_actor, good_critic = learner.actor, learner.critic
        try:
            stats = ppo_update(learner, buf, rng_update)
        except NumericError as exc:
            raise DivergenceError(f"downstream training diverged after {env_steps} env steps: {exc}", good_actor, good_critic) from None
        if env_steps >= next_eval or env_steps >= config.steps:
            next_eval = (env_steps // config.eval_interval + 1) * config.eval_interval
            win, ret = evaluate_policy(task, learner.actor, skills, assigner, config.eval_episodes, eval_seed)
            best = max(best, win)
            row = {
                "step": env_steps, "episodes": episodes, "win_rate": win, "return": ret,
                "train_return": float(np.mean(recent_returns)), "train_win_rate": float(np.mean(recent_wins)),
                **{k: stats.get(k, float("nan")) for k in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac")},
            }
            recent_returns, recent_wins = [], []
            metrics.append(row)
            writer.write(**row)
            if progress:
                progress(row)
            if config.target_win_rate is not None and win >= config.target_win_rate:
                break
    if digest is not None and skills.digest() != digest:
        raise FreezeViolation("skill tensors changed during downstream training")
    return DownstreamResult(config, task, learner, skills, metrics, best, env_steps)


# ---------------------------------------------------------------- policy checkpoints

@dataclass
class LoadedPolicy:
    manner: str
    actor: dict[str, np.ndarray]
    skills: SkillSet | None
    meta: dict


def load_policy(path: str | Path) -> LoadedPolicy:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "policy":
        raise checkpoint.CheckpointError(f"{path}: not a policy checkpoint")
    if (meta.get("obs_dim"), meta.get("state_dim")) != (E.OBS_DIM, E.STATE_DIM):
        raise checkpoint.CheckpointError(f"{path}: checkpoint dimensions {meta.get('obs_dim')}/{meta.get('state_dim')} "
                                         f"do not match the environment {E.OBS_DIM}/{E.STATE_DIM}")
    actor = {k: v for k, v in tensors.items() if k.startswith(ACTOR_PREFIX)}
    skills = None
    if meta["manner"] != "flat":
        sk = {k[len("skills/"):]: v for k, v in tensors.items() if k.startswith("skills/")}
        skills = SkillSet(config_from_meta(meta["skills_meta"]), sk, meta["skills_meta"])
    return LoadedPolicy(meta["manner"], actor, skills, meta)


def check_policy_task(policy: LoadedPolicy, task: E.TaskConfig) -> None:
    """Actor input width depends only on the fixed padding, so any task up to N_MAX agents fits."""
    if task.n_agents > E.N_MAX or task.n_enemies > E.E_MAX:
        raise checkpoint.CheckpointError(f"task {task.task_id} exceeds the padded slot count")
    w = policy.actor[f"{ACTOR_PREFIX}W0"].shape[0]
    expected = E.OBS_DIM + E.N_MAX if policy.manner == "flat" else 2 * E.OBS_DIM + E.N_MAX
    if w != expected:
        raise checkpoint.CheckpointError(f"actor input width {w} does not match the environment ({expected})")


def trajectory_lines(trace: Sequence[dict], episode: int) -> list[str]:
    return [json.dumps({"episode": episode, **row}, sort_keys=True) for row in trace]
