"""Offline trajectories: line-delimited JSON persistence and H-step segmentation.

File layout: line 1 is a header object, every further line one episode.
Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from masd import env as E

FORMAT = "masd-dataset"
VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class EpisodeRecord:
    task_id: str
    n_agents: int
    states: np.ndarray  # (T, STATE_DIM)
    obs: np.ndarray  # (T, n, OBS_DIM)
    actions: np.ndarray  # (T, n) int
    rewards: np.ndarray  # (T,)
    won: bool = False

    def __len__(self) -> int:
        return len(self.rewards)

    def validate(self) -> None:
        T = len(self.rewards)
        if self.obs.shape[:2] != (T, self.n_agents) or self.actions.shape != (T, self.n_agents):
            raise DatasetError(f"episode of task {self.task_id}: per-step arrays disagree with n_agents={self.n_agents}")
        if self.states.shape[0] != T:
            raise DatasetError(f"episode of task {self.task_id}: {self.states.shape[0]} states for {T} steps")
        for name in ("rewards", "obs", "states"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DatasetError(f"episode of task {self.task_id}: non-finite {name}")

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "n_agents": self.n_agents,
            "won": bool(self.won),
            "steps": [
                {
                    "state": self.states[t].tolist(),
                    "obs": self.obs[t].tolist(),
                    "actions": self.actions[t].tolist(),
                    "reward": float(self.rewards[t]),
                }
                for t in range(len(self))
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EpisodeRecord":
        steps = doc["steps"]
        n = int(doc["n_agents"])
        T = len(steps)
        rec = cls(
            task_id=str(doc["task_id"]),
            n_agents=n,
            states=np.array([s["state"] for s in steps], dtype=np.float64).reshape(T, -1),
            obs=np.array([s["obs"] for s in steps], dtype=np.float64).reshape(T, n, -1),
            actions=np.array([s["actions"] for s in steps], dtype=np.int64).reshape(T, n),
            rewards=np.array([s["reward"] for s in steps], dtype=np.float64),
            won=bool(doc.get("won", False)),
        )
        rec.validate()
        return rec

    def equals(self, other: "EpisodeRecord") -> bool:
        return (
            self.task_id == other.task_id
            and self.n_agents == other.n_agents
            and self.won == other.won
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("states", "obs", "actions", "rewards")
            )
        )


def save_dataset(episodes: Sequence[EpisodeRecord], path: str | Path) -> None:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "task_ids": sorted({ep.task_id for ep in episodes}),
        "obs_dim": E.OBS_DIM,
        "state_dim": E.STATE_DIM,
        "n_actions": E.N_ACTIONS,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ep in episodes:
            ep.validate()
            fh.write(json.dumps(ep.to_json(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[EpisodeRecord]:
    episodes = []
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise DatasetError(f"{path}:1: malformed header") from None
        if not isinstance(header, dict) or header.get("format") != FORMAT:
            raise DatasetError(f"{path}:1: not a {FORMAT} file")
        if header.get("version") != VERSION:
            raise DatasetError(f"{path}:1: unsupported dataset version {header.get('version')} (expected {VERSION})")
        if (header.get("obs_dim"), header.get("state_dim"), header.get("n_actions")) != (E.OBS_DIM, E.STATE_DIM, E.N_ACTIONS):
            raise DatasetError(f"{path}:1: incompatible dimensions in header")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                episodes.append(EpisodeRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed episode ({exc})") from None
    return episodes


def collect_episodes(
    config: E.TaskConfig, n_episodes: int, epsilon: float = 0.0, seed: int = 0
) -> list[EpisodeRecord]:
    """Roll out the scripted expert; episode ``k`` uses reset seed ``seed * 1_000_003 + k``."""
    rng = np.random.default_rng([seed, 1])
    episodes = []
    for k in range(n_episodes):
        state, obs = E.reset(config, seed * 1_000_003 + k)
        states, observations, actions, rewards = [], [], [], []
        done = False
        while not done:
            act = E.scripted_expert(state, obs, epsilon, rng)
            states.append(E.global_state(state))
            observations.append(obs)
            actions.append(act)
            reward, state, obs, done = E.step(state, act)
            rewards.append(reward)
        episodes.append(EpisodeRecord(
            config.task_id, config.n_agents, np.array(states), np.array(observations),
            np.array(actions, dtype=np.int64), np.array(rewards), bool(state.won),
        ))
    return episodes


# ---------------------------------------------------------------- segments

@dataclass(frozen=True)
class SkillSegment:
    agent_index: int
    start_time: int
    obs: np.ndarray  # (H, OBS_DIM)
    acts: np.ndarray  # (H,)
    start_state: np.ndarray


@dataclass
class SegmentBatch:
    """All agents' aligned H-step slices of one episode starting at ``start_time``."""

    task_id: str
    episode: int
    start_time: int
    obs: np.ndarray  # (n, H, OBS_DIM)
    acts: np.ndarray  # (n, H)
    mask: np.ndarray  # (n, H) 1 for real steps, 0 for padding
    start_state: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.obs.shape[1]

    @property
    def start_obs(self) -> np.ndarray:
        return self.obs[:, 0, :]

    @property
    def alive(self) -> np.ndarray:
        """Own-alive flag per agent and step, read from the observation."""
        return self.obs[:, :, 2] > 0.5

    def segment(self, i: int) -> SkillSegment:
        return SkillSegment(i, self.start_time, self.obs[i], self.acts[i], self.start_state)

    @property
    def segments(self) -> list[SkillSegment]:
        return [self.segment(i) for i in range(self.n_agents)]


def segment(episodes: Sequence[EpisodeRecord], H: int, drop_incomplete: bool = True) -> list[SegmentBatch]:
    if H < 1:
        raise ValueError(f"horizon must be at least 1, got {H}")
    out = []
    for k, ep in enumerate(episodes):
        T = len(ep)
        for t in range(0, T, H):
            end = t + H
            if end > T and drop_incomplete:
                break
            obs = ep.obs[t:min(end, T)].transpose(1, 0, 2)
            acts = ep.actions[t:min(end, T)].T
            mask = np.ones((ep.n_agents, obs.shape[1]))
            if end > T:
                pad = end - T
                obs = np.concatenate([obs, np.repeat(obs[:, -1:, :], pad, axis=1)], axis=1)
                acts = np.concatenate([acts, np.full((ep.n_agents, pad), E.STAY, dtype=np.int64)], axis=1)
                mask = np.concatenate([mask, np.zeros((ep.n_agents, pad))], axis=1)
            out.append(SegmentBatch(ep.task_id, k, t, obs.copy(), acts.copy(), mask, ep.states[t].copy()))
    return out


def sample_minibatch(batches: Sequence[SegmentBatch], size: int, rng: np.random.Generator) -> list[SegmentBatch]:
    if size > len(batches):
        raise ValueError(f"cannot sample {size} batches without replacement from {len(batches)}")
    idx = rng.choice(len(batches), size=size, replace=False)
    return [batches[i] for i in idx]


def check_compatible(datasets: Iterable[Sequence[EpisodeRecord]]) -> None:
    dims = {(ep.obs.shape[-1], ep.states.shape[-1]) for data in datasets for ep in data}
    if len(dims) > 1:
        raise DatasetError(f"incompatible observation/state dimensions across datasets: {sorted(dims)}")
