"""Skirmish: a small cooperative grid-combat Dec-POMDP.

Allies start in the left third of the grid and must destroy stationary
enemies placed in the right third. Enemies hit back at adjacent allies. All
allies share one team reward per step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

N_MAX = 10
E_MAX = 10
AGENT_HEALTH = 3

STAY, UP, DOWN, LEFT, RIGHT, ATTACK = range(6)
N_ACTIONS = 6
ACTION_NAMES = ("stay", "up", "down", "left", "right", "attack")
_MOVES = {STAY: (0, 0), UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0), ATTACK: (0, 0)}

SLOT = 4  # (dx, dy, health fraction, visible)
OBS_DIM = 3 + SLOT * (N_MAX + E_MAX)
STATE_DIM = 4 * (N_MAX + E_MAX) + 1


class ConfigError(ValueError):
    pass


class ActionError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    task_id: str
    grid_width: int = 10
    grid_height: int = 10
    n_agents: int = 3
    n_enemies: int = 3
    enemy_health: int = 3
    view_radius: int = 5
    max_steps: int = 40
    reward_mode: str = "dense"
    win_bonus: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.n_agents <= N_MAX:
            raise ConfigError(f"n_agents must lie in [1, {N_MAX}], got {self.n_agents}")
        if not 1 <= self.n_enemies <= E_MAX:
            raise ConfigError(f"n_enemies must lie in [1, {E_MAX}], got {self.n_enemies}")
        for name in ("grid_width", "grid_height", "enemy_health", "view_radius", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.reward_mode not in ("dense", "sparse"):
            raise ConfigError(f"reward_mode must be dense or sparse, got {self.reward_mode!r}")
        if self.grid_width < 3:
            raise ConfigError("grid_width must be at least 3")
        third = self.grid_width // 3
        if self.n_agents > third * self.grid_height or self.n_enemies > third * self.grid_height:
            raise ConfigError(f"{self.task_id}: more units than cells in a third of the grid")


TASKS: dict[str, TaskConfig] = {
    "g3": TaskConfig("g3", 10, 10, 3, 3, 3, 5, 30),
    "g5": TaskConfig("g5", 10, 10, 5, 5, 4, 5, 60),
    "g7": TaskConfig("g7", 12, 12, 7, 7, 3, 5, 70),
    "g10": TaskConfig("g10", 12, 12, 10, 10, 3, 5, 80),
    "g5v7": TaskConfig("g5v7", 10, 10, 5, 7, 3, 5, 70),
}


def get_task(task_id: str, sparse: bool = False, **overrides) -> TaskConfig:
    if task_id not in TASKS:
        raise ConfigError(f"unknown task {task_id!r}; known: {', '.join(TASKS)}")
    cfg = TASKS[task_id]
    if sparse:
        cfg = replace(cfg, reward_mode="sparse", win_bonus=20.0)
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


@dataclass
class EnvState:
    config: TaskConfig
    agent_pos: np.ndarray  # (n, 2) int (x, y)
    agent_health: np.ndarray  # (n,) int
    enemy_pos: np.ndarray  # (e, 2)
    enemy_health: np.ndarray  # (e,)
    t: int = 0

    @property
    def agent_alive(self) -> np.ndarray:
        return self.agent_health > 0

    @property
    def enemy_alive(self) -> np.ndarray:
        return self.enemy_health > 0

    @property
    def won(self) -> bool:
        return not self.enemy_alive.any()

    @property
    def done(self) -> bool:
        return self.won or not self.agent_alive.any() or self.t >= self.config.max_steps

    def copy(self) -> "EnvState":
        return EnvState(
            self.config, self.agent_pos.copy(), self.agent_health.copy(),
            self.enemy_pos.copy(), self.enemy_health.copy(), self.t,
        )


def _chebyshev(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b).max(axis=-1)


def reset(config: TaskConfig, episode_seed: int) -> tuple[EnvState, np.ndarray]:
    config.validate()
    rng = np.random.default_rng([config.seed, episode_seed])
    third = config.grid_width // 3
    h = config.grid_height
    left = rng.choice(third * h, size=config.n_agents, replace=False)
    right = rng.choice(third * h, size=config.n_enemies, replace=False)
    agent_pos = np.stack([left // h, left % h], axis=1)
    right = np.sort(right)  # enemies indexed front (left) to back
    enemy_pos = np.stack([config.grid_width - third + right // h, right % h], axis=1)
    state = EnvState(
        config,
        agent_pos.astype(np.int64),
        np.full(config.n_agents, AGENT_HEALTH, dtype=np.int64),
        enemy_pos.astype(np.int64),
        np.full(config.n_enemies, config.enemy_health, dtype=np.int64),
        0,
    )
    return state, observe(state)


def global_state(state: EnvState) -> np.ndarray:
    """Fixed-width state vector: padded ally and enemy slots plus time fraction."""
    cfg = state.config
    out = np.zeros(STATE_DIM)
    scale = np.array([cfg.grid_width - 1, cfg.grid_height - 1], dtype=np.float64)
    allies = out[:4 * N_MAX].reshape(N_MAX, 4)
    enemies = out[4 * N_MAX:4 * (N_MAX + E_MAX)].reshape(E_MAX, 4)
    for slots, pos, health, full in (
        (allies, state.agent_pos, state.agent_health, AGENT_HEALTH),
        (enemies, state.enemy_pos, state.enemy_health, cfg.enemy_health),
    ):
        alive = health > 0
        k = len(health)
        slots[:k, 0:2] = np.where(alive[:, None], pos / scale, 0.0)
        slots[:k, 2] = np.where(alive, health / full, 0.0)
        slots[:k, 3] = alive
    out[-1] = state.t / cfg.max_steps
    return out


def observe(state: EnvState) -> np.ndarray:
    """Per-agent observations, shape (n_agents, OBS_DIM); dead agents see zeros.

    Slots are compacted: enemy slot j holds the j-th living enemy in index
    order (so slot 0 is always the focus-fire target), and ally slots hold
    the other living allies in index order. Units beyond the view radius
    keep their slot but are zeroed with visible flag 0.
    """
    cfg = state.config
    r = cfg.view_radius
    n = cfg.n_agents
    obs = np.zeros((n, OBS_DIM))
    alive = state.agent_health > 0
    me = state.agent_pos
    obs[:, 0:2] = me / np.array([cfg.grid_width - 1, cfg.grid_height - 1], dtype=np.float64)
    obs[:, 2] = 1.0
    allies = obs[:, 3:3 + SLOT * N_MAX].reshape(n, N_MAX, SLOT)
    enemies = obs[:, 3 + SLOT * N_MAX:].reshape(n, E_MAX, SLOT)
    living_allies = np.flatnonzero(alive)
    living_enemies = np.flatnonzero(state.enemy_health > 0)
    width = max(len(living_allies) - 1, 0)
    others = np.zeros((n, width), dtype=np.int64)
    for i in range(n):
        others[i] = living_allies[living_allies != i][:width]  # dead agents are zeroed below anyway
    for slots, idx, pos, health, full in (
        (allies, others, state.agent_pos, state.agent_health, AGENT_HEALTH),
        (enemies, np.broadcast_to(living_enemies, (n, len(living_enemies))), state.enemy_pos, state.enemy_health, cfg.enemy_health),
    ):
        k = idx.shape[1]
        if k == 0:
            continue
        rel = pos[idx] - me[:, None, :]
        visible = np.abs(rel).max(axis=2) <= r
        slots[:, :k, 0:2] = np.where(visible[:, :, None], rel / r, 0.0)
        slots[:, :k, 2] = np.where(visible, health[idx] / full, 0.0)
        slots[:, :k, 3] = visible
    obs[~alive] = 0.0
    return obs


def _nearest(origin: np.ndarray, positions: np.ndarray, alive: np.ndarray, limit: int) -> int:
    """Index of the nearest living unit within Chebyshev ``limit``; ties to the lowest index; -1 if none."""
    best, best_d = -1, limit + 1
    for j in range(len(positions)):
        if alive[j]:
            d = int(_chebyshev(positions[j], origin))
            if d < best_d:
                best, best_d = j, d
    return best


def step(state: EnvState, actions) -> tuple[float, EnvState, np.ndarray, bool]:
    cfg = state.config
    if state.done:
        raise ActionError("step called on a terminal state")
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape != (cfg.n_agents,):
        raise ActionError(f"expected {cfg.n_agents} actions, got shape {actions.shape}")
    if ((actions < 0) | (actions >= N_ACTIONS)).any():
        raise ActionError(f"action ids must lie in [0, {N_ACTIONS}), got {actions.tolist()}")
    alive = state.agent_alive
    if (actions[~alive] != STAY).any():
        raise ActionError("dead agents may only take the no-op action")

    s = state.copy()
    occupied = {tuple(p) for p, a in zip(s.agent_pos, alive) if a}
    occupied |= {tuple(p) for p, a in zip(s.enemy_pos, s.enemy_alive) if a}
    for i in range(cfg.n_agents):
        if not alive[i] or actions[i] in (STAY, ATTACK):
            continue
        dx, dy = _MOVES[int(actions[i])]
        x, y = int(s.agent_pos[i, 0]) + dx, int(s.agent_pos[i, 1]) + dy
        if not (0 <= x < cfg.grid_width and 0 <= y < cfg.grid_height) or (x, y) in occupied:
            continue
        occupied.discard(tuple(s.agent_pos[i]))
        occupied.add((x, y))
        s.agent_pos[i] = (x, y)

    damage = np.zeros(cfg.n_enemies, dtype=np.int64)
    enemy_alive = s.enemy_alive
    for i in range(cfg.n_agents):
        if alive[i] and actions[i] == ATTACK:
            j = _nearest(s.agent_pos[i], s.enemy_pos, enemy_alive, cfg.view_radius)
            if j >= 0 and _chebyshev(s.enemy_pos[j], s.agent_pos[i]) <= 1:
                damage[j] += 1
    dealt = int(np.minimum(damage, s.enemy_health).sum())
    s.enemy_health = np.maximum(s.enemy_health - damage, 0)

    hits = np.zeros(cfg.n_agents, dtype=np.int64)
    for j in range(cfg.n_enemies):
        if damage[j] > 0 and s.enemy_health[j] > 0:
            i = _nearest(s.enemy_pos[j], s.agent_pos, alive, 1)
            if i >= 0:
                hits[i] += 1
    s.agent_health = np.maximum(s.agent_health - hits, 0)
    s.t += 1

    won = s.won
    if cfg.reward_mode == "dense":
        reward = float(dealt) + (cfg.win_bonus if won else 0.0)
    else:
        reward = cfg.win_bonus if won else 0.0
    return reward, s, observe(s), s.done


def scripted_expert(state: EnvState, observations=None, epsilon: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Focus-fire controller: every agent goes after the lowest-index living enemy.

    Agents attack whenever an enemy is adjacent, otherwise step towards the
    target, closing the horizontal gap first. A blocked preferred step falls back to
    the other axis, then to a sidestep. With probability ``epsilon`` a living
    agent's action is replaced by a uniformly random one.
    """
    cfg = state.config
    actions = np.zeros(cfg.n_agents, dtype=np.int64)
    alive = state.agent_alive
    targets = np.flatnonzero(state.enemy_alive)
    if len(targets):
        target = state.enemy_pos[targets[0]]
        living_enemies = state.enemy_pos[targets]
        occupied = {tuple(p) for p, a in zip(state.agent_pos, alive) if a}
        occupied |= {tuple(p) for p, a in zip(state.enemy_pos, state.enemy_alive) if a}
        for i in range(cfg.n_agents):
            if not alive[i]:
                continue
            if _chebyshev(living_enemies, state.agent_pos[i]).min() <= 1:
                actions[i] = ATTACK
            else:
                actions[i] = _approach(state.agent_pos[i], target, occupied, cfg)
    if epsilon > 0.0:
        if rng is None:
            raise ValueError("a random generator is required when epsilon > 0")
        draws = rng.random(cfg.n_agents)
        random_actions = rng.integers(0, N_ACTIONS, size=cfg.n_agents)
        noisy = (draws < epsilon) & alive
        actions = np.where(noisy, random_actions, actions)
    return actions


def _approach(me: np.ndarray, target: np.ndarray, occupied: set, cfg: TaskConfig) -> int:
    dx, dy = int(target[0] - me[0]), int(target[1] - me[1])
    if max(abs(dx), abs(dy)) <= 1:
        return ATTACK
    horizontal = RIGHT if dx > 0 else LEFT
    vertical = DOWN if dy > 0 else UP
    prefs: list[int] = []
    if abs(dx) > 1:
        prefs.append(horizontal)
    if abs(dy) > 1:
        prefs.append(vertical)
    if abs(dx) <= 1:
        prefs += [horizontal] if dx else [LEFT, RIGHT]
    if abs(dy) <= 1:
        prefs += [vertical] if dy else [UP, DOWN]
    for a in prefs:
        mx, my = _MOVES[a]
        x, y = int(me[0]) + mx, int(me[1]) + my
        if 0 <= x < cfg.grid_width and 0 <= y < cfg.grid_height and (x, y) not in occupied:
            return a
    return STAY


class SkirmishEnv:
    """Stateful convenience wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, config: TaskConfig):
        config.validate()
        self.config = config
        self.state: EnvState | None = None

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    def reset(self, episode_seed: int) -> np.ndarray:
        self.state, obs = reset(self.config, episode_seed)
        return obs

    def step(self, actions) -> tuple[float, np.ndarray, bool]:
        reward, self.state, obs, done = step(self.state, actions)
        return reward, obs, done

    def global_state(self) -> np.ndarray:
        return global_state(self.state)
