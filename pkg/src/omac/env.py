"""Cooperative Dec-POMDP tasks.

Every task exposes its dynamics as an explicit transition distribution, so the
sampling path (``reset``/``step``) and the enumeration path
(``enumerate_model``) read the same source of truth.

Built-in tasks
--------------
- ``MatrixGame``: a one-shot cooperative game over a payoff tensor. Agent ``i``
  always observes the one-hot vector of its own index.
- ``GridSpread``: agents move on a ``width x height`` grid with actions
  ``stay, up, down, left, right`` (moves off the grid are masked). The shared
  reward is ``-0.05`` every step, plus the number of landmarks covered by at
  least one agent on the final step.
- ``TabularDecPomdp``: explicit tables, mainly for tests and oracles.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass

import numpy as np

STEP_PENALTY = 0.05
DEFAULT_ENUM_CAP = 10**6
GRID_MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))  # stay, up, down, left, right


class MaskedActionError(ValueError):
    """A joint action uses an index that is out of range or masked."""


class EnumerationTooLargeError(RuntimeError):
    pass


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class DecPomdp:
    """Base class for cooperative tasks with a shared reward.

    Subclasses implement ``initial_distribution``, ``transitions``,
    ``observe``, ``action_mask`` and ``state_id``. ``transitions`` returns a
    list of ``(prob, next_state, reward, done)``.
    """

    n_agents: int
    n_actions: int
    obs_dim: int
    gamma: float
    horizon: int
    enumerable: bool = True
    config: dict

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.config)

    @property
    def joint_shape(self) -> tuple[int, ...]:
        return (self.n_actions,) * self.n_agents

    @property
    def n_joint_actions(self) -> int:
        return self.n_actions ** self.n_agents

    def joint_index(self, joint_action) -> int:
        return int(np.ravel_multi_index(tuple(int(a) for a in joint_action), self.joint_shape))

    def joint_action(self, index: int) -> tuple[int, ...]:
        return tuple(int(a) for a in np.unravel_index(int(index), self.joint_shape))

    def reset(self, seed):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dist = self.initial_distribution()
        probs = np.array([p for p, _ in dist])
        state = dist[_sample_index(rng, probs)][1]
        return state, self.observe(state)

    def check_action(self, state, joint_action) -> tuple[int, ...]:
        joint_action = tuple(int(a) for a in joint_action)
        if len(joint_action) != self.n_agents:
            raise MaskedActionError(
                f"joint action has {len(joint_action)} entries, expected {self.n_agents}")
        mask = self.action_mask(state)
        for i, a in enumerate(joint_action):
            if not 0 <= a < self.n_actions or not mask[i, a]:
                raise MaskedActionError(f"agent {i} action {a} is masked in state {state!r}")
        return joint_action

    def step(self, state, joint_action, rng):
        """Sample a transition. Returns ``(next_state, obs, reward, done)``."""
        joint_action = self.check_action(state, joint_action)
        outcomes = self.transitions(state, joint_action)
        k = _sample_index(rng, np.array([o[0] for o in outcomes]))
        _, nxt, reward, done = outcomes[k]
        return nxt, self.observe(nxt), float(reward), bool(done)

    def describe(self) -> dict:
        return {
            "n_agents": self.n_agents, "actions_per_agent": self.n_actions,
            "obs_dim": self.obs_dim, "gamma": self.gamma, "horizon": self.horizon,
            "state_count": getattr(self, "state_count", "sampled"),
        }


def _sample_index(rng, probs) -> int:
    if len(probs) == 1:
        return 0
    return int(rng.choice(len(probs), p=probs / probs.sum()))


class MatrixGame(DecPomdp):
    """One-step cooperative game; agent ``i`` observes the one-hot of ``i``.

    Axes may differ in length: every agent gets ``max(payoff.shape)`` action
    slots and the slots beyond its own axis are masked.
    """

    def __init__(self, payoff, gamma: float = 0.99):
        payoff = np.asarray(payoff, dtype=np.float64)
        if payoff.ndim < 1 or payoff.size == 0:
            raise ValueError(f"payoff needs one non-empty axis per agent, got {payoff.shape}")
        if not np.all(np.isfinite(payoff)):
            raise ValueError("payoff entries must be finite")
        self.payoff = payoff
        self.n_agents = payoff.ndim
        self.n_actions = max(payoff.shape)
        self._mask = np.arange(self.n_actions)[None, :] < np.array(payoff.shape)[:, None]
        self.obs_dim = self.n_agents
        self.gamma = _check_gamma(gamma)
        self.horizon = 1
        self.state_count = 1
        self.config = {"kind": "matrix", "payoff": payoff.tolist(), "gamma": self.gamma}

    def initial_distribution(self):
        return [(1.0, 0)]

    def transitions(self, state, joint_action):
        return [(1.0, 1, float(self.payoff[tuple(joint_action)]), True)]

    def observe(self, state) -> np.ndarray:
        return np.eye(self.n_agents)

    def action_mask(self, state) -> np.ndarray:
        return self._mask.copy()

    def state_id(self, state) -> int:
        return int(state)


class GridSpread(DecPomdp):
    """Cover-the-landmarks task.

    State is ``(t, positions)`` with ``positions`` a tuple of ``(x, y)``.
    Observation of agent ``i``: one-hot of its cell, ``t / horizon``, then a
    ``(2r+1)^2`` window around it with a landmark channel and an other-agent
    channel (cells off the grid read as zero).
    """

    n_actions = len(GRID_MOVES)

    def __init__(self, width, height, n_agents, n_landmarks, horizon, partial_obs_radius=1,
                 landmarks=None, starts=None, layout_seed=0, gamma=0.99):
        width, height, n_agents, n_landmarks = int(width), int(height), int(n_agents), int(n_landmarks)
        if min(width, height, n_agents, horizon) < 1 or n_landmarks < 0 or partial_obs_radius < 0:
            raise ValueError("grid sizes, agent count and horizon must be positive")
        if width * height < n_agents + n_landmarks:
            raise ValueError(
                f"{width}x{height} grid cannot hold {n_agents} agents and {n_landmarks} landmarks")
        self.width, self.height = width, height
        self.n_agents, self.n_landmarks = n_agents, n_landmarks
        self.horizon = int(horizon)
        self.radius = int(partial_obs_radius)
        self.gamma = _check_gamma(gamma)
        n_cells = width * height
        if landmarks is None:
            rng = np.random.default_rng(layout_seed)
            cells = sorted(rng.choice(n_cells, size=n_landmarks, replace=False).tolist())
            landmarks = [self._xy(c) for c in cells]
        self.landmarks = tuple(tuple(int(v) for v in lm) for lm in landmarks)
        if len(self.landmarks) != n_landmarks or len(set(self.landmarks)) != n_landmarks:
            raise ValueError("landmarks must be distinct and match n_landmarks")
        for lm in self.landmarks:
            self._check_cell(lm)
        if starts is not None:
            starts = tuple(tuple(int(v) for v in p) for p in starts)
            if len(starts) != n_agents:
                raise ValueError("one start cell per agent required")
            for p in starts:
                self._check_cell(p)
        self.starts = starts
        self.obs_dim = n_cells + 1 + 2 * (2 * self.radius + 1) ** 2
        self.state_count = n_cells ** n_agents * self.horizon
        self.config = {
            "kind": "grid", "width": width, "height": height, "n_agents": n_agents,
            "n_landmarks": n_landmarks, "horizon": self.horizon,
            "partial_obs_radius": self.radius, "landmarks": [list(lm) for lm in self.landmarks],
            "starts": None if starts is None else [list(p) for p in starts], "gamma": self.gamma,
        }

    def _xy(self, cell: int) -> tuple[int, int]:
        return (cell % self.width, cell // self.width)

    def _cell(self, xy) -> int:
        return xy[1] * self.width + xy[0]

    def _check_cell(self, xy):
        if not (0 <= xy[0] < self.width and 0 <= xy[1] < self.height):
            raise ValueError(f"cell {xy} lies outside the grid")

    def initial_distribution(self):
        if self.starts is not None:
            return [(1.0, (0, self.starts))]
        free = [self._xy(c) for c in range(self.width * self.height)
                if self._xy(c) not in self.landmarks]
        placements = list(itertools.permutations(free, self.n_agents))
        return [(1.0 / len(placements), (0, p)) for p in placements]

    def action_mask(self, state) -> np.ndarray:
        _, positions = state
        mask = np.ones((self.n_agents, self.n_actions), dtype=bool)
        for i, (x, y) in enumerate(positions):
            for a, (dx, dy) in enumerate(GRID_MOVES):
                mask[i, a] = 0 <= x + dx < self.width and 0 <= y + dy < self.height
        return mask

    def covered(self, positions) -> int:
        occupied = set(positions)
        return sum(lm in occupied for lm in self.landmarks)

    def transitions(self, state, joint_action):
        t, positions = state
        nxt = tuple((x + GRID_MOVES[a][0], y + GRID_MOVES[a][1])
                    for (x, y), a in zip(positions, joint_action))
        done = t + 1 >= self.horizon
        reward = -STEP_PENALTY + (self.covered(nxt) if done else 0.0)
        return [(1.0, (t + 1, nxt), reward, done)]

    def observe(self, state) -> np.ndarray:
        t, positions = state
        r = self.radius
        side = 2 * r + 1
        n_cells = self.width * self.height
        obs = np.zeros((self.n_agents, self.obs_dim))
        for i, (x, y) in enumerate(positions):
            obs[i, self._cell((x, y))] = 1.0
            obs[i, n_cells] = t / self.horizon
            others = {p for j, p in enumerate(positions) if j != i}
            base = n_cells + 1
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    k = (dy + r) * side + (dx + r)
                    cell = (x + dx, y + dy)
                    obs[i, base + k] = float(cell in self.landmarks)
                    obs[i, base + side * side + k] = float(cell in others)
        return obs

    def state_id(self, state) -> int:
        t, positions = state
        n_cells = self.width * self.height
        idx = t
        for p in positions:
            idx = idx * n_cells + self._cell(p)
        return int(idx)


class TabularDecPomdp(DecPomdp):
    """Dec-POMDP given by explicit tables.

    ``transition`` has shape ``(S, JA, S + 1)``; the last column is the
    terminal outcome. ``reward`` has shape ``(S, JA)``, ``obs`` ``(S, n, d)``
    and ``masks`` ``(S, n, A)``.
    """

    def __init__(self, transition, reward, obs, masks=None, initial=None, n_agents=1,
                 gamma=0.99, horizon=100):
        transition = np.asarray(transition, dtype=np.float64)
        reward = np.asarray(reward, dtype=np.float64)
        obs = np.asarray(obs, dtype=np.float64)
        n_states, n_joint = reward.shape
        self.n_agents = int(n_agents)
        self.n_actions = int(round(n_joint ** (1.0 / self.n_agents)))
        if self.n_actions ** self.n_agents != n_joint:
            raise ValueError("joint action count is not a perfect power of n_agents")
        if transition.shape != (n_states, n_joint, n_states + 1):
            raise ValueError(f"transition must have shape {(n_states, n_joint, n_states + 1)}")
        if np.any(transition < 0) or not np.allclose(transition.sum(-1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("each transition row must be a distribution (sum 1 within 1e-9)")
        if not np.all(np.isfinite(reward)):
            raise ValueError("rewards must be finite")
        if obs.shape[:2] != (n_states, self.n_agents):
            raise ValueError("obs must have shape (S, n_agents, obs_dim)")
        masks = (np.ones((n_states, self.n_agents, self.n_actions), dtype=bool)
                 if masks is None else np.asarray(masks, dtype=bool))
        if not masks.any(axis=-1).all():
            raise ValueError("every state needs at least one available action per agent")
        initial = np.eye(n_states)[0] if initial is None else np.asarray(initial, dtype=np.float64)
        self.P, self.R, self.obs_table, self.masks, self.initial = transition, reward, obs, masks, initial
        self.obs_dim = obs.shape[2]
        self.gamma = _check_gamma(gamma)
        self.horizon = int(horizon)
        self.state_count = n_states
        self.config = {
            "kind": "tabular", "transition": transition.tolist(), "reward": reward.tolist(),
            "obs": obs.tolist(), "masks": masks.astype(int).tolist(), "initial": initial.tolist(),
            "n_agents": self.n_agents, "gamma": self.gamma, "horizon": self.horizon,
        }

    def initial_distribution(self):
        return [(float(p), s) for s, p in enumerate(self.initial) if p > 0]

    def transitions(self, state, joint_action):
        ja = self.joint_index(joint_action)
        row = self.P[state, ja]
        terminal = self.state_count
        return [(float(row[s]), -1 if s == terminal else s, float(self.R[state, ja]), s == terminal)
                for s in np.flatnonzero(row)]

    def observe(self, state) -> np.ndarray:
        if state == -1:
            return np.zeros((self.n_agents, self.obs_dim))
        return self.obs_table[state].copy()

    def action_mask(self, state) -> np.ndarray:
        return self.masks[state].copy()

    def state_id(self, state) -> int:
        return int(state)


def _check_gamma(gamma) -> float:
    gamma = float(gamma)
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return gamma


def make_matrix_game(payoff, gamma: float = 0.99) -> MatrixGame:
    return MatrixGame(payoff, gamma=gamma)


def make_grid_env(width, height, n_agents, n_landmarks, horizon, partial_obs_radius=1,
                  **kwargs) -> GridSpread:
    return GridSpread(width, height, n_agents, n_landmarks, horizon, partial_obs_radius, **kwargs)


def make_env(config: dict | str) -> DecPomdp:
    """Build a task from a JSON-compatible config (a dict or a JSON string)."""
    if isinstance(config, str):
        config = json.loads(config)
    config = dict(config)
    kind = config.pop("kind", None)
    if kind == "matrix":
        return MatrixGame(config["payoff"], gamma=config.get("gamma", 0.99))
    if kind == "grid":
        return GridSpread(**config)
    if kind == "tabular":
        return TabularDecPomdp(**config)
    raise ValueError(f"unknown env kind {kind!r}")


@dataclass
class TabularModel:
    """Complete tables of an enumerable task.

    ``next_state``/``next_prob``/``reward``/``done`` have shape
    ``(S, JA, K)`` where ``K`` is the largest branching factor; padding
    entries have probability zero. Terminal outcomes use ``next_state == -1``.
    """

    states: list
    ids: list
    index: dict
    next_state: np.ndarray
    next_prob: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    masks: np.ndarray
    initial: np.ndarray
    n_agents: int
    n_actions: int
    gamma: float
    env: DecPomdp

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_joint_actions(self) -> int:
        return self.n_actions ** self.n_agents

    def legal_joint(self, s: int) -> np.ndarray:
        """Boolean vector over joint actions legal under the masks of state ``s``."""
        legal = self.masks[s][0]
        for i in range(1, self.n_agents):
            legal = np.logical_and.outer(legal, self.masks[s][i])
        return np.asarray(legal).ravel()


def enumerate_model(env: DecPomdp, cap: int = DEFAULT_ENUM_CAP) -> TabularModel:
    """Breadth-first enumeration of every decision state reachable from the start."""
    if not getattr(env, "enumerable", True) or not isinstance(getattr(env, "state_count", None), int):
        raise EnumerationTooLargeError(f"{type(env).__name__} is sample-only")
    if env.state_count * env.n_joint_actions > cap:
        raise EnumerationTooLargeError(
            f"{env.state_count} states x {env.n_joint_actions} joint actions exceeds cap {cap}")
    states, index, queue = [], {}, []

    def visit(state):
        sid = env.state_id(state)
        if sid not in index:
            index[sid] = len(states)
            states.append(state)
            queue.append(state)
        return index[sid]

    init = [(p, visit(s)) for p, s in env.initial_distribution()]
    rows = {}
    head = 0
    joint = list(itertools.product(range(env.n_actions), repeat=env.n_agents))
    while head < len(queue):
        state = queue[head]
        head += 1
        mask = env.action_mask(state)
        per_action = []
        for ja in joint:
            if not all(mask[i, a] for i, a in enumerate(ja)):
                per_action.append([])
                continue
            outs = []
            for p, nxt, r, d in env.transitions(state, ja):
                outs.append((p, -1 if d else visit(nxt), r, d))
            per_action.append(outs)
        rows[env.state_id(state)] = (mask, per_action)
        if len(states) * len(joint) > cap:
            raise EnumerationTooLargeError(f"enumeration exceeded cap {cap}")
    n_s, n_ja = len(states), len(joint)
    branch = max([len(o) for _, pa in rows.values() for o in pa] + [1])
    next_state = np.full((n_s, n_ja, branch), -1, dtype=np.int64)
    next_prob = np.zeros((n_s, n_ja, branch))
    reward = np.zeros((n_s, n_ja, branch))
    done = np.ones((n_s, n_ja, branch), dtype=bool)
    masks = np.zeros((n_s, env.n_agents, env.n_actions), dtype=bool)
    ids = [env.state_id(s) for s in states]
    for s, sid in enumerate(ids):
        mask, per_action = rows[sid]
        masks[s] = mask
        for ja, outs in enumerate(per_action):
            for k, (p, nxt, r, d) in enumerate(outs):
                next_state[s, ja, k], next_prob[s, ja, k] = nxt, p
                reward[s, ja, k], done[s, ja, k] = r, d
    initial = np.zeros(n_s)
    for p, s in init:
        initial[s] += p
    return TabularModel(states, ids, {sid: k for k, sid in enumerate(ids)}, next_state, next_prob,
                        reward, done, masks, initial, env.n_agents, env.n_actions, env.gamma, env)
