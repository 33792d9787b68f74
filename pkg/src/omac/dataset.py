"""Offline datasets: generation, JSON Lines storage, subsampling, summaries.

On-disk layout (``.omd.jsonl``): one meta line, then one episode per line::

    {"format_version": "1", "fingerprint": ..., "env_config": {...}, ...}
    {"meta_idx": 0, "steps": [{"obs": [[...]], "act": [...], "rew": x, "done": b,
                               "mask": [[...]], "next_obs": [[...]], "state": k}, ...]}

``state`` is the task's integer state id, kept so the support of an
enumerable task can be recovered from the file alone.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import DecPomdp, make_env

FORMAT_VERSION = "1"
FILE_SUFFIX = ".omd.jsonl"
TIER_EPSILON = {"good": 0.1, "medium": 0.4, "poor": 1.0}


class DatasetFormatError(ValueError):
    pass


class DatasetValidationError(ValueError):
    pass


class FingerprintMismatchWarning(UserWarning):
    pass


@dataclass
class Step:
    obs: np.ndarray
    act: tuple
    rew: float
    done: bool
    mask: np.ndarray
    next_obs: np.ndarray
    state: int | None = None

    def __eq__(self, other):
        return (isinstance(other, Step) and self.act == other.act and self.rew == other.rew
                and self.done == other.done and self.state == other.state
                and np.array_equal(self.obs, other.obs) and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.next_obs, other.next_obs))

    def to_json(self) -> dict:
        out = {"obs": self.obs.tolist(), "act": list(self.act), "rew": self.rew,
               "done": self.done, "mask": self.mask.astype(int).tolist(),
               "next_obs": self.next_obs.tolist()}
        if self.state is not None:
            out["state"] = self.state
        return out


@dataclass
class EpisodeRecord:
    steps: list

    @property
    def ret(self) -> float:
        return float(sum(s.rew for s in self.steps))


@dataclass
class OfflineDataset:
    episodes: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.episodes)

    @property
    def n_steps(self) -> int:
        return sum(len(ep.steps) for ep in self.episodes)

    def env(self) -> DecPomdp:
        return make_env(self.meta["env_config"])

    def transitions(self) -> "Transitions":
        return Transitions.from_dataset(self)

    def content_hash(self) -> str:
        return hashlib.sha256(dumps(self).encode("utf-8")).hexdigest()


@dataclass
class Transitions:
    """Flat transition arrays used by the trainer."""

    obs: np.ndarray       # (N, n, d)
    act: np.ndarray       # (N, n) int
    rew: np.ndarray       # (N,)
    done: np.ndarray      # (N,) bool
    next_obs: np.ndarray  # (N, n, d)
    mask: np.ndarray      # (N, n, A) bool
    next_mask: np.ndarray  # (N, n, A) bool
    state: np.ndarray     # (N,) int, -1 when unknown

    def __len__(self):
        return len(self.rew)

    def take(self, idx) -> "Transitions":
        return Transitions(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def from_dataset(cls, dataset: OfflineDataset) -> "Transitions":
        steps = [s for ep in dataset.episodes for s in ep.steps]
        if not steps:
            raise ValueError("dataset has no transitions")
        next_masks = []
        for ep in dataset.episodes:
            for k, s in enumerate(ep.steps):
                nxt = ep.steps[k + 1].mask if k + 1 < len(ep.steps) else np.ones_like(s.mask)
                next_masks.append(nxt)
        return cls(
            obs=np.stack([s.obs for s in steps]),
            act=np.array([s.act for s in steps], dtype=np.int64),
            rew=np.array([s.rew for s in steps], dtype=np.float64),
            done=np.array([s.done for s in steps], dtype=bool),
            next_obs=np.stack([s.next_obs for s in steps]),
            mask=np.stack([s.mask for s in steps]).astype(bool),
            next_mask=np.stack(next_masks).astype(bool),
            state=np.array([-1 if s.state is None else s.state for s in steps], dtype=np.int64),
        )


def planner_policy(env: DecPomdp):
    """Greedy map ``state_id -> joint action`` from the full-support optimum."""
    from .env import enumerate_model
    from .oracle import support_q_star

    model = enumerate_model(env)
    res = support_q_star(model)
    return {sid: env.joint_action(res.greedy(s)) for s, sid in enumerate(model.ids)}


def behavior_description(tier: str) -> str:
    eps = TIER_EPSILON[tier]
    if eps >= 1.0:
        return "uniform random over available actions"
    return f"per-agent epsilon-greedy around the planner policy, epsilon={eps}"


def generate(env: DecPomdp, tier: str, n_episodes: int, seed: int) -> OfflineDataset:
    """Roll out the tier's behavior policy; each episode gets its own child seed."""
    if tier not in TIER_EPSILON:
        raise ValueError(f"unknown tier {tier!r}; choose from {sorted(TIER_EPSILON)}")
    if n_episodes < 0:
        raise ValueError("n_episodes must be non-negative")
    eps = TIER_EPSILON[tier]
    plan = planner_policy(env) if eps < 1.0 else None
    children = np.random.SeedSequence(int(seed)).spawn(int(n_episodes))
    episodes = [_rollout(env, plan, eps, np.random.default_rng(child)) for child in children]
    meta = {
        "format_version": FORMAT_VERSION, "fingerprint": env.fingerprint,
        "env_config": env.config, "tier": tier, "seed": int(seed),
        "behavior": behavior_description(tier), "n_episodes": int(n_episodes), "lineage": [],
    }
    return OfflineDataset(episodes, meta)


def _rollout(env, plan, eps, rng) -> EpisodeRecord:
    state, obs = env.reset(rng)
    steps = []
    while True:
        mask = env.action_mask(state)
        greedy = plan[env.state_id(state)] if plan is not None else None
        act = []
        for i in range(env.n_agents):
            legal = np.flatnonzero(mask[i])
            if greedy is None or rng.random() < eps:
                act.append(int(legal[rng.integers(len(legal))]))
            else:
                act.append(int(greedy[i]))
        nxt, next_obs, reward, done = env.step(state, act, rng)
        steps.append(Step(obs, tuple(act), reward, done, mask, next_obs, env.state_id(state)))
        if done:
            return EpisodeRecord(steps)
        state, obs = nxt, next_obs


def dumps(dataset: OfflineDataset) -> str:
    lines = [json.dumps(dataset.meta, sort_keys=True)]
    for ep in dataset.episodes:
        lines.append(json.dumps({"meta_idx": 0, "steps": [s.to_json() for s in ep.steps]},
                                sort_keys=True))
    return "\n".join(lines) + "\n"


def save(dataset: OfflineDataset, path) -> Path:
    path = Path(path)
    path.write_text(dumps(dataset), encoding="utf-8")
    return path


def load(path, env: DecPomdp | None = None) -> OfflineDataset:
    """Parse and validate a dataset file.

    Raises :class:`DatasetFormatError` (with the line number) on malformed
    input and :class:`DatasetValidationError` on illegal content. Warns when
    ``env`` is given and its fingerprint differs from the file's.
    """
    text = Path(path).read_text(encoding="utf-8")
    return loads(text, env=env)


def loads(text: str, env: DecPomdp | None = None) -> OfflineDataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("line 1: missing meta line")
    records = []
    for lineno, line in enumerate(lines, start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: {exc.msg}") from None
    meta = records[0]
    if not isinstance(meta, dict) or meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError("line 1: missing or unsupported format_version")
    expected = meta.get("n_episodes")
    if expected is not None and expected != len(records) - 1:
        raise DatasetFormatError(
            f"line {len(lines)}: expected {expected} episodes, found {len(records) - 1}")
    spec_env = make_env(meta["env_config"])
    if spec_env.fingerprint != meta.get("fingerprint"):
        raise DatasetValidationError("meta fingerprint does not match its env_config")
    if env is not None and env.fingerprint != meta["fingerprint"]:
        warnings.warn("dataset fingerprint does not match the given env",
                      FingerprintMismatchWarning, stacklevel=2)
    episodes = []
    for e, rec in enumerate(records[1:]):
        try:
            steps = [_parse_step(s) for s in rec["steps"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"line {e + 2}: malformed step ({exc})") from None
        _validate_episode(spec_env, e, steps)
        episodes.append(EpisodeRecord(steps))
    return OfflineDataset(episodes, meta)


def _parse_step(raw: dict) -> Step:
    return Step(
        obs=np.array(raw["obs"], dtype=np.float64),
        act=tuple(int(a) for a in raw["act"]),
        rew=float(raw["rew"]),
        done=bool(raw["done"]),
        mask=np.array(raw["mask"], dtype=bool),
        next_obs=np.array(raw["next_obs"], dtype=np.float64),
        state=raw.get("state"),
    )


def _validate_episode(env: DecPomdp, e: int, steps: list) -> None:
    if not steps:
        raise DatasetValidationError(f"episode {e}: no steps")
    shape_obs = (env.n_agents, env.obs_dim)
    for k, s in enumerate(steps):
        where = f"episode {e} step {k}"
        if s.obs.shape != shape_obs or s.next_obs.shape != shape_obs:
            raise DatasetValidationError(f"{where}: observation shape != {shape_obs}")
        if s.mask.shape != (env.n_agents, env.n_actions):
            raise DatasetValidationError(f"{where}: mask shape mismatch")
        if len(s.act) != env.n_agents:
            raise DatasetValidationError(f"{where}: joint action length mismatch")
        for i, a in enumerate(s.act):
            if not 0 <= a < env.n_actions or not s.mask[i, a]:
                raise DatasetValidationError(f"{where}: illegal action {a} for agent {i}")
        if not (np.all(np.isfinite(s.obs)) and math.isfinite(s.rew)):
            raise DatasetValidationError(f"{where}: non-finite values")
        if s.done != (k == len(steps) - 1):
            raise DatasetValidationError(f"{where}: done flag must be set on the last step only")


def subsample(dataset: OfflineDataset, ratio: float, seed: int) -> OfflineDataset:
    """Keep ``floor(ratio * N)`` whole episodes, chosen without replacement.

    Selected episodes keep their original order.
    """
    ratio = float(ratio)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    n = len(dataset)
    k = int(math.floor(ratio * n + 1e-9))
    if k < 1:
        raise ValueError(f"ratio {ratio} of {n} episodes selects nothing")
    rng = np.random.default_rng(int(seed))
    keep = np.sort(rng.choice(n, size=k, replace=False))
    meta = json.loads(json.dumps(dataset.meta))
    meta["lineage"] = meta.get("lineage", []) + [
        {"ratio": ratio, "seed": int(seed), "parent_episodes": n, "parent_hash": dataset.content_hash()}]
    meta["n_episodes"] = k
    return OfflineDataset([dataset.episodes[i] for i in keep], meta)


def exclude_joint_action(dataset: OfflineDataset, joint_action) -> OfflineDataset:
    """Drop every episode that ever plays ``joint_action``.

    Used to build datasets whose support leaves out a known optimum.
    """
    joint_action = tuple(int(a) for a in joint_action)
    keep = [ep for ep in dataset.episodes if all(s.act != joint_action for s in ep.steps)]
    meta = json.loads(json.dumps(dataset.meta))
    meta["lineage"] = meta.get("lineage", []) + [
        {"exclude": list(joint_action), "parent_episodes": len(dataset),
         "parent_hash": dataset.content_hash()}]
    meta["n_episodes"] = len(keep)
    return OfflineDataset(keep, meta)


@dataclass
class DatasetSummary:
    n_episodes: int
    n_steps: int
    mean_return: float
    action_histogram: np.ndarray  # (n_agents, n_actions)
    support: set  # {(state_id, joint_action)}


def summary(dataset: OfflineDataset) -> DatasetSummary:
    env = make_env(dataset.meta["env_config"]) if "env_config" in dataset.meta else None
    steps = [s for ep in dataset.episodes for s in ep.steps]
    if env is not None:
        hist = np.zeros((env.n_agents, env.n_actions), dtype=np.int64)
    else:
        hist = np.zeros((0, 0), dtype=np.int64)
    support = set()
    for s in steps:
        for i, a in enumerate(s.act):
            hist[i, a] += 1
        if s.state is not None:
            support.add((int(s.state), tuple(s.act)))
    returns = [ep.ret for ep in dataset.episodes]
    return DatasetSummary(len(dataset), len(steps), float(np.mean(returns)) if returns else 0.0,
                          hist, support)
