"""Two-phase offline training: value learning, then policy extraction.

Value phase, per iteration: sample a batch, regress each ``V_i`` onto the
``tau``-expectile of ``Q_bar_i(o_i, a_i)``, fit ``Q_tot`` to
``r + gamma * V_tot(o')`` (``V_i`` held fixed), then soft-update the targets.
Policy phase: advantage-weighted regression of each ``pi_i`` with the value
networks frozen.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from .cvf import CvfModel, Variant, masked_argmax
from .dataset import OfflineDataset, Transitions
from .numcore import Mlp, MlpSpec, expectile_loss

DIVERGENCE_LIMIT = 1e8
AWR_CLIP = 100.0
PRESETS = {
    "desk": {"hidden": 32, "cca_hidden": 16, "value_iters": 5000, "policy_iters": 2000},
    "paper": {"hidden": 256, "cca_hidden": 64, "value_iters": 5000, "policy_iters": 2000},
}
METRIC_COLUMNS = ("iter", "phase", "L_V_mean", "L_Q", "L_pi_mean", "eval_return_mean",
                  "eval_return_std")


class TrainingDivergedError(FloatingPointError):
    pass


class FingerprintMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.7
    beta: float = 1.0
    lr_value: float = 5e-4
    lr_policy: float = 5e-4
    batch_size: int = 128
    gamma: float = 0.99
    rho: float = 0.005
    value_iters: int = 5000
    policy_iters: int = 2000
    seed: int = 0
    variant: str = "cvf"
    hidden: int = 32
    cca_hidden: int = 16
    log_interval: int = 500
    eval_episodes: int = 32
    q_out_scale: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.batch_size < 1 or self.value_iters < 0 or self.policy_iters < 0:
            raise ValueError("batch_size must be positive and iteration counts non-negative")
        if self.log_interval < 1 or self.eval_episodes < 1:
            raise ValueError("log_interval and eval_episodes must be positive")
        if not self.q_out_scale >= 0.0:
            raise ValueError(f"q_out_scale must be non-negative, got {self.q_out_scale}")
        object.__setattr__(self, "variant", Variant.parse(self.variant).value)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_preset(cls, name: str | None = None, **overrides) -> "TrainConfig":
        name = name or os.environ.get("OMAC_PRESET", "desk")
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


class InSampleProbe:
    """Counts Q evaluations at actions other than the batch transition's."""

    def __init__(self):
        self.evaluations = 0
        self.violations = 0

    def record(self, agent, used, batch_actions):
        used = np.asarray(used)
        self.evaluations += used.size
        if batch_actions is None:
            self.violations += used.size
        else:
            self.violations += int(np.sum(used != np.asarray(batch_actions)[:, None]))


class PolicyModel:
    """Independent softmax policies ``pi_i(a | o_i)`` over unmasked actions."""

    def __init__(self, n_agents, n_actions, obs_dim, hidden=32, seed=0):
        self.n_agents, self.n_actions, self.obs_dim = int(n_agents), int(n_actions), int(obs_dim)
        self.hidden = int(hidden)
        seeds = np.random.SeedSequence([int(seed), 1]).generate_state(self.n_agents)
        self.nets = [Mlp(MlpSpec((self.obs_dim, self.hidden, self.hidden, self.n_actions),
                                 seed=int(s))) for s in seeds]

    def log_probs(self, i, obs_i, masks_i=None) -> np.ndarray:
        return _masked_log_softmax(self.nets[i](obs_i), masks_i)

    def probs(self, i, obs_i, masks_i=None) -> np.ndarray:
        return np.exp(self.log_probs(i, obs_i, masks_i))

    def act(self, joint_obs, masks, rng=None, greedy=True) -> tuple[int, ...]:
        """Decentralized action selection: agent ``i`` only sees ``o_i``."""
        joint_obs = np.asarray(joint_obs, dtype=np.float64)
        out = []
        for i in range(self.n_agents):
            m = None if masks is None else np.asarray(masks[i], dtype=bool)[None]
            if greedy:
                out.append(int(masked_argmax(self.nets[i](joint_obs[i][None]), m)[0]))
            else:
                p = self.probs(i, joint_obs[i][None], m)[0]
                out.append(int(rng.choice(self.n_actions, p=p / p.sum())))
        return tuple(out)

    def to_dict(self) -> dict:
        return {"n_agents": self.n_agents, "n_actions": self.n_actions, "obs_dim": self.obs_dim,
                "hidden": self.hidden, "nets": [net.to_dict() for net in self.nets]}

    @classmethod
    def from_dict(cls, payload: dict) -> "PolicyModel":
        policy = cls(payload["n_agents"], payload["n_actions"], payload["obs_dim"], payload["hidden"])
        policy.nets = [Mlp.from_dict(p) for p in payload["nets"]]
        return policy


class UniformPolicy:
    def __init__(self, n_agents, n_actions):
        self.n_agents, self.n_actions = n_agents, n_actions

    def act(self, joint_obs, masks, rng=None, greedy=False):
        return tuple(int(rng.choice(np.flatnonzero(masks[i]))) for i in range(self.n_agents))


class FixedPolicy:
    """Always plays the same joint action (useful for checks and tests)."""

    def __init__(self, joint_action):
        self.joint_action = tuple(int(a) for a in joint_action)

    def act(self, joint_obs, masks, rng=None, greedy=True):
        return self.joint_action


def _masked_log_softmax(logits, masks=None) -> np.ndarray:
    z = logits if masks is None else np.where(masks, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def value_step(model: CvfModel, batch: Transitions, config: TrainConfig) -> tuple[np.ndarray, float]:
    """One update of every ``V_i`` and then of the ``Q_tot`` side. Returns ``(L_V, L_Q)``."""
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    n = model.n_agents
    loss_v = np.full(n, np.nan)
    if model.variant is not Variant.CVF_MAXQ:
        for i in range(n):
            q_bar = model._gather(model.q_values(i, batch.obs[:, i], target=True), batch.act[:, i], i)
            net = model.nets[f"v{i}"]
            v, tape = net.forward(batch.obs[:, i])
            loss, dloss = expectile_loss(q_bar - v[:, 0], model.tau)
            loss_v[i] = loss.mean()
            grad, _ = net.backward(tape, (-dloss / B)[:, None])
            net.step(grad, config.lr_value)
    local = model.local_values(batch.obs, batch.mask)
    next_local = model.local_values(batch.next_obs, batch.next_mask, target=True)
    bootstrap = np.where(batch.done, 0.0,
                         model.v_tot(batch.next_obs, local_values=next_local, target=True))
    y = batch.rew + config.gamma * bootstrap
    qtot, cache = model.qtot_forward(batch.obs, batch.act, local)
    err = y - qtot
    loss_q = float(np.mean(err * err))
    for name, grad in model.qtot_backward(cache, -2.0 * err / B).items():
        model.nets[name].step(grad, config.lr_value)
    model.soft_update_targets(config.rho)
    return loss_v, loss_q


def advantages(model: CvfModel, i, obs_i, act_i, masks_i=None) -> np.ndarray:
    q = model.q_values(i, obs_i)
    qa = q[np.arange(len(act_i)), act_i]
    if model.variant is Variant.CVF_MAXQ:
        return qa - (q.max(axis=-1) if masks_i is None else np.where(masks_i, q, -np.inf).max(-1))
    return qa - model.v_local(i, obs_i)


def awr_loss(policy: PolicyModel, i, obs_i, act_i, masks_i, weights):
    """Weighted negative log-likelihood and its parameter gradient for agent ``i``."""
    net = policy.nets[i]
    logits, tape = net.forward(obs_i)
    logp = _masked_log_softmax(logits, masks_i)
    B = len(act_i)
    rows = np.arange(B)
    loss = float(np.mean(-weights * logp[rows, act_i]))
    p = np.exp(logp)
    dlogits = p * weights[:, None]
    dlogits[rows, act_i] -= weights
    grad, _ = net.backward(tape, dlogits / B)
    return loss, grad


def awr_weights(adv, beta) -> np.ndarray:
    return np.minimum(np.exp(np.minimum(beta * adv, math.log(AWR_CLIP))), AWR_CLIP)


def policy_step(policy: PolicyModel, model: CvfModel, batch: Transitions,
                config: TrainConfig) -> np.ndarray:
    """One AWR update per agent with the value networks frozen."""
    losses = np.empty(policy.n_agents)
    for i in range(policy.n_agents):
        adv = advantages(model, i, batch.obs[:, i], batch.act[:, i], batch.mask[:, i])
        w = awr_weights(adv, config.beta)
        losses[i], grad = awr_loss(policy, i, batch.obs[:, i], batch.act[:, i], batch.mask[:, i], w)
        policy.nets[i].step(grad, config.lr_policy)
    return losses


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: list

    @property
    def episodes(self) -> int:
        return len(self.returns)


def evaluate(policy, env, n_episodes: int = 32, seed: int = 0, greedy: bool = True) -> EvalResult:
    """Mean and std of undiscounted episode returns under decentralized execution."""
    children = np.random.SeedSequence(int(seed)).spawn(int(n_episodes))
    returns = []
    for child in children:
        rng = np.random.default_rng(child)
        state, obs = env.reset(rng)
        total, done = 0.0, False
        while not done:
            act = policy.act(obs, env.action_mask(state), rng, greedy)
            state, obs, reward, done = env.step(state, act, rng)
            total += reward
        returns.append(total)
    arr = np.array(returns)
    return EvalResult(float(arr.mean()) if len(arr) else float("nan"),
                      float(arr.std()) if len(arr) else float("nan"), returns)


def _as_transitions(data) -> Transitions:
    if isinstance(data, Transitions):
        return data
    if isinstance(data, OfflineDataset):
        return data.transitions()
    raise TypeError(f"expected an OfflineDataset or Transitions, got {type(data).__name__}")


def _guard(name, value, allow_nan=False):
    value = np.atleast_1d(value)
    if allow_nan:
        value = value[~np.isnan(value)]
    if not np.all(np.isfinite(value)):
        raise TrainingDivergedError(f"{name} became non-finite: {value}")
    if value.size and value.max() > DIVERGENCE_LIMIT:
        raise TrainingDivergedError(f"{name} exceeded {DIVERGENCE_LIMIT:g}: {value}")


def new_model(config: TrainConfig, env) -> CvfModel:
    return CvfModel(env.n_agents, env.n_actions, env.obs_dim, config.variant, config.tau,
                    config.rho, config.hidden, config.cca_hidden, seed=config.seed,
                    q_out_scale=config.q_out_scale)


def train_values(config: TrainConfig, data, env, probe=None, metrics=None) -> CvfModel:
    """Value phase only."""
    transitions = _as_transitions(data)
    model = new_model(config, env)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    model.probe = probe
    acc_v, acc_q, count = 0.0, 0.0, 0
    try:
        for it in range(1, config.value_iters + 1):
            idx = rng.integers(0, len(transitions), size=config.batch_size)
            loss_v, loss_q = value_step(model, transitions.take(idx), config)
            _guard("L_V", loss_v, allow_nan=True)
            _guard("L_Q", loss_q)
            acc_v += float(np.nanmean(loss_v)) if not np.all(np.isnan(loss_v)) else float("nan")
            acc_q += loss_q
            count += 1
            if metrics is not None and (it % config.log_interval == 0 or it == config.value_iters):
                metrics.append({"iter": it, "phase": "value", "L_V_mean": acc_v / count,
                                "L_Q": acc_q / count})
                acc_v, acc_q, count = 0.0, 0.0, 0
    finally:
        model.probe = None
    return model


def train_policy(config: TrainConfig, data, env, model: CvfModel, metrics=None) -> PolicyModel:
    transitions = _as_transitions(data)
    policy = PolicyModel(env.n_agents, env.n_actions, env.obs_dim, config.hidden, seed=config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    acc, count = 0.0, 0
    for it in range(1, config.policy_iters + 1):
        idx = rng.integers(0, len(transitions), size=config.batch_size)
        losses = policy_step(policy, model, transitions.take(idx), config)
        _guard("L_pi", losses)
        acc += float(losses.mean())
        count += 1
        if metrics is not None and (it % config.log_interval == 0 or it == config.policy_iters):
            res = evaluate(policy, env, config.eval_episodes, seed=config.seed)
            metrics.append({"iter": it, "phase": "policy", "L_pi_mean": acc / count,
                            "eval_return_mean": res.mean, "eval_return_std": res.std})
            acc, count = 0.0, 0
    return policy


def run(config: TrainConfig, dataset, env, probe=None):
    """Full training run. Returns ``(value model, policy, metrics rows)``."""
    if isinstance(dataset, OfflineDataset) and dataset.meta.get("fingerprint") not in (
            None, env.fingerprint):
        raise FingerprintMismatchError("dataset was generated from a different env")
    transitions = _as_transitions(dataset)
    metrics = []
    model = train_values(config, transitions, env, probe=probe, metrics=metrics)
    policy = train_policy(config, transitions, env, model, metrics=metrics)
    if config.policy_iters == 0:
        res = evaluate(policy, env, config.eval_episodes, seed=config.seed)
        metrics.append({"iter": 0, "phase": "policy", "eval_return_mean": res.mean,
                        "eval_return_std": res.std})
    return model, policy, metrics


def metrics_csv(rows) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        cells = []
        for col in METRIC_COLUMNS:
            val = row.get(col, "")
            cells.append(repr(float(val)) if isinstance(val, (float, np.floating)) else str(val))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
