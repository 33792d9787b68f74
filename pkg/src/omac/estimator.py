"""scikit-learn style wrapper around the two-phase trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import OfflineDataset, load
from .trainer import TrainConfig, evaluate, run


def check_joint_obs(X, n_agents: int, obs_dim: int) -> np.ndarray:
    """Coerce joint observations to ``(B, n_agents, obs_dim)`` float64.

    A single joint observation ``(n_agents, obs_dim)`` is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (n_agents, obs_dim):
        raise ValueError(f"expected joint observations of shape (B, {n_agents}, {obs_dim}), "
                         f"got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("observations contain NaN or inf")
    return X


def check_masks(masks, batch: int, n_agents: int, n_actions: int) -> np.ndarray | None:
    if masks is None:
        return None
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (batch, n_agents, n_actions))
    if masks.shape != (batch, n_agents, n_actions):
        raise ValueError(f"expected masks of shape ({batch}, {n_agents}, {n_actions}), "
                         f"got {masks.shape}")
    if not masks.any(axis=-1).all():
        raise ValueError("every action is masked for some agent")
    return masks


class OMAC(BaseEstimator):
    """Offline multi-agent learner.

    ``fit`` takes an :class:`OfflineDataset` (or a path to one) and learns the
    factorized values and then the per-agent policies. ``predict`` maps joint
    observations to joint actions, each agent looking only at its own row.

    Parameters mirror :class:`TrainConfig`; ``random_state`` is its ``seed``.
    """

    def __init__(self, variant="cvf", tau=0.7, beta=1.0, lr_value=5e-4, lr_policy=5e-4,
                 batch_size=128, gamma=0.99, rho=0.005, value_iters=5000, policy_iters=2000,
                 hidden=32, cca_hidden=16, q_out_scale=0.01, log_interval=500,
                 eval_episodes=32, random_state=0):
        self.variant = variant
        self.tau = tau
        self.beta = beta
        self.lr_value = lr_value
        self.lr_policy = lr_policy
        self.batch_size = batch_size
        self.gamma = gamma
        self.rho = rho
        self.value_iters = value_iters
        self.policy_iters = policy_iters
        self.hidden = hidden
        self.cca_hidden = cca_hidden
        self.q_out_scale = q_out_scale
        self.log_interval = log_interval
        self.eval_episodes = eval_episodes
        self.random_state = random_state

    def to_config(self) -> TrainConfig:
        params = self.get_params()
        seed = params.pop("random_state")
        return TrainConfig(seed=0 if seed is None else int(seed), **params)

    def fit(self, X, y=None, env=None):
        """Train on an offline dataset. ``y`` is ignored (rewards live in ``X``)."""
        dataset = load(X) if not isinstance(X, OfflineDataset) else X
        config = self.to_config()
        env = dataset.env() if env is None else env
        self.model_, self.policy_, self.metrics_ = run(config, dataset, env)
        self.env_ = env
        self.n_agents_, self.n_actions_, self.obs_dim_ = env.n_agents, env.n_actions, env.obs_dim
        return self

    def predict_proba(self, X, masks=None) -> np.ndarray:
        """Per-agent action probabilities, shape ``(B, n_agents, n_actions)``."""
        check_is_fitted(self, "policy_")
        X = check_joint_obs(X, self.n_agents_, self.obs_dim_)
        masks = check_masks(masks, len(X), self.n_agents_, self.n_actions_)
        return np.stack([self.policy_.probs(i, X[:, i], None if masks is None else masks[:, i])
                         for i in range(self.n_agents_)], axis=1)

    def predict(self, X, masks=None) -> np.ndarray:
        """Greedy decentralized joint actions, shape ``(B, n_agents)``."""
        proba = self.predict_proba(X, masks)
        return np.argmax(proba, axis=-1)

    def value(self, X, masks=None) -> np.ndarray:
        """``V_tot`` of each joint observation."""
        check_is_fitted(self, "model_")
        X = check_joint_obs(X, self.n_agents_, self.obs_dim_)
        masks = check_masks(masks, len(X), self.n_agents_, self.n_actions_)
        return self.model_.v_tot(X, masks=masks)

    def score(self, X=None, y=None, n_episodes=None, seed=0) -> float:
        """Mean undiscounted return of greedy execution in the fitted env."""
        check_is_fitted(self, "policy_")
        n = self.eval_episodes if n_episodes is None else n_episodes
        return evaluate(self.policy_, self.env_, n, seed=seed).mean
