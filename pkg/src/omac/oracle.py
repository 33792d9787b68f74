"""Exact references for enumerable tasks.

Support-constrained value iteration, exact expectiles of discrete
distributions and exhaustive joint-action argmax. These are the ground truth
the learned factorized values are compared against.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import DEFAULT_ENUM_CAP, EnumerationTooLargeError, TabularModel, enumerate_model


class EmptySupportError(ValueError):
    """A state reachable under the support has no supported joint action."""


@dataclass
class SupportQStar:
    q: np.ndarray  # (S, JA); nan where undefined
    v: np.ndarray  # (S,); nan for states without support
    support: np.ndarray  # (S, JA) bool
    sweeps: int

    def greedy(self, s: int) -> int:
        """Lowest-index supported joint action attaining the max at state ``s``."""
        q = np.where(self.support[s], self.q[s], -np.inf)
        return int(np.argmax(q))


def support_mask(model: TabularModel, support=None) -> np.ndarray:
    """Boolean ``(S, JA)`` support; ``support`` may be None (all legal actions),
    an array, or an iterable of ``(state_id, joint_action)`` pairs."""
    legal = np.stack([model.legal_joint(s) for s in range(model.n_states)])
    if support is None:
        return legal
    if isinstance(support, np.ndarray):
        return support.astype(bool) & legal
    mask = np.zeros_like(legal)
    for sid, ja in support:
        if sid in model.index:
            j = ja if isinstance(ja, (int, np.integer)) else int(
                np.ravel_multi_index(tuple(ja), (model.n_actions,) * model.n_agents))
            mask[model.index[sid], j] = True
    return mask & legal


def support_q_star(model: TabularModel, support=None, gamma: float | None = None,
                   tol: float = 1e-10, max_sweeps: int = 100_000) -> SupportQStar:
    """Value iteration with the max restricted to supported joint actions.

    ``gamma`` overrides the task discount; ``gamma == 1`` is accepted for
    finite-horizon tasks and simply needs the state graph to be acyclic.
    """
    gamma = model.gamma if gamma is None else float(gamma)
    supp = support_mask(model, support)
    _check_reachable_support(model, supp)
    has = supp.any(axis=1)
    v = np.zeros(model.n_states)
    nxt = np.where(model.next_state < 0, 0, model.next_state)
    cont = (~model.done) & (model.next_state >= 0)
    for sweep in range(1, max_sweeps + 1):
        boot = np.where(cont, v[nxt], 0.0)
        q = (model.next_prob * (model.reward + gamma * boot)).sum(axis=-1)
        new_v = np.where(has, np.max(np.where(supp, q, -np.inf), axis=1, initial=-np.inf), 0.0)
        new_v = np.where(has, new_v, 0.0)
        delta = np.max(np.abs(new_v - v)) if v.size else 0.0
        v = new_v
        if delta <= tol:
            break
    else:
        raise RuntimeError(f"value iteration did not converge in {max_sweeps} sweeps")
    boot = np.where(cont, v[nxt], 0.0)
    q = (model.next_prob * (model.reward + gamma * boot)).sum(axis=-1)
    q = np.where(np.stack([model.legal_joint(s) for s in range(model.n_states)]), q, np.nan)
    return SupportQStar(q, np.where(has, v, np.nan), supp, sweep)


def _check_reachable_support(model: TabularModel, supp: np.ndarray) -> None:
    seen = set(np.flatnonzero(model.initial > 0).tolist())
    frontier = list(seen)
    while frontier:
        s = frontier.pop()
        if not supp[s].any():
            raise EmptySupportError(
                f"state {model.ids[s]} is reachable under the support but has no supported action")
        for ja in np.flatnonzero(supp[s]):
            for k in range(model.next_state.shape[2]):
                ns = int(model.next_state[s, ja, k])
                if model.next_prob[s, ja, k] > 0 and ns >= 0 and ns not in seen:
                    seen.add(ns)
                    frontier.append(ns)


def optimal_return(model: TabularModel, support=None, gamma: float | None = None) -> float:
    """Expected optimal return from the initial distribution."""
    res = support_q_star(model, support, gamma=gamma)
    start = model.initial > 0
    return float(np.sum(model.initial[start] * res.v[start]))


def expectile_of_discrete(values, probs, tau: float, tol: float = 1e-12) -> float:
    """Minimizer of ``E[|tau - 1(x < m)| (x - m)^2]`` by bisection."""
    values = np.asarray(values, dtype=np.float64).ravel()
    probs = np.asarray(probs, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty support")
    if values.shape != probs.shape:
        raise ValueError("values and probs must have the same length")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probs must be a distribution")

    def slope(m):
        # minus half the derivative of the objective; decreasing in m
        w = np.where(values > m, tau, 1.0 - tau)
        return float(np.sum(probs * w * (values - m)))

    lo, hi = float(values.min()), float(values.max())
    while hi - lo > tol * max(1.0, abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if slope(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def joint_argmax_qtot(model, joint_obs, masks=None, cap: int = DEFAULT_ENUM_CAP,
                      local_values=None) -> tuple[int, ...]:
    """Exhaustive argmax of ``Q_tot`` over unmasked joint actions (lexicographic ties)."""
    n, n_act = model.n_agents, model.n_actions
    masks = np.ones((n, n_act), dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    choices = [np.flatnonzero(masks[i]) for i in range(n)]
    total = int(np.prod([len(c) for c in choices]))
    if total > cap:
        raise EnumerationTooLargeError(f"{total} joint actions exceeds cap {cap}")
    if total == 0:
        raise ValueError("every joint action is masked")
    joint = np.array(list(itertools.product(*choices)), dtype=np.int64)
    obs = np.repeat(np.asarray(joint_obs, dtype=np.float64)[None], len(joint), axis=0)
    lv = None if local_values is None else np.repeat(np.asarray(local_values)[None], len(joint), 0)
    q = model.q_tot(obs, joint, local_values=lv)
    best = 0
    for k in range(1, len(q)):
        if q[k] > q[best]:
            best = k
    return tuple(int(a) for a in joint[best])


@dataclass
class OracleReport:
    v_star: dict = field(default_factory=dict)
    q_star: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    local_expectiles: list = field(default_factory=list)
    monotone: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=float)

    def summary(self) -> str:
        lines = []
        for row in self.rows:
            lines.append(
                f"seed={row['seed']} tau={row['tau']:.4g} V_tot={row['v_tot']:.4f} "
                f"V*={row['v_star']:.4f} rel_err={row['rel_error']:.4f}")
        for seed, ok in sorted(self.monotone.items()):
            lines.append(f"seed={seed} V_tot non-decreasing in tau: {ok}")
        return "\n".join(lines)


def theorem1_check(env, dataset, tau_list=(0.5, 0.7, 0.9, 0.99), seeds=(0,), config=None,
                   slack: float = 1e-2) -> OracleReport:
    """Train value models at each tau and compare V_tot with the support-constrained optimum.

    Report-only: errors are presented, never judged against the limit.
    """
    from .dataset import summary as dataset_summary
    from .trainer import TrainConfig, train_values

    model = enumerate_model(env)
    stats = dataset_summary(dataset)
    res = support_q_star(model, stats.support)
    report = OracleReport()
    starts = np.flatnonzero(model.initial > 0)
    for s in starts:
        report.v_star[str(model.ids[s])] = float(res.v[s])
        report.q_star[str(model.ids[s])] = [None if np.isnan(x) else float(x) for x in res.q[s]]
    base = config or TrainConfig()
    transitions = dataset.transitions()
    for seed in seeds:
        seq = []
        for tau in tau_list:
            cfg = base.replace(tau=float(tau), seed=int(seed))
            cvf = train_values(cfg, transitions, env)
            obs = np.stack([env.observe(model.states[s]) for s in starts])
            v_tot = cvf.v_tot(obs)
            v_star = res.v[starts]
            weights = model.initial[starts] / model.initial[starts].sum()
            v_mean = float(np.dot(weights, v_tot))
            vs_mean = float(np.dot(weights, v_star))
            report.rows.append({
                "seed": int(seed), "tau": float(tau), "v_tot": v_mean, "v_star": vs_mean,
                "abs_error": abs(v_mean - vs_mean),
                "rel_error": abs(v_mean - vs_mean) / max(abs(vs_mean), 1e-12),
            })
            seq.append(v_mean)
            report.local_expectiles.extend(_local_expectiles(cvf, transitions, tau, seed))
        report.monotone[str(seed)] = bool(all(b >= a - slack for a, b in zip(seq, seq[1:])))
    return report


def _local_expectiles(cvf, transitions, tau, seed, limit: int = 4) -> list:
    """Exact tau-expectile of the learned target Q_i under the empirical action
    distribution at the most frequent local observations, next to the learned V_i."""
    rows = []
    obs, act = transitions.obs, transitions.act
    for i in range(cvf.n_agents):
        keys, inverse, counts = np.unique(obs[:, i], axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        for k in np.argsort(-counts, kind="stable")[:limit]:
            o = keys[k]
            acts = act[inverse == k, i]
            q = cvf.q_values(i, o[None], target=True)[0]
            values, cnt = np.unique(acts, return_counts=True)
            m = expectile_of_discrete(q[values], cnt / cnt.sum(), tau)
            rows.append({"seed": int(seed), "tau": float(tau), "agent": i,
                         "samples": int(counts[k]), "expectile": m,
                         "v_local": float(cvf.v_local(i, o[None])[0])})
    return rows
