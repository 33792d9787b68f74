"""Coupled value factorization.

``V_tot(o)   = sum_i wv_i(o) V_i(o_i) + V_share(o)``
``Q_tot(o,a) = V_tot(o) + sum_i wq_i(o,a) (Q_i(o_i,a_i) - V_i(o_i))``

The credit-assignment weights share an observation encoder::

    h_v = f_v1(o)            wv = |f_v2(h_v)|
    h_q = f_q1(o, onehot(a)) wq = |f_q2(concat(h_v, h_q))|

so a gradient on ``wq`` also moves ``wv``. Ablations swap the weight
construction (``CVF_NO_CCA``), the whole decomposition (``LINEAR``:
``sum_i w_i(o) Q_i + b(o)``) or the local values (``CVF_MAXQ``: ``V_i`` replaced
by ``max_a Q_i``).
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .numcore import Mlp, MlpSpec, ParamStore, mlp_forward


class Variant(str, Enum):
    CVF = "cvf"
    CVF_NO_CCA = "no-cca"
    LINEAR = "linear"
    CVF_MAXQ = "maxq"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        for member in cls:
            if value in (member.value, member.name):
                return member
        raise ValueError(f"unknown variant {value!r}; choose from {[m.value for m in cls]}")


def masked_max(q, masks=None) -> np.ndarray:
    if masks is None:
        return q.max(axis=-1)
    if not np.all(masks.any(axis=-1)):
        raise ValueError("every action is masked for some agent")
    return np.where(masks, q, -np.inf).max(axis=-1)


def masked_argmax(q, masks=None) -> np.ndarray:
    """Argmax over unmasked entries, lowest index on ties."""
    if masks is None:
        return np.argmax(q, axis=-1)
    masks = np.asarray(masks, dtype=bool)
    if not np.all(masks.any(axis=-1)):
        raise ValueError("every action is masked for some agent")
    return np.argmax(np.where(masks, q, -np.inf), axis=-1)


class CvfModel:
    """All value-side networks of one factorized model.

    Observations are batched as ``(B, n_agents, obs_dim)``, joint actions as
    ``(B, n_agents)`` integer arrays and masks as ``(B, n_agents, n_actions)``.
    """

    def __init__(self, n_agents, n_actions, obs_dim, variant=Variant.CVF, tau=0.7, rho=0.005,
                 hidden=32, cca_hidden=16, seed=0, init="uniform_fan_in", q_out_scale=1.0,
                 mixer_targets=True):
        self.n_agents, self.n_actions, self.obs_dim = int(n_agents), int(n_actions), int(obs_dim)
        self.variant = Variant.parse(variant)
        self.tau, self.rho = float(tau), float(rho)
        self.hidden, self.cca_hidden = int(hidden), int(cca_hidden)
        self.seed = int(seed)
        self.q_out_scale = float(q_out_scale)
        self.probe = None
        n, A, d, H, C = self.n_agents, self.n_actions, self.obs_dim, self.hidden, self.cca_hidden
        shapes = {}
        for i in range(n):
            shapes[f"v{i}"] = (d, H, H, 1)
            shapes[f"q{i}"] = (d, H, H, A)
        shapes["v_share"] = (n * d, H, H, 1)
        if self.variant in (Variant.CVF, Variant.CVF_MAXQ):
            shapes["f_v1"] = (n * d, C, C)
            shapes["f_v2"] = (C, C, n)
            shapes["f_q1"] = (n * d + n * A, C, C)
            shapes["f_q2"] = (2 * C, C, n)
        elif self.variant is Variant.CVF_NO_CCA:
            shapes["g_v"] = (n * d, C, C, n)
            shapes["g_q"] = (n * d + n * A, C, C, n)
        else:
            shapes["g_w"] = (n * d, C, C, n)
        seeds = np.random.SeedSequence(self.seed).generate_state(len(shapes))
        # local Q heads may start near zero so that early credit weights, not
        # random action preferences, decide the local greedy actions
        self.nets = {name: Mlp(MlpSpec(widths, init=init, seed=int(s),
                                       out_scale=self.q_out_scale if name[0] == "q" else 1.0))
                     for (name, widths), s in zip(shapes.items(), seeds)}
        # bootstrap targets: every Q_i, plus the nets that make up V_tot besides V_i
        # (a V_tot(o') built from online weights and V_share chases itself)
        self.mixer_targets = bool(mixer_targets)
        names = [f"q{i}" for i in range(n)]
        if self.mixer_targets:
            names += ["v_share", *self._state_weight_nets()]
        self.targets = {k: self.nets[k].params.copy() for k in names}

    # local networks

    def q_values(self, i, obs_i, target=False) -> np.ndarray:
        net = self.nets[f"q{i}"]
        params = self.targets[f"q{i}"] if target else net.params
        return mlp_forward(net.spec, params, obs_i)[0]

    def v_local(self, i, obs_i) -> np.ndarray:
        return self.nets[f"v{i}"](obs_i)[:, 0]

    def local_values(self, obs, masks=None, target=False) -> np.ndarray:
        """``V_i(o_i)`` per agent, or ``max_a Q_i`` for ``CVF_MAXQ``. Shape ``(B, n)``."""
        obs = np.asarray(obs, dtype=np.float64)
        out = np.empty(obs.shape[:2])
        for i in range(self.n_agents):
            if self.variant is Variant.CVF_MAXQ:
                q = self.q_values(i, obs[:, i], target=target)
                self._record(i, np.broadcast_to(np.arange(self.n_actions), q.shape), None)
                out[:, i] = masked_max(q, None if masks is None else masks[:, i])
            else:
                out[:, i] = self.v_local(i, obs[:, i])
        return out

    def _record(self, i, used, batch_actions):
        if self.probe is not None:
            self.probe.record(i, used, batch_actions)

    def _gather(self, q, actions, i):
        actions = np.asarray(actions, dtype=np.int64)
        self._record(i, actions[:, None], actions)
        return q[np.arange(len(actions)), actions]

    # credit assignment

    def _onehot(self, act) -> np.ndarray:
        act = np.asarray(act, dtype=np.int64)
        B = act.shape[0]
        out = np.zeros((B, self.n_agents * self.n_actions))
        cols = act + self.n_actions * np.arange(self.n_agents)
        out[np.arange(B)[:, None], cols] = 1.0
        return out

    def _weights_forward(self, flat, act):
        """Pre-absolute weight outputs ``(zv, zq)`` plus tapes."""
        nets = self.nets
        if self.variant is Variant.LINEAR:
            zw, tw = nets["g_w"].forward(flat)
            return zw, zw, {"g_w": tw}
        qin = np.concatenate([flat, self._onehot(act)], axis=1)
        if self.variant is Variant.CVF_NO_CCA:
            zv, tv = nets["g_v"].forward(flat)
            zq, tq = nets["g_q"].forward(qin)
            return zv, zq, {"g_v": tv, "g_q": tq}
        hv, t_v1 = nets["f_v1"].forward(flat)
        zv, t_v2 = nets["f_v2"].forward(hv)
        hq, t_q1 = nets["f_q1"].forward(qin)
        zq, t_q2 = nets["f_q2"].forward(np.concatenate([hv, hq], axis=1))
        return zv, zq, {"f_v1": t_v1, "f_v2": t_v2, "f_q1": t_q1, "f_q2": t_q2}

    def cca_weights(self, obs, act) -> tuple[np.ndarray, np.ndarray]:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim != 3 or obs.shape[1:] != (self.n_agents, self.obs_dim):
            raise ValueError(f"obs must have shape (B, {self.n_agents}, {self.obs_dim})")
        act = np.asarray(act, dtype=np.int64)
        if act.shape != obs.shape[:2]:
            raise ValueError("joint actions must have shape (B, n_agents)")
        zv, zq, _ = self._weights_forward(obs.reshape(len(obs), -1), act)
        return np.abs(zv), np.abs(zq)

    def _state_weight_nets(self) -> list:
        if self.variant is Variant.LINEAR:
            return ["g_w"]
        if self.variant is Variant.CVF_NO_CCA:
            return ["g_v"]
        return ["f_v1", "f_v2"]

    def _apply(self, name, x, target=False) -> np.ndarray:
        net = self.nets[name]
        params = self.targets.get(name, net.params) if target else net.params
        return mlp_forward(net.spec, params, x)[0]

    def state_weights(self, obs, target=False) -> np.ndarray:
        """``wv(o)``; never looks at actions."""
        obs = np.asarray(obs, dtype=np.float64)
        h = obs.reshape(len(obs), -1)
        for name in self._state_weight_nets():
            h = self._apply(name, h, target)
        return np.abs(h)

    # global values

    def v_tot(self, obs, local_values=None, masks=None, target=False) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if local_values is None:
            local_values = self.local_values(obs, masks, target=target)
        flat = obs.reshape(len(obs), -1)
        return ((self.state_weights(obs, target) * local_values).sum(axis=1)
                + self._apply("v_share", flat, target)[:, 0])

    def q_tot(self, obs, act, use_target=False, local_values=None, masks=None) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if local_values is None:
            local_values = self.local_values(obs, masks, target=use_target)
        qtot, _ = self.qtot_forward(obs, act, local_values, use_target=use_target)
        return qtot

    def qtot_forward(self, obs, act, local_values, use_target=False):
        """``Q_tot`` with everything cached for :meth:`qtot_backward`.

        ``local_values`` enter as constants.
        """
        obs = np.asarray(obs, dtype=np.float64)
        act = np.asarray(act, dtype=np.int64)
        B = len(obs)
        flat = obs.reshape(B, -1)
        qsel = np.empty((B, self.n_agents))
        tapes = {}
        for i in range(self.n_agents):
            net = self.nets[f"q{i}"]
            if use_target:
                qa = self.q_values(i, obs[:, i], target=True)
            else:
                qa, tapes[f"q{i}"] = net.forward(obs[:, i])
            qsel[:, i] = self._gather(qa, act[:, i], i)
        vs, tapes["v_share"] = self.nets["v_share"].forward(flat)
        zv, zq, wtapes = self._weights_forward(flat, act)
        tapes.update(wtapes)
        if self.variant is Variant.LINEAR:
            qtot = (np.abs(zq) * qsel).sum(axis=1) + vs[:, 0]
        else:
            adv = qsel - local_values
            qtot = (np.abs(zv) * local_values).sum(axis=1) + vs[:, 0] + (np.abs(zq) * adv).sum(axis=1)
        cache = {"act": act, "qsel": qsel, "lv": local_values, "zv": zv, "zq": zq, "tapes": tapes}
        return qtot, cache

    def qtot_backward(self, cache, dq) -> dict:
        """Parameter gradients of ``sum(dq * Q_tot)``, keyed by network name."""
        dq = np.asarray(dq, dtype=np.float64)[:, None]
        tapes, nets = cache["tapes"], self.nets
        act, qsel, lv, zv, zq = cache["act"], cache["qsel"], cache["lv"], cache["zv"], cache["zq"]
        grads = {"v_share": nets["v_share"].backward(tapes["v_share"], dq)[0]}
        if self.variant is Variant.LINEAR:
            dqsel = dq * np.abs(zq)
            grads["g_w"] = nets["g_w"].backward(tapes["g_w"], dq * qsel * np.sign(zq))[0]
        else:
            dqsel = dq * np.abs(zq)
            dzv = dq * lv * np.sign(zv)
            dzq = dq * (qsel - lv) * np.sign(zq)
            if self.variant is Variant.CVF_NO_CCA:
                grads["g_v"] = nets["g_v"].backward(tapes["g_v"], dzv)[0]
                grads["g_q"] = nets["g_q"].backward(tapes["g_q"], dzq)[0]
            else:
                C = self.cca_hidden
                grads["f_q2"], dcat = nets["f_q2"].backward(tapes["f_q2"], dzq)
                grads["f_q1"] = nets["f_q1"].backward(tapes["f_q1"], dcat[:, C:])[0]
                grads["f_v2"], dhv = nets["f_v2"].backward(tapes["f_v2"], dzv)
                grads["f_v1"] = nets["f_v1"].backward(tapes["f_v1"], dhv + dcat[:, :C])[0]
        B = len(act)
        for i in range(self.n_agents):
            if f"q{i}" not in tapes:
                continue
            dqa = np.zeros((B, self.n_actions))
            dqa[np.arange(B), act[:, i]] = dqsel[:, i]
            grads[f"q{i}"] = nets[f"q{i}"].backward(tapes[f"q{i}"], dqa)[0]
        return grads

    # execution and targets

    def joint_greedy(self, obs, masks=None) -> np.ndarray:
        """Per-agent argmax of ``Q_i`` over unmasked actions. Shape ``(B, n)``."""
        obs = np.asarray(obs, dtype=np.float64)
        out = np.empty(obs.shape[:2], dtype=np.int64)
        for i in range(self.n_agents):
            q = self.q_values(i, obs[:, i])
            out[:, i] = masked_argmax(q, None if masks is None else np.asarray(masks)[:, i])
        return out

    def soft_update_targets(self, rho=None) -> "CvfModel":
        rho = self.rho if rho is None else float(rho)
        if not 0.0 < rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {rho}")
        for name, target in self.targets.items():
            online = self.nets[name].params.theta
            target.theta = online.copy() if rho == 1.0 else (1.0 - rho) * target.theta + rho * online
        return self

    # parameter plumbing

    def flat(self, names) -> np.ndarray:
        return np.concatenate([self.nets[k].params.theta for k in names])

    def set_flat(self, names, theta) -> None:
        offset = 0
        for k in names:
            size = self.nets[k].params.theta.size
            store = self.nets[k].params
            store.theta = np.array(theta[offset:offset + size], dtype=np.float64)
            store.version += 1
            offset += size

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value, "tau": self.tau, "rho": self.rho,
            "n_agents": self.n_agents, "n_actions": self.n_actions, "obs_dim": self.obs_dim,
            "hidden": self.hidden, "cca_hidden": self.cca_hidden, "seed": self.seed,
            "q_out_scale": self.q_out_scale, "mixer_targets": self.mixer_targets,
            "nets": {k: net.to_dict() for k, net in self.nets.items()},
            "targets": {k: store.to_dict() for k, store in self.targets.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CvfModel":
        model = cls(payload["n_agents"], payload["n_actions"], payload["obs_dim"],
                    payload["variant"], payload["tau"], payload["rho"], payload["hidden"],
                    payload["cca_hidden"], payload.get("seed", 0),
                    q_out_scale=payload.get("q_out_scale", 1.0),
                    mixer_targets=payload.get("mixer_targets", False))
        model.nets = {k: Mlp.from_dict(v) for k, v in payload["nets"].items()}
        model.targets = {k: ParamStore.from_dict(v) for k, v in payload["targets"].items()}
        return model
