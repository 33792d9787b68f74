"""Dense-network numerical core.

Small float64 MLPs with hand-written reverse mode, a flat parameter store with
Adam state, the asymmetric (expectile) squared loss and a central-difference
gradient checker. Everything here works on plain numpy arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class StaleTapeError(RuntimeError):
    """A tape was reused, or the parameters changed since the forward pass."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(input, hidden..., output)``; ReLU on hidden layers.

    ``out_scale`` multiplies the initial output layer (1.0 keeps the plain
    uniform fan-in draw).
    """

    layer_widths: tuple[int, ...]
    init: str = "uniform_fan_in"
    seed: int = 0
    out_scale: float = 1.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.init not in ("uniform_fan_in", "zeros"):
            raise ValueError(f"unknown init scheme {self.init!r}")
        if not (np.isfinite(self.out_scale) and self.out_scale >= 0.0):
            raise ValueError(f"out_scale must be finite and non-negative, got {self.out_scale}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    def layout(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out, offset = {}, 0
        for k, (fan_in, fan_out) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            out[f"W{k}"] = (offset, (fan_in, fan_out))
            offset += fan_in * fan_out
            out[f"b{k}"] = (offset, (fan_out,))
            offset += fan_out
        return out

    @property
    def size(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout().values())


@dataclass
class ParamStore:
    """Flat parameter vector with a layout map and Adam moments."""

    theta: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.theta)
        if self.v is None:
            self.v = np.zeros_like(self.theta)
        covered = np.zeros(self.theta.size, dtype=int)
        for offset, shape in self.layout.values():
            covered[offset:offset + math.prod(shape)] += 1
        if not np.all(covered == 1):
            raise ValueError("layout does not partition the parameter vector")
        if self.m.shape != self.theta.shape or self.v.shape != self.theta.shape:
            raise ValueError("Adam moments must match the parameter vector")

    @classmethod
    def _trusted(cls, theta, layout, m, v, t, version) -> "ParamStore":
        store = cls.__new__(cls)
        store.theta, store.layout, store.m, store.v = theta, layout, m, v
        store.t, store.version = t, version
        return store

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.theta[offset:offset + math.prod(shape)].reshape(shape)

    def copy(self) -> "ParamStore":
        return ParamStore._trusted(self.theta.copy(), dict(self.layout), self.m.copy(),
                                   self.v.copy(), self.t, self.version)

    def to_dict(self) -> dict:
        return {
            "layout": {k: [off, list(shape)] for k, (off, shape) in self.layout.items()},
            "params": [float(x).hex() for x in self.theta],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ParamStore":
        layout = {k: (int(off), tuple(int(s) for s in shape))
                  for k, (off, shape) in payload["layout"].items()}
        theta = np.array([float.fromhex(x) for x in payload["params"]], dtype=np.float64)
        return cls(theta, layout)


def init_params(spec: MlpSpec) -> ParamStore:
    layout = spec.layout()
    theta = np.zeros(spec.size)
    store = ParamStore(theta, layout)
    if spec.init == "zeros":
        return store
    rng = np.random.default_rng(spec.seed)
    last = len(spec.layer_widths) - 2
    for k, fan_in in enumerate(spec.layer_widths[:-1]):
        bound = 1.0 / np.sqrt(fan_in) * (spec.out_scale if k == last else 1.0)
        for name in (f"W{k}", f"b{k}"):
            view = store.view(name)
            view[...] = rng.uniform(-bound, bound, size=view.shape)
    return store


@dataclass
class Tape:
    inputs: list
    preacts: list
    store_id: int
    version: int
    consumed: bool = False


def mlp_forward(spec: MlpSpec, params: ParamStore, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ValueError(f"expected input of shape (batch, {spec.n_in}), got {x.shape}")
    n_layers = len(spec.layer_widths) - 1
    inputs, preacts = [], []
    h = x
    for k in range(n_layers):
        inputs.append(h)
        z = h @ params.view(f"W{k}") + params.view(f"b{k}")
        preacts.append(z)
        h = np.maximum(z, 0.0) if k < n_layers - 1 else z
    return h, Tape(inputs, preacts, id(params), params.version)


def mlp_backward(tape: Tape, params: ParamStore, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass. Returns ``(flat parameter gradient, input gradient)``."""
    if tape.consumed:
        raise StaleTapeError("tape already consumed by a backward pass")
    if tape.store_id != id(params) or tape.version != params.version:
        raise StaleTapeError("parameters changed since the forward pass")
    tape.consumed = True
    grad = np.zeros_like(params.theta)
    g = np.asarray(grad_out, dtype=np.float64)
    n_layers = len(tape.inputs)
    for k in range(n_layers - 1, -1, -1):
        if k < n_layers - 1:
            g = g * (tape.preacts[k] > 0.0)
        off_w, shape_w = params.layout[f"W{k}"]
        off_b, shape_b = params.layout[f"b{k}"]
        grad[off_w:off_w + shape_w[0] * shape_w[1]] = (tape.inputs[k].T @ g).ravel()
        grad[off_b:off_b + shape_b[0]] = g.sum(axis=0)
        g = g @ params.view(f"W{k}").T
    return grad, g


class Mlp:
    """An :class:`MlpSpec` bound to its current :class:`ParamStore`."""

    def __init__(self, spec: MlpSpec, params: ParamStore | None = None):
        self.spec = spec
        self.params = init_params(spec) if params is None else params
        if self.params.theta.size != spec.size:
            raise ValueError("parameter vector does not match the MLP spec")

    def forward(self, x):
        return mlp_forward(self.spec, self.params, x)

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape, grad_out):
        return mlp_backward(tape, self.params, grad_out)

    def step(self, grad, lr):
        self.params = adam_step(self.params, grad, lr)

    def to_dict(self) -> dict:
        return {"widths": list(self.spec.layer_widths), **self.params.to_dict()}

    @classmethod
    def from_dict(cls, payload: dict) -> "Mlp":
        return cls(MlpSpec(tuple(payload["widths"])), ParamStore.from_dict(payload))


def adam_step(params: ParamStore, grads, lr: float) -> ParamStore:
    """One bias-corrected Adam update; returns a new store."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.theta.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {params.theta.shape}")
    if not np.isfinite(grads).all():
        bad = ~np.isfinite(grads)
        first = int(np.flatnonzero(bad)[0])
        where = next(name for name, (off, shape) in params.layout.items()
                     if off <= first < off + math.prod(shape))
        raise NonFiniteGradientError(
            f"{int(bad.sum())} non-finite gradient entries; first at index {first} ({where})")
    t = params.t + 1
    m = ADAM_BETA1 * params.m + (1.0 - ADAM_BETA1) * grads
    v = ADAM_BETA2 * params.v + (1.0 - ADAM_BETA2) * grads * grads
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    theta = params.theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return ParamStore._trusted(theta, params.layout, m, v, t, params.version + 1)


def expectile_loss(u, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """``|tau - 1(u<0)| * u**2`` and its derivative (zero at ``u == 0``)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    weight = np.where(u < 0.0, 1.0 - tau, tau)
    return weight * u * u, 2.0 * weight * u


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst_index: int
    analytic: list
    numeric: list

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(fun, theta, tolerance: float = 1e-4, n_coords: int | None = 64,
               h: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare ``fun(theta) -> (loss, grad)`` against central differences.

    A random subset of ``n_coords`` coordinates is probed (all of them when
    ``n_coords`` is None). Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    theta = np.array(theta, dtype=np.float64)
    _, analytic = fun(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if n_coords is None or n_coords >= theta.size:
        idx = np.arange(theta.size)
    else:
        idx = np.sort(rng.choice(theta.size, size=n_coords, replace=False))
    numeric = np.empty(idx.size)
    for j, i in enumerate(idx):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += h
        minus[i] -= h
        numeric[j] = (fun(plus)[0] - fun(minus)[0]) / (2.0 * h)
    a = analytic[idx]
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(float(rel.max()) if rel.size else 0.0, tolerance, int(idx.size),
                           int(idx[worst]) if rel.size else -1, a.tolist(), numeric.tolist())


def dumps_checkpoint(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))
