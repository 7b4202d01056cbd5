"""Dense function approximators with hand-written reverse mode.

Everything downstream (value model, critics, flow fields) is a ``DenseNet``:
a fixed stack of affine layers with tanh hidden activations and a linear
head, optionally preceded by a temporal attention-pooling layer that
compresses an action chunk into a few weighted averages over its steps.

Nets are immutable values.  ``forward`` and ``backward`` are pure functions
of (net, input); the only mutable object in this module is ``AdamState``,
which the learner owns.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from fleetrl.errors import ContractViolation, NumericError

FORMAT_TAG = "fleetrl.params/1"

Layout = tuple[tuple[str, tuple[int, ...]], ...]


def _size(shape: tuple[int, ...]) -> int:
    return math.prod(shape)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        n = sum(_size(shape) for _, shape in self.layout)
        if self.values.ndim != 1 or self.values.shape[0] != n:
            raise ContractViolation(
                f"parameter vector has shape {self.values.shape}, layout needs ({n},)"
            )

    def __len__(self) -> int:
        return self.values.shape[0]

    def unflatten(self) -> dict[str, np.ndarray]:
        """Named reshaped views into ``values`` (no copies)."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = _size(shape)
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out

    def like(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def zeros_like(self) -> "ParamVector":
        return self.like(np.zeros_like(self.values))

    def copy(self) -> "ParamVector":
        return self.like(self.values.copy())

    def equals(self, other: "ParamVector") -> bool:
        """Bit-level equality of layout and values."""
        return (self.layout == other.layout
                and self.values.tobytes() == other.values.tobytes())


def check_same_layout(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise ContractViolation("parameter layouts differ")


@dataclass(frozen=True)
class PoolSpec:
    """Input split as [obs | chunk (horizon x action_dim)], chunk pooled by ``heads``."""

    obs_dim: int
    horizon: int
    action_dim: int
    heads: int

    @property
    def in_dim(self) -> int:
        return self.obs_dim + self.horizon * self.action_dim

    @property
    def out_dim(self) -> int:
        return self.obs_dim + self.heads * self.action_dim


@dataclass(frozen=True, eq=False)
class DenseNet:
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    params: ParamVector
    pool: PoolSpec | None = None

    def __post_init__(self):
        if len(self.activations) != len(self.widths) - 1:
            raise ContractViolation("need one activation per layer")
        if self.pool is not None and self.pool.out_dim != self.widths[0]:
            raise ContractViolation("pooling output does not feed first dense layer")
        if self.params.layout != net_layout(self.widths, self.pool):
            raise ContractViolation("params do not match net topology")

    @property
    def in_dim(self) -> int:
        return self.pool.in_dim if self.pool is not None else self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def with_params(self, params: ParamVector) -> "DenseNet":
        return DenseNet(self.widths, self.activations, params, self.pool)


@dataclass(frozen=True, eq=False)
class GradResult:
    loss: float
    grads: ParamVector
    input_grad: np.ndarray | None = None
    output: np.ndarray | None = None


def net_layout(widths: tuple[int, ...], pool: PoolSpec | None = None) -> Layout:
    layout: list[tuple[str, tuple[int, ...]]] = []
    if pool is not None:
        layout.append(("pool_u", (pool.heads, pool.horizon)))
        layout.append(("pool_q", (pool.heads, pool.action_dim)))
    for i in range(len(widths) - 1):
        layout.append((f"W{i}", (widths[i], widths[i + 1])))
        layout.append((f"b{i}", (widths[i + 1],)))
    return tuple(layout)


def init_net(widths, seed: int, pool: PoolSpec | None = None,
             hidden: str = "tanh", out_scale: float = 1.0) -> DenseNet:
    """Uniform(+-1/sqrt(fan_in)) weights.

    One pooling head starts as a plain mean; with several heads, head k starts
    as a soft window over the k-th segment of the chunk so heads see different times.
    """
    widths = tuple(int(w) for w in widths)
    rng = np.random.default_rng(seed)
    layout = net_layout(widths, pool)
    params = ParamVector(np.zeros(sum(_size(s) for _, s in layout)), layout)
    views = params.unflatten()
    n_layers = len(widths) - 1
    for i in range(n_layers):
        bound = 1.0 / math.sqrt(widths[i])
        scale = out_scale if i == n_layers - 1 else 1.0
        views[f"W{i}"][...] = scale * rng.uniform(-bound, bound, size=(widths[i], widths[i + 1]))
        views[f"b{i}"][...] = scale * rng.uniform(-bound, bound, size=widths[i + 1])
    if pool is not None and pool.heads > 1:
        width = pool.horizon / pool.heads
        centers = (np.arange(pool.heads) + 0.5) * width
        t = np.arange(pool.horizon)
        views["pool_u"][...] = -0.5 * ((t[None] - centers[:, None]) / width) ** 2
    acts = tuple([hidden] * (n_layers - 1) + ["linear"])
    return DenseNet(widths, acts, params, pool)


def zero_net_like(net: DenseNet) -> DenseNet:
    return net.with_params(net.params.zeros_like())


# --------------------------------------------------------------------------
# forward / backward

def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "linear":
        return z
    raise ContractViolation(f"unknown activation {kind!r}")


def _pool_forward(spec: PoolSpec, P: dict, x: np.ndarray):
    B = x.shape[0]
    obs = x[:, :spec.obs_dim]
    a = x[:, spec.obs_dim:].reshape(B, spec.horizon, spec.action_dim)
    z = P["pool_u"][None] + np.einsum("bha,ka->bkh", a, P["pool_q"])
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    alpha = e / e.sum(axis=-1, keepdims=True)
    pooled = np.einsum("bkh,bha->bka", alpha, a)
    out = np.concatenate([obs, pooled.reshape(B, -1)], axis=1)
    return out, (a, alpha)


def _pool_backward(spec: PoolSpec, P: dict, cache, g: np.ndarray, G: dict):
    a, alpha = cache
    B = g.shape[0]
    gy = g[:, spec.obs_dim:].reshape(B, spec.heads, spec.action_dim)
    galpha = np.einsum("bka,bha->bkh", gy, a)
    gz = alpha * (galpha - (alpha * galpha).sum(axis=-1, keepdims=True))
    G["pool_u"][...] = gz.sum(axis=0)
    G["pool_q"][...] = np.einsum("bkh,bha->ka", gz, a)
    ga = np.einsum("bkh,bka->bha", alpha, gy) + np.einsum("bkh,ka->bha", gz, P["pool_q"])
    return np.concatenate([g[:, :spec.obs_dim], ga.reshape(B, -1)], axis=1)


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ContractViolation(f"input has shape {x.shape}, net expects width {net.in_dim}")
    return x, single


def _forward_cached(net: DenseNet, x: np.ndarray):
    P = net.params.unflatten()
    pool_cache = None
    h = x
    if net.pool is not None:
        h, pool_cache = _pool_forward(net.pool, P, h)
    hs = [h]
    for i, kind in enumerate(net.activations):
        h = _act(kind, h @ P[f"W{i}"] + P[f"b{i}"])
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite activation in layer {i}", where=i)
        hs.append(h)
    return P, pool_cache, hs


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the net on one input vector or a (batch, in_dim) array."""
    x, single = _as_batch(net, x)
    _, _, hs = _forward_cached(net, x)
    return hs[-1][0] if single else hs[-1]


def backward(net: DenseNet, x, upstream, want_input_grad: bool = False,
             want_param_grads: bool = True) -> GradResult:
    """Gradients of sum(upstream * forward(net, x)).

    Parameter gradients are summed over the batch.  ``loss`` holds the
    differentiated scalar itself, ``output`` the forward result.
    ``upstream`` may also be a callable ``out -> (loss, dloss/dout)``, which
    saves a second forward pass when the upstream depends on the output.
    """
    x, single = _as_batch(net, x)
    P, pool_cache, hs = _forward_cached(net, x)
    out = hs[-1]
    value = None
    if callable(upstream):
        value, upstream = upstream(out[0] if single else out)
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None]
    if g.shape != (x.shape[0], net.out_dim):
        raise ContractViolation(f"upstream has shape {g.shape}, expected {(x.shape[0], net.out_dim)}")
    grads = net.params.zeros_like()
    G = grads.unflatten()
    if value is None:
        value = float(np.sum(g * out))
    for i in range(len(net.activations) - 1, -1, -1):
        if net.activations[i] == "tanh":
            g = g * (1.0 - hs[i + 1] ** 2)
        if want_param_grads:
            G[f"W{i}"][...] = hs[i].T @ g
            G[f"b{i}"][...] = g.sum(axis=0)
        if i > 0 or want_input_grad or net.pool is not None:
            g = g @ P[f"W{i}"].T
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in layer {i}", where=i)
    gx = None
    if net.pool is not None:
        gx = _pool_backward(net.pool, P, pool_cache, g, G)
    elif want_input_grad:
        gx = g
    if want_input_grad and single:
        gx = gx[0]
    return GradResult(value, grads, gx if want_input_grad else None,
                      out[0] if single else out)


def input_vjp(net: DenseNet, x, upstream) -> np.ndarray:
    """Vector-Jacobian product w.r.t. the input only."""
    return backward(net, x, upstream, want_input_grad=True, want_param_grads=False).input_grad


# --------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, params: ParamVector) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


def opt_step(params: ParamVector, grads: ParamVector, state: AdamState, lr: float,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
             ) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam step; returns fresh params and state."""
    check_same_layout(params, grads)
    if state.m.shape != params.values.shape:
        raise ContractViolation("optimizer state does not match params")
    g = grads.values
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    t = state.step + 1
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.like(new), AdamState(m, v, t)


def cosine_lr(base: float, step: int, total: int, final_frac: float = 0.1) -> float:
    """Cosine decay from ``base`` to ``final_frac * base`` over ``total`` steps."""
    if total <= 0:
        return base
    frac = min(max(step / total, 0.0), 1.0)
    return base * (final_frac + (1.0 - final_frac) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def ema_update(target: ParamVector, online: ParamVector, rate: float) -> ParamVector:
    """target <- (1 - rate) * target + rate * online."""
    if not 0.0 <= rate <= 1.0:
        raise ContractViolation(f"EMA rate {rate} outside [0, 1]")
    check_same_layout(target, online)
    return target.like((1.0 - rate) * target.values + rate * online.values)


# --------------------------------------------------------------------------
# serialization

def params_to_dict(params: ParamVector) -> dict:
    return {
        "format": FORMAT_TAG,
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "dtype": "<f8",
        "values": base64.b64encode(params.values.astype("<f8").tobytes()).decode("ascii"),
    }


def params_from_dict(d: dict) -> ParamVector:
    if d.get("format") != FORMAT_TAG:
        raise ContractViolation(f"unsupported parameter format {d.get('format')!r}")
    layout = tuple((name, tuple(int(s) for s in shape)) for name, shape in d["layout"])
    raw = base64.b64decode(d["values"])
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ParamVector(values, layout)


def net_to_dict(net: DenseNet) -> dict:
    pool = None
    if net.pool is not None:
        p = net.pool
        pool = {"obs_dim": p.obs_dim, "horizon": p.horizon,
                "action_dim": p.action_dim, "heads": p.heads}
    return {"widths": list(net.widths), "activations": list(net.activations),
            "pool": pool, "params": params_to_dict(net.params)}


def net_from_dict(d: dict) -> DenseNet:
    pool = PoolSpec(**d["pool"]) if d.get("pool") else None
    return DenseNet(tuple(d["widths"]), tuple(d["activations"]),
                    params_from_dict(d["params"]), pool)


def save_net(net: DenseNet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(net_to_dict(net)))


def load_net(path) -> DenseNet:
    return net_from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# finite differences

def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + step
        hi = fn(x)
        x[i] = old - step
        lo = fn(x)
        x[i] = old
        out[i] = (hi - lo) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max componentwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
