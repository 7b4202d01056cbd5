"""Distributional implicit value learning.

The value model maps a state to K logits over a fixed, uniformly spaced
support.  It is fitted by cross entropy to the C51 projection of the
(EMA, min-of-two) critic's value of the *replay* action, so it describes the
spread of critic values across the dataset's actions at that state.  The
critic then bootstraps from a tau-quantile of that distribution, with tau
lowered when the distribution is diffuse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fleetrl import diffcore as dc
from fleetrl.errors import ContractViolation, NumericError


@dataclass(frozen=True)
class ValueSupport:
    K: int = 201
    v_min: float = -0.1
    v_max: float = 1.1

    def __post_init__(self):
        if self.K < 2 or not self.v_max > self.v_min:
            raise ContractViolation("support needs K >= 2 and v_max > v_min")

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / (self.K - 1)

    @property
    def atoms(self) -> np.ndarray:
        return self.v_min + self.delta * np.arange(self.K)


DEFAULT_SUPPORT = ValueSupport()


@dataclass(frozen=True, eq=False)
class CategoricalValueDistribution:
    probs: np.ndarray
    support: ValueSupport = DEFAULT_SUPPORT

    def __post_init__(self):
        p = self.probs
        if p.shape[-1] != self.support.K:
            raise ContractViolation("probability vector length differs from K")
        if (p < 0).any() or np.abs(p.sum(axis=-1) - 1.0).max() > 1e-9:
            raise ContractViolation("not a normalized distribution")

    def mean(self):
        return self.probs @ self.support.atoms

    def quantile(self, tau):
        return quantile(self.probs, tau, self.support)

    def entropy(self):
        return normalized_entropy(self.probs)


@dataclass(frozen=True)
class TauSchedule:
    tau_base: float
    alpha: float
    tau_min: float = 0.3
    tau_max: float = 0.95

    def __post_init__(self):
        if not (0 < self.tau_min <= self.tau_base <= self.tau_max < 1) or self.alpha < 0:
            raise ContractViolation(f"invalid tau schedule {self}")


OFFLINE_SCHEDULE = TauSchedule(0.6, 0.3)
ONLINE_SCHEDULE = TauSchedule(0.9, 0.3)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def c51_project(target, support: ValueSupport = DEFAULT_SUPPORT) -> np.ndarray:
    """Split each (clipped) scalar between its two neighbouring atoms.

    Works elementwise: a scalar gives a (K,) vector, an array of shape S
    gives (*S, K).
    """
    t = np.clip(np.asarray(target, dtype=np.float64), support.v_min, support.v_max)
    pos = (t - support.v_min) / support.delta
    near = np.round(pos)
    pos = np.where(np.abs(pos - near) < 1e-9, near, pos)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, support.K - 1)
    frac = pos - lo
    # exact atom hits and the top atom put all mass on ``lo``
    frac = np.where(lo >= support.K - 1, 0.0, frac)
    hi = np.minimum(lo + 1, support.K - 1)
    out = np.zeros(t.shape + (support.K,))
    np.put_along_axis(out, lo[..., None], (1.0 - frac)[..., None], axis=-1)
    hi_mass = np.take_along_axis(out, hi[..., None], axis=-1) + frac[..., None]
    np.put_along_axis(out, hi[..., None], hi_mass, axis=-1)
    return out


def cross_entropy(logits: np.ndarray, target_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row CE and its gradient w.r.t. the logits."""
    if not np.isfinite(logits).all():
        raise NumericError("non-finite value logits")
    ls = log_softmax(logits)
    ce = -(target_probs * ls).sum(axis=-1)
    return ce, np.exp(ls) - target_probs


def value_loss(value_net: dc.DenseNet, obs: np.ndarray, targets: np.ndarray,
               support: ValueSupport = DEFAULT_SUPPORT) -> dc.GradResult:
    """Mean CE between softmax(value logits) and the projected scalar targets.

    ``targets`` are treated as constants.
    """
    m = c51_project(targets, support)
    B = len(obs)

    def up(logits):
        ce, g = cross_entropy(logits, m)
        return float(ce.mean()), g / B

    return dc.backward(value_net, obs, up)


def quantile(probs, tau, support: ValueSupport = DEFAULT_SUPPORT):
    """Atom at the smallest index whose CDF reaches tau (rowwise, tau broadcast)."""
    tau = np.asarray(tau, dtype=np.float64)
    if ((tau <= 0) | (tau >= 1)).any():
        raise ContractViolation("tau must lie in (0, 1)")
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    reached = cdf >= tau[..., None]
    idx = np.where(reached.any(axis=-1), reached.argmax(axis=-1), support.K - 1)
    return support.atoms[idx]


def normalized_entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    K = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -plogp.sum(axis=-1) / math.log(K)
    return np.clip(h, 0.0, 1.0)


def adaptive_tau(probs, sched: TauSchedule) -> np.ndarray:
    return np.clip(sched.tau_base - sched.alpha * normalized_entropy(probs), sched.tau_min, sched.tau_max)


@dataclass(frozen=True, eq=False)
class TargetStats:
    y: np.ndarray
    tau: np.ndarray
    entropy: np.ndarray
    quantile: np.ndarray


def td_target(nstep_return: np.ndarray, bootstrap_obs: np.ndarray, bootstrap_discount: np.ndarray,
              value_net: dc.DenseNet, sched: TauSchedule,
              support: ValueSupport = DEFAULT_SUPPORT) -> TargetStats:
    """n-step return plus discounted tau-quantile of the value distribution.

    ``bootstrap_discount`` is gamma**(effective_n * H), or 0 where the window
    hit a terminal chunk (no bootstrap).  Statistics of rows without a
    bootstrap are reported as NaN.
    """
    y = np.array(nstep_return, dtype=np.float64)
    has = bootstrap_discount > 0
    tau = np.full(len(y), np.nan)
    ent = np.full(len(y), np.nan)
    q = np.full(len(y), np.nan)
    if has.any():
        probs = softmax(dc.forward(value_net, bootstrap_obs[has]))
        ent[has] = normalized_entropy(probs)
        tau[has] = adaptive_tau(probs, sched)
        q[has] = quantile(probs, tau[has], support)
        y[has] += bootstrap_discount[has] * q[has]
    return TargetStats(y, tau, ent, q)


# --------------------------------------------------------------------------
# critics

@dataclass(frozen=True, eq=False)
class CriticPair:
    q1: dc.DenseNet
    q2: dc.DenseNet

    def replace(self, p1: dc.ParamVector, p2: dc.ParamVector) -> "CriticPair":
        return CriticPair(self.q1.with_params(p1), self.q2.with_params(p2))


def critic_input(obs: np.ndarray, chunk: np.ndarray) -> np.ndarray:
    chunk = np.asarray(chunk)
    return np.concatenate([obs, chunk.reshape(len(chunk), -1)], axis=1)


def q_values(pair: CriticPair, obs: np.ndarray, chunk: np.ndarray) -> np.ndarray:
    x = critic_input(obs, chunk)
    return np.stack([dc.forward(pair.q1, x)[:, 0], dc.forward(pair.q2, x)[:, 0]], axis=1)


def q_min(pair: CriticPair, obs: np.ndarray, chunk: np.ndarray) -> np.ndarray:
    return q_values(pair, obs, chunk).min(axis=1)


def q_min_action_grad(pair: CriticPair, obs: np.ndarray, chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(q_min, d q_min / d chunk), taking head 1's gradient on ties."""
    chunk = np.asarray(chunk)
    x = critic_input(obs, chunk)
    B = len(x)
    ones = np.ones((B, 1))
    r1 = dc.backward(pair.q1, x, ones, want_input_grad=True)
    r2 = dc.backward(pair.q2, x, ones, want_input_grad=True)
    v1, v2 = r1.output[:, 0], r2.output[:, 0]
    use2 = v2 < v1
    g = np.where(use2[:, None], r2.input_grad, r1.input_grad)[:, obs.shape[1]:]
    return np.minimum(v1, v2), g.reshape(chunk.shape)


def critic_loss(pair: CriticPair, obs: np.ndarray, chunk: np.ndarray, y: np.ndarray
                ) -> tuple[float, dc.ParamVector, dc.ParamVector]:
    """Mean over the batch of sum over heads of (Q_i - y)^2; ``y`` is a constant."""
    x = critic_input(obs, chunk)
    B = len(x)
    out = []
    def up(q):
        err = q[:, 0] - y
        return float(np.mean(err ** 2)), (2.0 * err / B)[:, None]

    for net in (pair.q1, pair.q2):
        res = dc.backward(net, x, up)
        out.append((res.loss, res.grads))
    return out[0][0] + out[1][0], out[0][1], out[1][1]


# --------------------------------------------------------------------------
# scalar expectile baseline (value-mode ablation)

def expectile_loss(value_net: dc.DenseNet, obs: np.ndarray, targets: np.ndarray, tau: float) -> dc.GradResult:
    """Mean |tau - 1(u < 0)| u^2 with u = target - V(s)."""
    B = len(obs)

    def up(v):
        u = targets - v[:, 0]
        w = np.where(u < 0, 1.0 - tau, tau)
        return float(np.mean(w * u * u)), (-2.0 * w * u / B)[:, None]

    return dc.backward(value_net, obs, up)


# --------------------------------------------------------------------------
# asymmetric-loss equivalence check

def asymmetric_loss(u, tau: float, p: int):
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0)) * np.abs(u) ** p


def golden_section_min(fn, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 500) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def discrete_expectile(probs: np.ndarray, tau: float, support: ValueSupport, tol: float = 1e-8) -> float:
    """Root of sum_i p_i |tau - 1(V_i < v)| (V_i - v) by bisection on [v_min, v_max]."""
    atoms = support.atoms

    def foc(v):
        u = atoms - v
        return float(np.sum(probs * np.abs(tau - (u < 0)) * u))

    lo, hi = support.v_min, support.v_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if foc(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fit_categorical(samples, support: ValueSupport) -> np.ndarray:
    """Cross-entropy optimum over categoricals: mean of the projected samples."""
    return c51_project(np.asarray(samples, dtype=np.float64), support).mean(axis=0)


def prop1_oracle(samples, tau: float, p: int, support: ValueSupport | None = None) -> tuple[float, float]:
    """(direct asymmetric minimiser, fit-distribution-then-extract value).

    With no support given, the default [-0.1, 1.1] support is used when it
    covers the samples; otherwise a K=201 support spanning the sample range.
    """
    u = np.asarray(samples, dtype=np.float64).ravel()
    if u.size < 1:
        raise ContractViolation("need at least one sample")
    if not 0 < tau < 1 or p not in (1, 2):
        raise ContractViolation("tau must be in (0, 1) and p in {1, 2}")
    if support is None:
        support = DEFAULT_SUPPORT
        if u.min() < support.v_min or u.max() > support.v_max:
            support = ValueSupport(201, float(np.floor(u.min())), float(np.ceil(u.max())) + (u.min() == u.max()))
    lo, hi = float(u.min()), float(u.max())
    if hi > lo:
        direct = golden_section_min(lambda v: float(asymmetric_loss(u - v, tau, p).sum()), lo, hi)
    else:
        direct = lo
    probs = fit_categorical(u, support)
    if p == 1:
        extract = float(quantile(probs, tau, support))
    else:
        extract = discrete_expectile(probs, tau, support)
    return direct, extract
