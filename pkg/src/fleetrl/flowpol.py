"""Flow-matching chunk policy and adjoint-matching policy extraction.

A flow field f(s, a^w, w) is integrated with forward Euler from Gaussian
noise (w = 0) to an action chunk (w = 1).  Policy improvement keeps a frozen
reference field and regresses the trainable field toward local targets
built from the critic's action gradient at the generated endpoint, carried
backwards along the reference trajectory by the lean adjoint recursion.
No gradient ever flows through the sampler itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fleetrl import diffcore as dc
from fleetrl.errors import ContractViolation, NumericError

N_FLOW = 10


def init_field(obs_dim: int, chunk_dim: int, hidden=(128, 128), seed: int = 0) -> dc.DenseNet:
    return dc.init_net((obs_dim + chunk_dim + 1, *hidden, chunk_dim), seed, out_scale=0.5)


def field_input(obs: np.ndarray, a: np.ndarray, w) -> np.ndarray:
    B = len(a)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64).reshape(-1, 1), (B, 1))
    return np.concatenate([obs, a, w], axis=1)


def field_velocity(field: dc.DenseNet, obs: np.ndarray, a: np.ndarray, w) -> np.ndarray:
    return dc.forward(field, field_input(obs, a, w))


def fm_interpolate(a1, a0, w):
    if np.any(np.asarray(w) < 0) or np.any(np.asarray(w) > 1):
        raise ContractViolation("w must lie in [0, 1]")
    return (1.0 - w) * np.asarray(a0) + w * np.asarray(a1)


def sft_loss(field: dc.DenseNet, obs: np.ndarray, a1: np.ndarray, seed=None,
             *, a0: np.ndarray | None = None, w: np.ndarray | None = None) -> dc.GradResult:
    """Flow-matching regression of f(s, a^w, w) onto a1 - a0.

    The loss is the squared error summed over chunk dimensions and averaged
    over the batch; ``a0`` and ``w`` are drawn from ``seed`` unless given.
    """
    a1 = np.asarray(a1, dtype=np.float64).reshape(len(obs), -1)
    rng = np.random.default_rng(seed)
    if a0 is None:
        a0 = rng.standard_normal(a1.shape)
    if w is None:
        w = rng.random(len(a1))
    w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    aw = fm_interpolate(a1, a0, w)
    x = field_input(obs, aw, w)
    B = len(a1)

    def up(pred):
        err = pred - (a1 - a0)
        return float((err ** 2).sum(axis=1).mean()), 2.0 * err / B

    return dc.backward(field, x, up)


@dataclass(frozen=True, eq=False)
class FlowTrajectory:
    times: np.ndarray        # (N + 1,)
    states: np.ndarray       # (N + 1, B, D); states[0] is the noise
    velocities: np.ndarray   # (N, B, D); velocity used for each Euler step

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n_flow(self) -> int:
        return len(self.times) - 1


@dataclass(frozen=True, eq=False)
class AdjointPath:
    adjoints: np.ndarray     # (N + 1, B, D), adjoints[-1] is the terminal condition


def sample_action(field: dc.DenseNet, obs: np.ndarray, n_flow: int = N_FLOW, seed=None,
                  *, noise: np.ndarray | None = None) -> tuple[np.ndarray, FlowTrajectory]:
    """Forward Euler from Gaussian noise over a uniform grid on [0, 1]."""
    if n_flow < 1:
        raise ContractViolation("n_flow must be >= 1")
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    B = len(obs)
    D = field.out_dim
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal((B, D))
    a = np.array(noise, dtype=np.float64).reshape(B, D)
    dw = 1.0 / n_flow
    times = np.linspace(0.0, 1.0, n_flow + 1)
    states = [a]
    vels = []
    for j in range(n_flow):
        v = field_velocity(field, obs, a, times[j])
        a = a + dw * v
        if not np.isfinite(a).all():
            raise NumericError(f"non-finite flow state at step {j}", where=j)
        vels.append(v)
        states.append(a)
    traj = FlowTrajectory(times, np.stack(states), np.stack(vels))
    return traj.endpoint, traj


def solve_adjoint(ref: dc.DenseNet, obs: np.ndarray, traj: FlowTrajectory,
                  terminal_grad: np.ndarray, lam: float) -> AdjointPath:
    """Lean adjoint: g_N = -grad/lam, g_{j-1} = g_j + dw * J_ref(a_j, w_j)^T g_j."""
    N = traj.n_flow
    B, D = traj.endpoint.shape
    dw = 1.0 / N
    g = -np.asarray(terminal_grad, dtype=np.float64).reshape(B, D) / lam
    out = [g]
    obs_dim = obs.shape[1]
    for j in range(N, 0, -1):
        x = field_input(obs, traj.states[j], traj.times[j])
        vjp = dc.input_vjp(ref, x, g)[:, obs_dim:obs_dim + D]
        g = g + dw * vjp
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite adjoint at node {j - 1}", where=j - 1)
        out.append(g)
    return AdjointPath(np.stack(out[::-1]))


def sigma(w):
    return np.sqrt(2.0 * (1.0 - w) * w)


def qam_loss(policy: dc.DenseNet, ref: dc.DenseNet, obs: np.ndarray, traj: FlowTrajectory,
             adj: AdjointPath) -> dc.GradResult:
    """Midpoint-rule discretisation of int_0^1 || 2 f_delta / sigma_w + sigma_w g_w ||^2 dw.

    Integrand evaluated at cell midpoints (sigma never vanishes there) with
    the state and adjoint linearly interpolated between grid nodes.  Summed
    over chunk dimensions, averaged over the batch; only the policy field
    receives gradients.
    """
    N = traj.n_flow
    B, D = traj.endpoint.shape
    dw = 1.0 / N
    wm = (np.arange(N) + 0.5) * dw
    a_mid = 0.5 * (traj.states[:-1] + traj.states[1:])            # (N, B, D)
    g_mid = 0.5 * (adj.adjoints[:-1] + adj.adjoints[1:])
    s = sigma(wm)[:, None, None]
    obs_rep = np.broadcast_to(obs, (N,) + obs.shape).reshape(N * B, -1)
    w_rep = np.repeat(wm, B)
    x = field_input(obs_rep, a_mid.reshape(N * B, D), w_rep)
    f_ref = dc.forward(ref, x).reshape(N, B, D)

    def up(f_pol):
        r = 2.0 * (f_pol.reshape(N, B, D) - f_ref) / s + s * g_mid
        loss = dw * float((r ** 2).sum()) / B
        return loss, (dw * 2.0 * r * (2.0 / s) / B).reshape(N * B, D)

    res = dc.backward(policy, x, up)
    return dc.GradResult(res.loss, res.grads)


@dataclass(frozen=True, eq=False)
class PolicyUpdateInfo:
    loss: float
    grad: dc.ParamVector
    update_norm: float
    endpoint: np.ndarray


def policy_update(policy: dc.DenseNet, ref: dc.DenseNet, action_grad_fn, obs: np.ndarray,
                  lam: float, n_flow: int, seed, opt_state: dc.AdamState, lr: float,
                  *, anchor_actions: np.ndarray | None = None
                  ) -> tuple[dc.DenseNet, dc.AdamState, PolicyUpdateInfo]:
    """One QAM step.

    ``action_grad_fn(obs, chunks_flat)`` returns the critic's action gradient,
    shape (B, D).  By default the terminal condition uses the reference
    rollout's own endpoint; with ``anchor_actions`` it is evaluated at the
    replay actions instead (the trajectory still comes from the reference).
    """
    obs = np.atleast_2d(obs)
    B = len(obs)
    noise = np.random.default_rng(seed).standard_normal((B, ref.out_dim))
    endpoint, traj = sample_action(ref, obs, n_flow, noise=noise)
    if anchor_actions is not None:
        a1 = np.asarray(anchor_actions, dtype=np.float64).reshape(B, -1)
        states = traj.states.copy()
        states[-1] = a1
        traj = FlowTrajectory(traj.times, states, traj.velocities)
        endpoint = a1
    terminal = action_grad_fn(obs, endpoint)
    adj = solve_adjoint(ref, obs, traj, terminal, lam)
    res = qam_loss(policy, ref, obs, traj, adj)
    new_params, new_state = dc.opt_step(policy.params, res.grads, opt_state, lr)
    upd = float(np.linalg.norm(new_params.values - policy.params.values))
    return policy.with_params(new_params), new_state, PolicyUpdateInfo(res.loss, res.grads, upd, endpoint)


class FlowPolicy:
    """Callable wrapper used by actors and evaluation: obs batch -> (B, H, 2) chunks."""

    def __init__(self, field: dc.DenseNet, horizon: int, action_dim: int = 2,
                 n_flow: int = N_FLOW, version: int = 0):
        self.field, self.horizon, self.action_dim = field, horizon, action_dim
        self.n_flow, self.version = n_flow, version

    def act(self, obs: np.ndarray, noise: np.ndarray) -> np.ndarray:
        a, _ = sample_action(self.field, obs, self.n_flow, noise=noise)
        return a.reshape(len(obs), self.horizon, self.action_dim)

    def chunk_fn(self, seeds):
        """Batched chunk function with one noise stream per episode index."""
        rngs = [np.random.default_rng([int(s), 13]) for s in seeds]
        D = self.horizon * self.action_dim

        def fn(obs, states, specs, idx):
            noise = np.stack([rngs[i].standard_normal(D) for i in idx])
            return self.act(obs, noise)

        return fn
