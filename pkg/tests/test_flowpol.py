import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from fleetrl import diffcore as dc
from fleetrl import flowpol as F
from fleetrl.errors import ContractViolation

OBS, D = 3, 4


def tiny_field(seed=0, hidden=(8,)):
    return F.init_field(OBS, D, hidden, seed)


def linear_field(A=None, bias=None):
    """Single affine layer: f(s, a, w) = A a + bias (ignores s and w)."""
    net = dc.init_net((OBS + D + 1, D), 0)
    v = net.params.unflatten()
    v["W0"][...] = 0.0
    v["b0"][...] = 0.0 if bias is None else bias
    if A is not None:
        v["W0"][OBS:OBS + D, :] = np.asarray(A).T
    return net


def test_interpolate_endpoints_and_midpoint():
    a1, a0 = np.array([1.0, 2.0]), np.array([-1.0, 0.0])
    assert np.array_equal(F.fm_interpolate(a1, a0, 0.0), a0)
    assert np.array_equal(F.fm_interpolate(a1, a0, 1.0), a1)
    assert np.array_equal(F.fm_interpolate(a1, a0, 0.5), [0.0, 1.0])
    with pytest.raises(ContractViolation):
        F.fm_interpolate(a1, a0, 1.5)


def test_sft_loss_zero_for_exact_field():
    c = np.array([0.3, -0.2, 0.1, 0.5])
    net = linear_field(A=-np.eye(D), bias=c)     # at w=0: f = c - a0 = a1 - a0
    rng = np.random.default_rng(0)
    obs = rng.standard_normal((5, OBS))
    res = F.sft_loss(net, obs, np.tile(c, (5, 1)), 1, w=np.zeros(5))
    assert res.loss == pytest.approx(0.0, abs=1e-24)


def test_sft_loss_zero_field_is_one_per_dimension():
    net = linear_field()
    B = 100_000
    res = F.sft_loss(net, np.zeros((B, OBS)), np.zeros((B, D)), 7)
    assert res.loss / D == pytest.approx(1.0, rel=0.01)


@given(st.integers(0, 10_000))
def test_sft_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    net = tiny_field(seed)
    obs, a1 = rng.standard_normal((3, OBS)), rng.standard_normal((3, D))
    a0, w = rng.standard_normal((3, D)), rng.random(3)
    res = F.sft_loss(net, obs, a1, a0=a0, w=w)
    num = dc.numeric_grad(lambda p: F.sft_loss(net.with_params(net.params.like(p)), obs, a1, a0=a0, w=w).loss,
                          net.params.values, 1e-5)
    assert dc.relative_error(res.grads.values, num) < 1e-4


def test_sampling_zero_and_constant_fields():
    noise = np.random.default_rng(0).standard_normal((6, D))
    end, traj = F.sample_action(linear_field(), np.zeros((6, OBS)), 10, noise=noise)
    assert np.array_equal(end, noise) and traj.states.shape == (11, 6, D)
    c = np.array([0.5, -1.0, 0.25, 2.0])
    end, traj = F.sample_action(linear_field(bias=c), np.zeros((6, OBS)), 10, noise=noise)
    assert np.allclose(end, noise + c, atol=1e-12)
    assert np.array_equal(traj.states[0], noise)
    # Euler recursion holds exactly
    assert np.array_equal(traj.states[1:], traj.states[:-1] + 0.1 * traj.velocities)
    with pytest.raises(ContractViolation):
        F.sample_action(linear_field(), np.zeros((1, OBS)), 0)


def test_sft_on_point_mass_concentrates_at_target():
    a_star = np.array([0.4, -0.3, 0.2, 0.1])
    field = F.init_field(OBS, D, (32, 32), 0)
    opt = dc.AdamState.fresh(field.params)
    obs = np.zeros((256, OBS))
    noise = np.random.default_rng(99).standard_normal((200, D))
    spreads = []
    for step in range(2000):
        res = F.sft_loss(field, obs, np.tile(a_star, (256, 1)), [0, step])
        p, opt = dc.opt_step(field.params, res.grads, opt, 3e-3)
        field = field.with_params(p)
        if step in (249, 999, 1999):
            end, _ = F.sample_action(field, np.zeros((200, OBS)), 10, noise=noise)
            spreads.append(end.std(axis=0).mean())
    assert np.abs(end.mean(axis=0) - a_star).max() < 0.05
    assert spreads[0] > spreads[1] > spreads[2]


def test_adjoint_trivial_cases():
    ref = tiny_field(1)
    obs = np.zeros((2, OBS))
    _, traj = F.sample_action(ref, obs, 10, noise=np.ones((2, D)))
    adj = F.solve_adjoint(ref, obs, traj, np.zeros((2, D)), 2.0)
    assert not adj.adjoints.any()
    const = linear_field(bias=np.ones(D))      # zero Jacobian in a
    _, traj = F.sample_action(const, obs, 10, noise=np.ones((2, D)))
    g = np.random.default_rng(0).standard_normal((2, D))
    adj = F.solve_adjoint(const, obs, traj, g, 2.0)
    assert np.allclose(adj.adjoints, -g / 2.0)


def test_adjoint_linear_field_matches_matrix_exponential():
    rng = np.random.default_rng(3)
    A = 0.5 * rng.standard_normal((D, D))
    ref = linear_field(A)
    g1 = rng.standard_normal((1, D))
    exact = (expm(A.T) @ (-g1[0] / 2.0))
    errs = []
    for n in (10, 20, 40, 80):
        _, traj = F.sample_action(ref, np.zeros((1, OBS)), n, noise=np.zeros((1, D)))
        g0 = F.solve_adjoint(ref, np.zeros((1, OBS)), traj, g1, 2.0).adjoints[0, 0]
        errs.append(np.linalg.norm(g0 - exact) / np.linalg.norm(exact))
        if n == 10:
            assert errs[0] < 10 * (1.0 / n)
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 0.8


def test_sigma_values():
    assert F.sigma(0.5) == pytest.approx(np.sqrt(0.5))
    assert F.sigma(0.0) == 0.0 and F.sigma(1.0) == 0.0


def test_qam_loss_zero_when_policy_equals_reference_and_no_adjoint():
    ref = tiny_field(2)
    obs = np.random.default_rng(0).standard_normal((4, OBS))
    _, traj = F.sample_action(ref, obs, 10, seed=1)
    adj = F.AdjointPath(np.zeros((11, 4, D)))
    assert F.qam_loss(ref, ref, obs, traj, adj).loss == 0.0


@given(st.integers(0, 10_000))
def test_qam_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    ref, pol = tiny_field(seed), tiny_field(seed + 1)
    obs = rng.standard_normal((2, OBS))
    _, traj = F.sample_action(ref, obs, 5, seed=seed)
    adj = F.solve_adjoint(ref, obs, traj, rng.standard_normal((2, D)), 2.0)
    res = F.qam_loss(pol, ref, obs, traj, adj)
    num = dc.numeric_grad(lambda p: F.qam_loss(pol.with_params(pol.params.like(p)), ref, obs, traj, adj).loss,
                          pol.params.values, 1e-5)
    assert dc.relative_error(res.grads.values, num) < 1e-4


def test_zero_critic_gradient_pulls_policy_to_reference():
    ref = tiny_field(4)
    rng = np.random.default_rng(0)
    pol = ref.with_params(ref.params.like(ref.params.values + 0.05 * rng.standard_normal(len(ref.params))))
    obs = rng.standard_normal((64, OBS))
    noise = rng.standard_normal((64, D))
    opt = dc.AdamState.fresh(pol.params)
    gaps, losses = [], []
    for k in range(60):
        pol, opt, info = F.policy_update(pol, ref, lambda o, a: np.zeros_like(a), obs, 2.0, 10, [1, k], opt, 1e-3)
        losses.append(info.loss)
        e_pol, _ = F.sample_action(pol, obs, 10, noise=noise)
        e_ref, _ = F.sample_action(ref, obs, 10, noise=noise)
        gaps.append(np.linalg.norm(e_pol - e_ref))
    assert gaps[-1] < 0.5 * gaps[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_policy_update_scales_inversely_with_lambda_at_reference():
    ref = tiny_field(5)
    obs = np.random.default_rng(1).standard_normal((16, OBS))
    a_star = np.full(D, 0.7)
    grad_fn = lambda o, a: -2.0 * (a - a_star)
    norms = {}
    for lam in (2.0, 1e6):
        _, _, info = F.policy_update(ref, ref, grad_fn, obs, lam, 10, 0, dc.AdamState.fresh(ref.params), 1e-3)
        norms[lam] = np.linalg.norm(info.grad.values)
    assert norms[1e6] / norms[2.0] == pytest.approx(2.0 / 1e6, rel=1e-6)


def test_anchored_endpoint_uses_replay_action():
    ref = tiny_field(6)
    obs = np.zeros((3, OBS))
    anchor = np.full((3, D), 0.25)
    seen = {}

    def grad_fn(o, a):
        seen["a"] = a.copy()
        return np.zeros_like(a)

    _, _, info = F.policy_update(ref, ref, grad_fn, obs, 2.0, 10, 0, dc.AdamState.fresh(ref.params), 1e-3,
                                 anchor_actions=anchor)
    assert np.array_equal(seen["a"], anchor) and np.array_equal(info.endpoint, anchor)


def test_flow_policy_chunk_fn_is_per_episode_deterministic():
    field = F.init_field(6, 60, (8,), 0)
    pol = F.FlowPolicy(field, 30)
    fn_a = pol.chunk_fn([1, 2, 3])
    fn_b = pol.chunk_fn([3])
    obs = np.zeros((3, 6))
    a = fn_a(obs, None, None, [0, 1, 2])
    b = fn_b(obs[:1], None, None, [0])
    assert a.shape == (3, 30, 2) and np.allclose(a[2], b[0], atol=1e-12)
