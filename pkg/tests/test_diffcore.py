import numpy as np
import pytest
from hypothesis import given, strategies as st

from fleetrl import diffcore as dc
from fleetrl.errors import ContractViolation, NumericError


def _net(seed=0, pool=None, widths=(5, 7, 3)):
    return dc.init_net(widths, seed, pool=pool)


@given(st.integers(0, 10_000))
def test_param_grads_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = _net(seed)
    x = rng.standard_normal((4, 5))
    up = rng.standard_normal((4, 3))
    res = dc.backward(net, x, up)

    def f(v):
        return float(np.sum(up * dc.forward(net.with_params(net.params.like(v)), x)))

    num = dc.numeric_grad(f, net.params.values, 1e-5)
    assert dc.relative_error(res.grads.values, num) < 1e-5


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_pooled_net_input_and_param_grads(seed, heads):
    rng = np.random.default_rng(seed)
    pool = dc.PoolSpec(obs_dim=3, horizon=4, action_dim=2, heads=heads)
    net = dc.init_net((pool.out_dim, 6, 1), seed, pool=pool)
    # move the pooling weights off their init so attention is non-trivial
    v = net.params.values.copy()
    v[:pool.heads * (pool.horizon + pool.action_dim)] += rng.standard_normal(pool.heads * (pool.horizon + 2))
    net = net.with_params(net.params.like(v))
    x = rng.standard_normal((3, pool.in_dim))
    up = rng.standard_normal((3, 1))
    res = dc.backward(net, x, up, want_input_grad=True)

    def fx(flat):
        return float(np.sum(up * dc.forward(net, flat.reshape(x.shape))))

    def fp(p):
        return float(np.sum(up * dc.forward(net.with_params(net.params.like(p)), x)))

    assert dc.relative_error(res.input_grad, dc.numeric_grad(fx, x.ravel(), 1e-5)) < 1e-5
    assert dc.relative_error(res.grads.values, dc.numeric_grad(fp, net.params.values, 1e-5)) < 1e-5


def test_callable_upstream_matches_array_upstream():
    rng = np.random.default_rng(1)
    net = _net(1)
    x = rng.standard_normal((6, 5))
    y = rng.standard_normal((6, 3))

    def up(out):
        return float(((out - y) ** 2).sum()), 2.0 * (out - y)

    r1 = dc.backward(net, x, up)
    out = dc.forward(net, x)
    r2 = dc.backward(net, x, 2.0 * (out - y))
    assert r1.loss == pytest.approx(float(((out - y) ** 2).sum()))
    assert np.array_equal(r1.grads.values, r2.grads.values)


def test_input_vjp_skips_param_grads_but_agrees():
    rng = np.random.default_rng(2)
    net = _net(2)
    x = rng.standard_normal((3, 5))
    g = rng.standard_normal((3, 3))
    full = dc.backward(net, x, g, want_input_grad=True).input_grad
    assert np.allclose(dc.input_vjp(net, x, g), full, rtol=0, atol=0)


def test_single_vector_forward_and_shape_errors():
    net = _net()
    assert dc.forward(net, np.zeros(5)).shape == (3,)
    with pytest.raises(ContractViolation):
        dc.forward(net, np.zeros(4))
    with pytest.raises(ContractViolation):
        dc.backward(net, np.zeros((2, 5)), np.zeros((2, 2)))


def test_non_finite_forward_raises_numeric_error():
    net = _net()
    with pytest.raises(NumericError), np.errstate(all="ignore"):
        dc.forward(net, np.full((1, 5), np.inf))


def test_multi_head_pool_starts_as_segment_windows():
    pool = dc.PoolSpec(2, 30, 2, 6)
    net = dc.init_net((pool.out_dim, 4, 1), 0, pool=pool)
    u = net.params.unflatten()["pool_u"]
    assert np.array_equal(np.argmax(u, axis=1), [2, 7, 12, 17, 22, 27])
    one = dc.init_net((dc.PoolSpec(2, 30, 2, 1).out_dim, 4, 1), 0, pool=dc.PoolSpec(2, 30, 2, 1))
    assert not one.params.unflatten()["pool_u"].any()


@given(st.floats(0, 1), st.integers(0, 100))
def test_ema_update_recursion(rate, seed):
    rng = np.random.default_rng(seed)
    lay = (("w", (5,)),)
    t = dc.ParamVector(rng.standard_normal(5), lay)
    o = dc.ParamVector(rng.standard_normal(5), lay)
    new = dc.ema_update(t, o, rate)
    assert np.allclose(new.values, (1 - rate) * t.values + rate * o.values, atol=1e-15)


def test_ema_rejects_bad_rate_and_layout():
    lay = (("w", (2,)),)
    a = dc.ParamVector(np.zeros(2), lay)
    with pytest.raises(ContractViolation):
        dc.ema_update(a, a, 1.5)
    with pytest.raises(ContractViolation):
        dc.ema_update(a, dc.ParamVector(np.zeros(2), (("v", (2,)),)), 0.1)


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    lay = (("w", (3,)),)
    p = dc.ParamVector(np.zeros(3), lay)
    g = dc.ParamVector(np.array([2.0, -0.5, 0.0]), lay)
    new, state = dc.opt_step(p, g, dc.AdamState.fresh(p), lr=0.1)
    assert np.allclose(new.values, [-0.1, 0.1, 0.0], atol=1e-6)
    assert state.step == 1


def test_adam_minimises_quadratic():
    lay = (("w", (4,)),)
    p = dc.ParamVector(np.array([3.0, -2.0, 1.0, 0.5]), lay)
    s = dc.AdamState.fresh(p)
    for _ in range(2000):
        p, s = dc.opt_step(p, p.like(2 * p.values), s, 0.01)
    assert np.abs(p.values).max() < 1e-2


def test_cosine_lr_endpoints():
    assert dc.cosine_lr(1.0, 0, 100) == pytest.approx(1.0)
    assert dc.cosine_lr(1.0, 100, 100) == pytest.approx(0.1)
    assert dc.cosine_lr(1.0, 5, 0) == 1.0


def test_net_serialisation_round_trip_is_bit_exact(tmp_path):
    pool = dc.PoolSpec(3, 4, 2, 2)
    net = dc.init_net((pool.out_dim, 5, 2), 3, pool=pool)
    dc.save_net(net, tmp_path / "sub" / "net.json")
    back = dc.load_net(tmp_path / "sub" / "net.json")
    assert back.params.equals(net.params) and back.pool == net.pool
    with pytest.raises(ContractViolation):
        dc.params_from_dict({"format": "other"})


def test_relative_error_floor():
    assert dc.relative_error(np.array([1e-9]), np.array([0.0])) < 1e-2
    assert dc.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
