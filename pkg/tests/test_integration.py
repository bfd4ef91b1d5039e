"""Speaker-vector integration methods against loop oracles and identities."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import confsat.tensor as T
from confsat.errors import ConfigurationError
from confsat.integration import (IntegrationParams, IntegrationSpec, added_param_count,
                                 apply_integration, integrate_complex_add,
                                 integrate_concat, integrate_gated_add,
                                 integrate_simple_add, integrate_weighted_simple_add)
from confsat.tensor import Tensor


def rng_of(seed):
    return np.random.default_rng(seed)


def rand_t(shape, seed):
    return Tensor(rng_of(seed).standard_normal(shape))


# -- concat ------------------------------------------------------------------


def test_concat_appends_vector_per_frame():
    out = integrate_concat(Tensor([[1.0, 2.0]]), Tensor([3.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_concat_shape():
    out = integrate_concat(rand_t((5, 4), 0), rand_t((2,), 1))
    assert out.shape == (5, 6)


def test_concat_then_linear_equals_complex_add_split():
    rng = rng_of(2)
    for trial in range(100):
        z = Tensor(rng.standard_normal((4, 3)))
        v = Tensor(rng.standard_normal(2))
        full = rng.standard_normal((5, 3))
        b = Tensor(rng.standard_normal(3))
        left = T.linear(integrate_concat(z, v), Tensor(full), b)
        right = integrate_complex_add(z, v, Tensor(full[:3]), Tensor(full[3:]), b)
        np.testing.assert_allclose(left.data, right.data, atol=1e-12)


# -- simple / complex add ------------------------------------------------------


def test_simple_add_zero_params_identity():
    z = rand_t((6, 4), 3)
    out = integrate_simple_add(z, rand_t((2,), 4), Tensor(np.zeros((2, 4))),
                               Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, z.data)


def test_simple_add_zero_vector_gives_bias():
    z = rand_t((3, 4), 5)
    b = rand_t((4,), 6)
    out = integrate_simple_add(z, Tensor(np.zeros(2)), rand_t((2, 4), 7), b)
    np.testing.assert_allclose(out.data, z.data + b.data, rtol=1e-12)


def test_simple_add_matches_frame_loop():
    rng = rng_of(8)
    z, v = rng.standard_normal((5, 3)), rng.standard_normal(2)
    U, b = rng.standard_normal((2, 3)), rng.standard_normal(3)
    out = integrate_simple_add(Tensor(z), Tensor(v), Tensor(U), Tensor(b))
    corr = v @ U + b
    expect = np.stack([z[t] + corr for t in range(5)])
    np.testing.assert_array_equal(out.data, expect)


def test_complex_add_identity_and_collapse():
    z = rand_t((4, 3), 9)
    out = integrate_complex_add(z, rand_t((2,), 10), Tensor(np.eye(3)),
                                Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, z.data)
    rng = rng_of(11)
    v, U, b = rng.standard_normal(2), rng.standard_normal((2, 3)), rng.standard_normal(3)
    out = integrate_complex_add(z, Tensor(v), Tensor(np.zeros((3, 3))), Tensor(U), Tensor(b))
    np.testing.assert_allclose(out.data, np.tile(v @ U + b, (4, 1)), rtol=1e-12)


def test_complex_add_matches_frame_loop():
    rng = rng_of(12)
    z, v = rng.standard_normal((4, 3)), rng.standard_normal(2)
    W, U, b = rng.standard_normal((3, 3)), rng.standard_normal((2, 3)), rng.standard_normal(3)
    out = integrate_complex_add(Tensor(z), Tensor(v), Tensor(W), Tensor(U), Tensor(b))
    expect = np.stack([z[t] @ W + v @ U + b for t in range(4)])
    np.testing.assert_allclose(out.data, expect, rtol=1e-12)


def test_simple_add_equals_complex_add_with_identity_w():
    rng = rng_of(13)
    z, v = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal(3))
    U, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(4))
    a = integrate_simple_add(z, v, U, b)
    c = integrate_complex_add(z, v, Tensor(np.eye(4)), U, b)
    np.testing.assert_allclose(a.data, c.data, atol=1e-12)


# -- gated add ---------------------------------------------------------------------


def test_gated_add_identity_init():
    z = rand_t((5, 4), 14)
    out = integrate_gated_add(z, rand_t((3,), 15), Tensor(np.zeros((3, 4))),
                              Tensor(np.zeros((3, 4))), Tensor(np.ones(4)),
                              Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, z.data)


def test_gated_add_zero_gate_zeroes_output():
    z = rand_t((5, 4), 16)
    out = integrate_gated_add(z, rand_t((3,), 17), Tensor(np.zeros((3, 4))),
                              Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)),
                              Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((5, 4)))


def test_gated_add_matches_frame_loop():
    rng = rng_of(18)
    z, v = rng.standard_normal((4, 3)), rng.standard_normal(2)
    W, U = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    b1, b2 = rng.standard_normal(3), rng.standard_normal(3)
    out = integrate_gated_add(Tensor(z), Tensor(v), Tensor(W), Tensor(U),
                              Tensor(b1), Tensor(b2))
    gamma = np.tanh(v @ W) + b1
    beta = np.tanh(v @ U) + b2
    expect = np.stack([z[t] * gamma + beta for t in range(4)])
    np.testing.assert_allclose(out.data, expect, rtol=1e-12)


# -- weighted simple add ---------------------------------------------------------------


def _wsa(z, v, W, U, b1, b2, k=0.4, st_=False):
    return integrate_weighted_simple_add(Tensor(z), Tensor(v), Tensor(W), Tensor(U),
                                         Tensor(b1), Tensor(b2), k, st_)


def test_weighted_zero_correction_is_identity_for_any_weights():
    rng = rng_of(19)
    z, v = rng.standard_normal((5, 3)), rng.standard_normal(2)
    W, b1 = rng.standard_normal((2, 3)), rng.standard_normal(3)
    out, _ = _wsa(z, v, W, np.zeros((2, 3)), b1, np.zeros(3))
    np.testing.assert_array_equal(out.data, z.data)


def test_weighted_orthogonal_frames_score_half():
    v = np.array([1.0])
    W = np.zeros((1, 3))
    b1 = np.array([1.0, 0.0, 0.0])          # key = [1, 0, 0]
    z = np.array([[0.0, 2.0, -1.0]])        # orthogonal to the key
    U, b2 = np.array([[0.5, 0.5, 0.5]]), np.zeros(3)
    out, w = _wsa(z, v, W, U, b1, b2)
    assert w.data[0] == 0.5                  # sigmoid(0), above k=0.4
    np.testing.assert_allclose(out.data, z + 0.5 * (v @ U + b2), rtol=1e-12)


def test_weighted_below_threshold_returns_input_bit_exactly():
    # key chosen so the frame score is exactly -2: sigmoid(-2) ~ 0.119 < 0.4
    z = np.array([[2.0, 0.0]])
    b1 = np.array([-1.0, 0.0])
    v = np.array([1.0])
    out, w = _wsa(z, v, np.zeros((1, 2)), np.ones((1, 2)), b1, np.ones(2))
    assert w.data[0] == 0.0
    assert np.array_equal(out.data, z)
    np.testing.assert_allclose(1 / (1 + np.exp(2)), 0.11920292202211755, rtol=1e-12)


def test_weighted_above_threshold_reference_value():
    z = np.array([[2.0, 0.0]])
    b1 = np.array([1.0, 0.0])               # score = 2
    v = np.array([1.0])
    U, b2 = np.array([[0.25, -0.5]]), np.zeros(2)
    out, w = _wsa(z, v, np.zeros((1, 2)), U, b1, b2)
    np.testing.assert_allclose(w.data[0], 0.8807970779778823, rtol=1e-12)
    np.testing.assert_allclose(out.data, z + w.data[0] * (v @ U + b2), rtol=1e-12)


def test_weighted_matches_frame_loop():
    rng = rng_of(20)
    z, v = rng.standard_normal((6, 3)), rng.standard_normal(2)
    W, U = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    b1, b2 = rng.standard_normal(3), rng.standard_normal(3)
    out, w = _wsa(z, v, W, U, b1, b2)
    key = np.tanh(v @ W) + b1
    corr = v @ U + b2
    for t in range(6):
        wt = 1 / (1 + np.exp(-(z[t] @ key)))
        wt = wt if wt >= 0.4 else 0.0
        assert w.data[t] == pytest.approx(wt, rel=1e-12)
        np.testing.assert_allclose(out.data[t], z[t] + wt * corr, rtol=1e-10, atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_weighted_all_below_threshold_passthrough(seed):
    rng = rng_of(seed)
    z = rng.standard_normal((4, 3))
    # key pushes every score strongly negative
    b1 = -10.0 * np.sign(z.sum(axis=0))
    out, w = _wsa(z, np.zeros(2), np.zeros((2, 3)), rng.standard_normal((2, 3)),
                  b1, rng.standard_normal(3))
    if np.all(w.data == 0.0):
        assert np.array_equal(out.data, z)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_frame_permutation_commutes(seed):
    rng = rng_of(seed)
    z, v = rng.standard_normal((5, 3)), rng.standard_normal(2)
    U, b = rng.standard_normal((2, 3)), rng.standard_normal(3)
    perm = rng.permutation(5)
    a = integrate_simple_add(Tensor(z[perm]), Tensor(v), Tensor(U), Tensor(b)).data
    b_ = integrate_simple_add(Tensor(z), Tensor(v), Tensor(U), Tensor(b)).data[perm]
    np.testing.assert_array_equal(a, b_)
    W, b1, b2 = rng.standard_normal((2, 3)), rng.standard_normal(3), rng.standard_normal(3)
    outp, wp = _wsa(z[perm], v, W, U, b1, b2)
    out, w = _wsa(z, v, W, U, b1, b2)
    np.testing.assert_array_equal(wp.data, w.data[perm])
    np.testing.assert_array_equal(outp.data, out.data[perm])


def test_threshold_blocks_gradient_unless_straight_through():
    rng = rng_of(21)
    z = rng.standard_normal((1, 2))
    z = z / np.linalg.norm(z) * 3.0
    key_b1 = -z[0] / np.linalg.norm(z[0])    # score = -3, well below k
    W = Tensor(np.zeros((1, 2)), requires_grad=True)
    out, w = integrate_weighted_simple_add(Tensor(z), Tensor(np.ones(1)), W,
                                           Tensor(np.ones((1, 2))), Tensor(key_b1),
                                           Tensor(np.zeros(2)), 0.4)
    assert w.data[0] == 0.0
    T.reduce_sum(out).backward()
    np.testing.assert_array_equal(W.grad, np.zeros((1, 2)))


# -- dispatch and parameters -------------------------------------------------------------


def test_apply_integration_dispatch_and_validation():
    spec = IntegrationSpec(method="simple_add", blocks=[1], embedding_dim=2)
    spec.validate(4)
    params = IntegrationParams("simple_add", 3, 2, np.float64)
    z, v = rand_t((4, 3), 22), rand_t((2,), 23)
    np.testing.assert_array_equal(apply_integration(z, v, spec, params).data, z.data)
    bad = IntegrationSpec(method="nope", blocks=[1], embedding_dim=2)
    with pytest.raises(ConfigurationError):
        bad.validate(4)
    with pytest.raises(ConfigurationError):
        IntegrationSpec(blocks=[9], embedding_dim=2).validate(4)
    with pytest.raises(ConfigurationError):
        IntegrationSpec(blocks=[], embedding_dim=2).validate(4)
    with pytest.raises(ConfigurationError):
        IntegrationSpec(target="ffn1_in", embedding_dim=2).validate(4)


def test_warm_start_params_are_identity_for_every_method():
    rng = rng_of(24)
    z, v = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal(3))
    for method in ("simple_add", "complex_add", "gated_add", "weighted_simple_add"):
        spec = IntegrationSpec(method=method, blocks=[1], embedding_dim=3)
        params = IntegrationParams(method, 4, 3, np.float64)
        out = apply_integration(z, v, spec, params)
        assert np.array_equal(out.data, z.data), method


def test_random_init_params_receive_gradients():
    rng = rng_of(25)
    z = Tensor(rng.standard_normal((5, 4)))
    v = Tensor(rng.standard_normal(3))
    for method in ("simple_add", "complex_add", "gated_add", "weighted_simple_add"):
        spec = IntegrationSpec(method=method, blocks=[1], embedding_dim=3)
        params = IntegrationParams(method, 4, 3, np.float64, rng=rng, init="random")
        for p in params.parameters():
            p.requires_grad = True
        out = apply_integration(z, v, spec, params)
        T.reduce_sum(T.mul(out, out)).backward()
        for name, p in params.named_parameters():
            assert p.grad is not None and np.any(p.grad != 0), (method, name)


def test_added_param_count_formulas():
    spec = IntegrationSpec(method="simple_add", blocks=[1], embedding_dim=8)
    assert added_param_count(spec, 16, 32) == 8 * 16 + 16
    spec = IntegrationSpec(method="weighted_simple_add", blocks=[1, 2], embedding_dim=8)
    assert added_param_count(spec, 16, 32) == 2 * (2 * 8 * 16 + 2 * 16)
    spec = IntegrationSpec(method="concat", blocks=[0, 1], embedding_dim=8)
    assert added_param_count(spec, 16, 32) == 8 * 32 + 3 * 8 * 16
