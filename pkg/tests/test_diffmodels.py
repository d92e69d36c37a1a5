import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedptr import diffmodels as dm
from fedptr.diffmodels import Batch, LayerSpan, ModelError, ModelSpec, ParamVector

from conftest import central_diff, random_instance, rel_err


def test_zero_params_give_log_num_classes():
    spec = ModelSpec(3, (4, 5), "tanh")
    batch = Batch(np.random.default_rng(0).normal(size=(7, 3)), [0, 1, 2, 3, 4, 0, 1])
    assert dm.forward_loss(spec, spec.zeros(), batch) == pytest.approx(math.log(5), abs=1e-14)


def test_confident_logit_loss():
    spec = ModelSpec.softmax_regression(1, 2)
    # W = [[10], [0]], b = 0 -> logits (10, 0) for x = 1
    params = spec.wrap([10.0, 0.0, 0.0, 0.0])
    loss = dm.forward_loss(spec, params, Batch([[1.0]], [0]))
    assert loss == pytest.approx(math.log1p(math.exp(-10)), rel=1e-12)
    assert loss == pytest.approx(4.54e-5, rel=1e-3)


def test_duplicated_batch_same_loss():
    rng = np.random.default_rng(1)
    spec, params, batch = random_instance(rng)
    doubled = Batch(np.vstack([batch.features] * 2), np.concatenate([batch.labels] * 2))
    assert dm.forward_loss(spec, params, doubled) == pytest.approx(
        dm.forward_loss(spec, params, batch), rel=1e-13)


def test_bias_gradient_softmax_regression_zero_params():
    C = 4
    spec = ModelSpec.softmax_regression(2, C)
    g = dm.grad(spec, spec.zeros(), Batch([[0.3, -1.2]], [2]))
    bias = g.layer(0)[-C:]
    assert bias[2] == pytest.approx(1 / C - 1)
    assert np.allclose(np.delete(bias, 2), 1 / C)


def test_gradient_vanishes_at_minimum():
    # one class present, huge margin: loss and gradient underflow to ~0
    spec = ModelSpec.softmax_regression(1, 2)
    params = spec.wrap([0.0, 0.0, 60.0, 0.0])
    g = dm.grad(spec, params, Batch([[1.0], [-1.0]], [0, 0]))
    assert np.linalg.norm(g.values) < 1e-20


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_grad_matches_finite_differences(activation):
    rng = np.random.default_rng(7)
    for _ in range(15):
        spec, params, batch = random_instance(rng, activation)
        g = dm.grad(spec, params, batch).values
        fd = central_diff(lambda w: dm.loss_raw(spec, w, batch.features, batch.labels),
                          params.values, 1e-4)
        assert rel_err(g, fd) <= 1e-5


def test_hvp_logistic_example():
    # 2-class softmax on x=1 at zero params; direction 2 on W[0,0]
    spec = ModelSpec.softmax_regression(1, 2)
    v = spec.wrap([2.0, 0.0, 0.0, 0.0])
    hv = dm.hvp(spec, spec.zeros(), Batch([[1.0]], [0]), v)
    assert hv.values[0] == pytest.approx(0.5)


def test_hvp_zero_direction():
    rng = np.random.default_rng(2)
    spec, params, batch = random_instance(rng)
    assert not np.any(dm.hvp(spec, params, batch, params.like(np.zeros(len(params)))).values)


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_hvp_matches_gradient_differences(activation):
    rng = np.random.default_rng(11)
    eps = 1e-5
    for _ in range(15):
        spec, params, batch = random_instance(rng, activation)
        v = rng.normal(size=len(params))
        hv = dm.hvp(spec, params, batch, params.like(v)).values
        gp = dm.grad_raw(spec, params.values + eps * v, batch.features, batch.labels)
        gm = dm.grad_raw(spec, params.values - eps * v, batch.features, batch.labels)
        assert rel_err(hv, (gp - gm) / (2 * eps)) <= 1e-4


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_mixed_term_matches_finite_differences(activation):
    rng = np.random.default_rng(5)
    for _ in range(10):
        spec, params, batch = random_instance(rng, activation)
        v = rng.normal(size=len(params))
        _, mixed = dm.hvp_and_mixed(spec, params, batch, params.like(v))
        fd = central_diff(lambda x: dm.grad_raw(spec, params.values, x, batch.labels) @ v,
                          batch.features, 1e-5)
        assert rel_err(mixed, fd) <= 1e-5


def test_relu_hvp_drops_activation_curvature():
    # single hidden relu layer away from kinks: H v equals the Gauss-Newton-like
    # term, i.e. finite differences of the gradient still agree locally
    rng = np.random.default_rng(3)
    spec = ModelSpec(3, (4, 3), "relu")
    params = spec.wrap(rng.normal(size=spec.n_params))
    params.values[12:16] = 0.5  # positive hidden biases keep units off the kink
    batch = Batch(rng.normal(size=(5, 3)), rng.integers(0, 3, 5))
    v = rng.normal(size=spec.n_params)
    eps = 1e-6
    hv = dm.hvp(spec, params, batch, params.like(v)).values
    fd = (dm.grad_raw(spec, params.values + eps * v, batch.features, batch.labels)
          - dm.grad_raw(spec, params.values - eps * v, batch.features, batch.labels)) / (2 * eps)
    assert rel_err(hv, fd) <= 1e-4


def test_errors():
    spec = ModelSpec(2, (3,))
    batch = Batch([[0.0, 1.0]], [1])
    with pytest.raises(ModelError):
        dm.forward_loss(spec, ModelSpec(2, (4,)).zeros(), batch)
    bad = spec.zeros()
    bad.values[0] = np.nan
    with pytest.raises(ModelError):
        dm.grad(spec, bad, batch)
    with pytest.raises(ModelError):
        dm.forward_loss(spec, spec.zeros(), Batch([[0.0, 1.0, 2.0]], [0]))
    with pytest.raises(ModelError):
        ModelSpec(2, (3,), "tanh", num_classes=4)
    with pytest.raises(ModelError):
        ParamVector(np.zeros(3), (LayerSpan("a", 0, 2),))


def test_layer_map_partitions_vector():
    spec = ModelSpec(5, (7, 3, 2), "softplus")
    spans = spec.layer_map()
    assert spans[0].offset == 0
    assert all(a.offset + a.length == b.offset for a, b in zip(spans, spans[1:]))
    assert spans[-1].offset + spans[-1].length == spec.n_params == 5 * 7 + 7 + 7 * 3 + 3 + 3 * 2 + 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_hvp_symmetric_and_linear(seed):
    rng = np.random.default_rng(seed)
    spec, params, batch = random_instance(rng, "tanh")
    u, v = rng.normal(size=(2, len(params)))
    Hu = dm.hvp(spec, params, batch, params.like(u)).values
    Hv = dm.hvp(spec, params, batch, params.like(v)).values
    assert abs(Hu @ v - u @ Hv) <= 1e-8 * max(1.0, abs(Hu @ v))
    H_comb = dm.hvp(spec, params, batch, params.like(2.0 * u - 3.0 * v)).values
    assert np.allclose(H_comb, 2.0 * Hu - 3.0 * Hv, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    spec, params, batch = random_instance(rng)
    perm = rng.permutation(len(batch))
    shuffled = Batch(batch.features[perm], batch.labels[perm])
    assert dm.forward_loss(spec, params, shuffled) == pytest.approx(
        dm.forward_loss(spec, params, batch), rel=1e-12)


def test_deterministic_bitwise():
    rng = np.random.default_rng(9)
    spec, params, batch = random_instance(rng)
    v = params.like(rng.normal(size=len(params)))
    assert dm.forward_loss(spec, params, batch) == dm.forward_loss(spec, params, batch)
    assert dm.grad(spec, params, batch) == dm.grad(spec, params, batch)
    assert dm.hvp(spec, params, batch, v) == dm.hvp(spec, params, batch, v)
