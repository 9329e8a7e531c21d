import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from _gradcheck import assert_grads_close, numeric_grads
from hyperfed.errors import CapacityError, FormatError, InputError
from hyperfed.model import (
    NORM_EPS,
    ClassifierHead,
    MlpExtractor,
    backward,
    forward,
    load_checkpoint,
    loss_ce,
    loss_mse,
    lr_schedule,
    normalize_rows,
    predict,
    save_checkpoint,
    sgd_step,
    tammes_rows,
)
from hyperfed.numerics import Rng

@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 8),
    st.lists(st.integers(1, 6), min_size=0, max_size=2),
    st.integers(2, 6),
    st.integers(2, 4),
    st.sampled_from(["mse", "ce"]),
    st.booleans(),
    st.booleans(),
    st.integers(0, 10**6),
)
def test_gradients_match_finite_differences(d, hidden, l, c, loss, normalize, fixed, seed):
    rng = Rng(seed)
    model = MlpExtractor.init([d, *hidden, l], rng.child(0))
    head = ClassifierHead.random(c, l, rng.child(1), fixed=fixed, normalize_features=normalize, tau=1.5)
    g = rng.child(2).generator()
    x = g.normal(size=(3, d))
    y = g.integers(0, c, size=3)
    trace = forward(model, head, x)
    # central differences are meaningless across a ReLU kink
    for pre in trace.pre[:-1]:
        assume(np.min(np.abs(pre)) > 1e-3)
    assume(np.min(np.linalg.norm(trace.z, axis=1)) > 1e-3)
    analytic = backward(trace, model, head, y, loss).as_list()
    assert_grads_close(analytic, numeric_grads(model, head, x, y, loss))


def test_fixed_head_has_no_gradient_buffer():
    rng = Rng(0)
    model = MlpExtractor.init([4, 3], rng.child(0))
    head = ClassifierHead.hyperspherical(2, 3, rng.child(1))
    trace = forward(model, head, np.ones((2, 4)))
    grads = backward(trace, model, head, [0, 1], "mse")
    assert grads.head is None
    assert len(grads.as_list()) == len(model.params())


def test_normalization_jacobian_kills_radial_direction():
    # with W = I and a linear one-layer extractor, dL/dz = J^T dL/dz~; J z = 0
    model = MlpExtractor([3, 3], [np.eye(3)], [np.zeros(3)])
    head = ClassifierHead(np.eye(3), fixed=True, normalize_features=True)
    z = np.array([[0.3, -1.2, 2.0]])
    trace = forward(model, head, z)
    zt = trace.zt[0]
    jac = (np.eye(3) - np.outer(zt, zt)) / trace.norm[0]
    np.testing.assert_allclose(jac @ z[0], 0, atol=1e-15)
    # backward applies the same projection: the bias gradient has no radial part
    grad_z = backward(trace, model, head, [1], "mse").biases[0]
    assert abs(grad_z @ z[0]) < 1e-14


def test_zero_feature_stays_finite():
    model = MlpExtractor([2, 2], [np.zeros((2, 2))], [np.zeros(2)])
    head = ClassifierHead(np.eye(2), fixed=True, normalize_features=True)
    trace = forward(model, head, np.ones((1, 2)))
    assert trace.norm[0] == NORM_EPS
    grads = backward(trace, model, head, [0], "ce").as_list()
    assert all(np.all(np.isfinite(g)) for g in grads)


def test_forward_identity_example():
    model = MlpExtractor([3, 3], [np.eye(3)], [np.zeros(3)])
    head = ClassifierHead(np.eye(3), fixed=True, normalize_features=True)
    np.testing.assert_array_equal(forward(model, head, [1.0, 0.0, 0.0]).logits, [[1.0, 0.0, 0.0]])


def test_forward_on_head_row():
    rng = Rng(4)
    head = ClassifierHead.hyperspherical(4, 6, rng)
    model = MlpExtractor([6, 6], [np.eye(6)], [np.zeros(6)])
    logits = forward(model, head, head.weights[2] * 3.7).logits[0]
    assert abs(logits[2] - 1) <= 1e-12
    assert np.max(np.abs(np.delete(logits, 2))) <= 1e-12


def test_forward_normalized_feature_norm():
    rng = Rng(5)
    model = MlpExtractor.init([8, 16, 6], rng.child(0))
    head = ClassifierHead.hyperspherical(4, 6, rng.child(1))
    trace = forward(model, head, rng.child(2).generator().normal(size=(50, 8)))
    assert np.all(np.abs(np.linalg.norm(trace.zt, axis=1) - 1) <= 1e-9)


def test_forward_rejects_non_finite():
    model = MlpExtractor.init([2, 2], Rng(0))
    with pytest.raises(InputError):
        forward(model, ClassifierHead(np.eye(2)), [np.inf, 0.0])


def test_normalize_idempotent():
    z = normalize_rows(Rng(1).generator().normal(size=(10, 5)))
    assert np.max(np.abs(normalize_rows(z) - z)) <= 1e-12


def test_mse_examples():
    assert loss_mse(np.array([0.0, 1.0, 0.0]), 1) == 0.0
    assert loss_mse(np.array([0.5, 0.0, 0.0, 0.0]), 0) == pytest.approx(0.0625, abs=1e-15)
    w = ClassifierHead.hyperspherical(5, 8, Rng(0)).weights
    assert loss_mse(w @ w[3], 1) == pytest.approx(2 / 5, abs=1e-12)


def test_ce_examples():
    assert loss_ce(np.array([0.0, 0.0]), 0) == pytest.approx(math.log(2), abs=1e-15)
    assert loss_ce(np.array([10.0, 0.0]), 0) == pytest.approx(math.log1p(math.exp(-10)), rel=1e-12)
    assert loss_ce(np.array([1.0, 0.0]), 1, tau=2.0) == pytest.approx(loss_ce(np.array([2.0, 0.0]), 1), abs=1e-15)


def test_sgd_plain_step():
    p, g = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    sgd_step([p], [g], 0.1, 0.0, 0.0, None)
    np.testing.assert_allclose(p, [0.95, 2.1], atol=1e-15)


def test_sgd_momentum_two_steps():
    p, g = np.zeros(3), np.array([1.0, -2.0, 0.5])
    state = sgd_step([p], [g], 0.1, 0.9, 0.0, None)
    sgd_step([p], [g], 0.1, 0.9, 0.0, state)
    np.testing.assert_allclose(p, -0.1 * g * (1 + 1.9), atol=1e-15)


def test_sgd_weight_decay_only():
    p = np.array([2.0, -4.0])
    sgd_step([p], [np.zeros(2)], 0.5, 0.0, 0.1, None)
    np.testing.assert_allclose(p, [2.0, -4.0] * np.array(1 - 0.5 * 0.1), atol=1e-15)


def test_lr_schedules():
    assert lr_schedule("cosine", 0, 40, 0.3) == 0.3
    assert lr_schedule("cosine", 20, 40, 0.3) == pytest.approx(0.15, abs=1e-15)
    assert lr_schedule("multistep", 85, 120, 0.1, (40, 80), 0.1) == pytest.approx(0.001, rel=1e-12)
    assert lr_schedule("multistep", 39, 120, 0.1, (40, 80), 0.1) == 0.1


def test_predict_examples():
    assert predict([0.1, 0.9]) == 1
    assert predict([0.5, 0.5]) == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(1e-3, 1e3))
def test_predict_scale_invariant(logits, scale):
    assert predict(logits) == predict(np.array(logits) * scale)


def test_hyperspherical_head_properties():
    head = ClassifierHead.hyperspherical(10, 32, Rng(0))
    assert head.fixed and head.normalize_features
    assert np.max(np.abs(head.weights @ head.weights.T - np.eye(10))) < 1e-10
    with pytest.raises(CapacityError):
        ClassifierHead.hyperspherical(5, 4, Rng(0))


def _max_cosine(w):
    return (w @ w.T - 2 * np.eye(len(w))).max()


def test_tammes_rows_are_unit_and_spread():
    w = tammes_rows(10, 32, Rng(0))
    assert np.allclose(np.linalg.norm(w, axis=1), 1, atol=1e-12)
    start = Rng(0).generator().standard_normal((10, 32))
    start /= np.linalg.norm(start, axis=1, keepdims=True)
    # the regular simplex optimum is -1/9; any negative value means every pair is obtuse
    assert _max_cosine(w) < 0 < _max_cosine(start)
    # six points on S^2: the octahedron optimum has max cosine 0
    assert _max_cosine(tammes_rows(6, 3, Rng(0))) < 0.1


def test_flatten_roundtrip():
    model = MlpExtractor.init([5, 7, 3], Rng(2))
    vec = model.flatten()
    other = MlpExtractor.init([5, 7, 3], Rng(3))
    other.unflatten(vec)
    assert np.array_equal(other.flatten(), vec)


def test_checkpoint_roundtrip(tmp_path):
    rng = Rng(1)
    model = MlpExtractor.init([5, 7, 3], rng.child(0))
    head = ClassifierHead.hyperspherical(2, 3, rng.child(1), tau=4.0)
    save_checkpoint(tmp_path / "m.ckpt", model, head)
    m2, h2 = load_checkpoint(tmp_path / "m.ckpt")
    assert m2.dims == model.dims
    assert all(np.array_equal(a, b) for a, b in zip(m2.params(), model.params()))
    assert np.array_equal(h2.weights, head.weights)
    assert (h2.fixed, h2.normalize_features, h2.tau) == (True, True, 4.0)


def test_checkpoint_corruption(tmp_path):
    model = MlpExtractor.init([2, 2], Rng(0))
    save_checkpoint(tmp_path / "m.ckpt", model, ClassifierHead(np.eye(2)))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")


def projected_descent(w, y, loss, start, steps=3000, lr=0.2):
    """Minimize the loss over unit vectors z~ by gradient steps followed by renormalization."""
    c = w.shape[0]
    z = start / np.linalg.norm(start)
    onehot = np.eye(c)[y]
    for _ in range(steps):
        o = w @ z
        if loss == "mse":
            g_o = 2.0 / c * (o - onehot)
        else:
            p = np.exp(o - o.max())
            g_o = p / p.sum() - onehot
        g = w.T @ g_o
        z = z - lr * (g - z * (g @ z))
        z /= np.linalg.norm(z)
    return z


def test_mse_minimizer_is_class_row():
    w = ClassifierHead.hyperspherical(4, 6, Rng(0)).weights
    g = Rng(1).generator()
    for y in range(4):
        # the loss is (1 - cos)^2 on the sphere, flat at the optimum, hence the long run
        z = projected_descent(w, y, "mse", g.normal(size=6), steps=20000, lr=1.0)
        assert z @ w[y] > 0.999


def test_ce_minimizer_points_at_class_row():
    # CE only sees logit margins, so its optimum on the sphere tilts away from
    # every other row: cos(z~, w_y) = sqrt((C-1)/C), still the argmax class
    c = 4
    w = ClassifierHead.hyperspherical(c, 6, Rng(0)).weights
    g = Rng(2).generator()
    for y in range(c):
        z = projected_descent(w, y, "ce", g.normal(size=6), steps=20000, lr=0.5)
        assert predict(w @ z) == y
        assert abs(z @ w[y] - math.sqrt((c - 1) / c)) < 1e-3
