import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from facemask.nnhead import (
    NATURAL,
    HeadParameters,
    avgpool,
    cross_entropy,
    head_backward,
    head_forward,
    init_head,
    softmax,
)
from oracles import central_difference, gradient_instance, head_loss_f64, max_relative_error


def test_avgpool_constant():
    fm = np.full((7, 11, 3), 2.5, np.float32)
    out = avgpool(fm)
    assert out.shape == (1, 2, 3)
    assert np.all(out == 2.5)


def test_avgpool_1_to_25():
    fm = np.arange(1, 26, dtype=np.float32).reshape(5, 5, 1)
    assert avgpool(fm).ravel().tolist() == [13.0]


def test_avgpool_drops_partial_windows():
    assert avgpool(np.zeros((8, 8, 1))).shape == (1, 1, 1)
    fm = np.zeros((10, 12, 2), np.float32)
    fm[5:10, 0:5, 1] = 4.0
    fm[:, 10:, :] = 99.0  # outside every full window
    out = avgpool(fm)
    assert out.shape == (2, 2, 2)
    assert out[1, 0, 1] == 4.0 and out[0, 0, 1] == 0.0 and out.max() == 4.0


def test_avgpool_too_small():
    with pytest.raises(ValueError):
        avgpool(np.zeros((4, 9, 1)))


def test_avgpool_batched_matches_single(rng):
    fm = rng.standard_normal((3, 10, 5, 4)).astype(np.float32)
    out = avgpool(fm)
    for i in range(3):
        assert np.array_equal(out[i], avgpool(fm[i]))


def test_zero_params_uniform(rng):
    fm = rng.standard_normal((5, 5, 7)).astype(np.float32)
    tr = head_forward(fm, HeadParameters.zeros(7), train=False)
    assert tr.probs.tolist() == [0.5, 0.5]


def test_crafted_logits():
    p = HeadParameters.zeros(3, hidden=4)
    p.b2[:] = [math.log(3.0), 0.0]
    tr = head_forward(np.ones((5, 5, 3)), p)
    np.testing.assert_allclose(tr.z2, [math.log(3.0), 0.0], rtol=1e-7)
    np.testing.assert_allclose(tr.probs, [0.75, 0.25], rtol=1e-6)


def test_train_all_kept_doubles_activations(rng):
    fm = rng.standard_normal((5, 5, 6)).astype(np.float32)
    p = init_head(6, rng, hidden=16)
    ev = head_forward(fm, p, train=False)
    tr = head_forward(fm, p, train=True, mask=np.ones(16, bool))
    np.testing.assert_allclose(tr.z2, (2 * ev.a1) @ p.W2 + p.b2, rtol=1e-6)
    assert np.array_equal(tr.a1, ev.a1)


def test_forward_shapes_and_trace(rng):
    fm = rng.standard_normal((4, 10, 5, 3)).astype(np.float32)
    p = init_head(6, rng)
    tr = head_forward(fm, p, train=True, rng=rng)
    assert tr.pooled.shape == (4, 2, 1, 3)
    assert tr.flat.shape == (4, 6)
    assert tr.z1.shape == tr.a1.shape == tr.mask.shape == (4, 128)
    assert tr.probs.shape == (4, 2)
    np.testing.assert_allclose(tr.probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(tr.probs > 0) and np.all(tr.probs < 1)
    assert np.array_equal(tr.a1, np.maximum(tr.z1, 0))


def test_forward_flatten_is_row_major():
    fm = np.zeros((10, 10, 2), np.float32)
    fm[0:5, 5:10, 1] = 1.0  # pooled cell (0, 1), channel 1 -> flat index 3
    p = HeadParameters.zeros(8, hidden=1)
    tr = head_forward(fm, p)
    assert tr.flat.tolist() == [0, 0, 0, 1, 0, 0, 0, 0]


def test_forward_errors(rng):
    p = init_head(6, rng)
    with pytest.raises(ValueError, match="flattened"):
        head_forward(np.zeros((5, 5, 5)), p)
    with pytest.raises(ValueError, match="non-finite"):
        head_forward(np.full((5, 10, 3), np.nan), p)
    with pytest.raises(ValueError, match="rng"):
        head_forward(np.zeros((5, 10, 3)), p, train=True)


def test_eval_is_deterministic(rng):
    fm = rng.standard_normal((5, 5, 8)).astype(np.float32)
    p = init_head(8, rng)
    a = head_forward(fm, p).probs
    b = head_forward(fm, p).probs
    assert a.tobytes() == b.tobytes()


@settings(max_examples=200, deadline=None)
@given(z=arrays(np.float64, st.integers(2, 6), elements=st.floats(-50, 50)),
       c=st.floats(-30, 30))
def test_softmax_normalized_and_shift_invariant(z, c):
    p = softmax(z)
    assert abs(p.sum() - 1) < 1e-6
    np.testing.assert_allclose(softmax(z + c), p, atol=1e-7)


def test_softmax_extreme_logits():
    p = softmax(np.array([1e4, -1e4], np.float32))
    assert np.all(np.isfinite(p)) and p[0] == 1.0


@pytest.mark.parametrize("probs, onehot, expected", [
    ([1.0, 0.0], [1, 0], 0.0),
    ([0.5, 0.5], [1, 0], 1.0),
    ([0.25, 0.75], [0, 1], math.log2(4 / 3)),
    ([0.0, 1.0], [1, 0], -math.log2(1e-12)),  # clamped
])
def test_cross_entropy_values(probs, onehot, expected):
    assert cross_entropy(probs, onehot) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_natural_base():
    assert cross_entropy([0.5, 0.5], [1, 0], NATURAL) == pytest.approx(math.log(2))


def test_cross_entropy_batch_mean():
    probs = np.array([[0.5, 0.5], [1.0, 0.0]])
    onehot = np.array([[1, 0], [1, 0]])
    assert cross_entropy(probs, onehot) == pytest.approx(0.5)


def test_cross_entropy_shape_mismatch():
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.5], [1, 0, 0])


def test_backward_stationary_when_onehot_equals_probs(rng):
    fm = rng.standard_normal((5, 5, 4)).astype(np.float32)
    p = init_head(4, rng, hidden=8)
    tr = head_forward(fm, p, train=True, rng=rng)
    g = head_backward(tr, tr.probs.copy(), p)
    for a in g.arrays():
        assert not np.any(a)


def test_backward_zero_input_gives_zero_dW1(rng):
    p = init_head(4, rng, hidden=8)
    p.b1[:] = rng.uniform(0.1, 1.0, 8).astype(np.float32)
    tr = head_forward(np.zeros((5, 5, 4), np.float32), p, train=True, mask=np.ones(8, bool))
    g = head_backward(tr, [1.0, 0.0], p)
    assert not np.any(g.dW1)
    assert np.any(g.db1)


def test_backward_mismatch(rng):
    p = init_head(4, rng, hidden=8)
    tr = head_forward(np.zeros((5, 5, 4), np.float32), p)
    with pytest.raises(ValueError):
        head_backward(tr, [1.0, 0.0, 0.0], p)
    with pytest.raises(ValueError):
        head_backward(tr, [1.0, 0.0], init_head(5, rng, hidden=8))


def check_gradients(fm, params, mask, onehot, base_log2=True):
    p = HeadParameters(*params)
    tr = head_forward(fm, p, train=True, mask=mask)
    g = head_backward(tr, onehot, p, "log2" if base_log2 else "natural")
    numeric = central_difference(
        lambda ps: head_loss_f64(fm, *ps, mask, onehot, True, log2=base_log2)[0], params, eps=1e-3)
    return max_relative_error(g.arrays(), numeric)


def test_gradients_small_dims_match_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(10):
        fm, params, mask, onehot = gradient_instance(rng, max_flat=4, max_hidden=4)
        assert check_gradients(fm, params, mask, onehot) < 1e-3


def test_gradients_natural_log(rng):
    fm, params, mask, onehot = gradient_instance(np.random.default_rng(5))
    assert check_gradients(fm, params, mask, onehot, base_log2=False) < 1e-3


def test_batched_gradient_is_mean_of_singles(rng):
    fm = rng.standard_normal((3, 5, 5, 4)).astype(np.float32)
    p = init_head(4, rng, hidden=8)
    masks = rng.random((3, 8)) < 0.5
    y = np.eye(2, dtype=np.float32)[[0, 1, 1]]
    gb = head_backward(head_forward(fm, p, train=True, mask=masks), y, p)
    singles = [head_backward(head_forward(fm[i], p, train=True, mask=masks[i]), y[i], p) for i in range(3)]
    for k, a in enumerate(gb.arrays()):
        np.testing.assert_allclose(a, np.mean([s.arrays()[k] for s in singles], axis=0), rtol=1e-5, atol=1e-7)


def test_dropout_expectation_per_unit():
    # kept-and-doubled output has per-sample sd equal to the activation, so
    # 10,000 masks give a 1% standard error per unit: 2% is only 2 sigma per
    # unit, hence 2% on the unit average and a 5-sigma bound per unit
    rng = np.random.default_rng(2024)
    p = init_head(8, rng, hidden=8)
    p.W1[:] = np.abs(p.W1)
    p.b1[:] = 1.0
    fm = np.abs(rng.standard_normal((5, 5, 8))).astype(np.float32)
    ev = head_forward(fm, p)
    assert np.all(ev.a1 > 0)
    n = 10_000
    tr = head_forward(np.broadcast_to(fm, (n, 5, 5, 8)), p, train=True, rng=np.random.default_rng(99))
    mean = (tr.a1 * tr.mask * 2.0).mean(axis=0)
    rel = np.abs(mean - ev.a1) / ev.a1
    assert np.mean(rel) < 0.02
    np.testing.assert_array_less(rel, 0.05)
    assert abs(tr.mask.mean() - 0.5) < 0.01
