import math

import numpy as np
import pytest

from sgds.numerics import (ContractViolation, NumericError, OptimizerState,
                           Tape, backward, cosine_lr, cross_entropy, sgd_step)


def test_cross_entropy_uniform_two_class():
    assert cross_entropy([0.0, 0.0], 0) == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_confident():
    # -log sigmoid(20) evaluated in high precision
    expected = math.log1p(math.exp(-20.0))
    assert cross_entropy([10.0, -10.0], 0) == pytest.approx(expected, rel=1e-9)


def test_cross_entropy_uniform_three_class():
    assert cross_entropy([1.0, 1.0, 1.0], 2) == pytest.approx(math.log(3), abs=1e-12)


def test_cross_entropy_empty_logits():
    with pytest.raises(ContractViolation):
        cross_entropy([], 0)


def test_backward_linear_identity():
    tape = Tape()
    v = tape.leaf(np.array([3.0, -1.0]), trainable=True)
    loss = tape.matmul(v, tape.leaf(np.ones(2)))  # sum of the vector
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[v], [1.0, 1.0])


def test_backward_uniform_softmax_gradient():
    tape = Tape()
    logits = tape.leaf(np.array([[0.0, 0.0]]), trainable=True)
    loss = tape.softmax_xent_mean(logits, np.array([0]))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[logits], [[-0.5, 0.5]], atol=1e-12)


def test_backward_rejects_nonscalar_loss():
    tape = Tape()
    v = tape.leaf(np.ones(3), trainable=True)
    with pytest.raises(ContractViolation):
        backward(tape, v)


def test_nonfinite_value_raises_with_op_index():
    tape = Tape()
    with pytest.raises(NumericError) as exc:
        tape.leaf(np.array([1.0, np.nan]))
    assert exc.value.op_index == 0


def test_frozen_leaves_get_no_gradient():
    tape = Tape()
    w = tape.leaf(np.ones(2), trainable=True)
    frozen = tape.leaf(np.array([2.0, 5.0]))
    loss = tape.matmul(w, frozen)
    grads = backward(tape, loss)
    assert set(grads) == {w}


def make_adapter_graph(seed, d, r, n_classes=4, with_mask=False, batch=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, d))
    mask = (rng.random((batch, d)) < 0.7).astype(float) if with_mask else None
    params = {
        "wd": rng.normal(size=(d, r)),
        "wu": rng.normal(size=(r, d)) * 0.5,
        "head": rng.normal(size=(d, n_classes)),
    }
    labels = rng.integers(0, n_classes, size=batch)

    def loss_fn(p):
        tape = Tape()
        nodes = {k: tape.leaf(v, trainable=True) for k, v in p.items()}
        a = tape.leaf(x)
        if mask is not None:
            a = tape.mask_mul(a, mask)
        branch = tape.matmul(tape.relu(tape.matmul(a, nodes["wd"])), nodes["wu"])
        feats = tape.add(a, branch)
        logits = tape.matmul(feats, nodes["head"])
        loss = tape.softmax_xent_mean(logits, labels)
        return tape, loss, nodes

    return params, loss_fn


def max_rel_error_vs_fd(params, loss_fn, h=1e-5):
    tape, loss, nodes = loss_fn(params)
    grads = backward(tape, loss)
    worst = 0.0
    for name, p in params.items():
        analytic = grads[nodes[name]]
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            tp, ln, _ = loss_fn(params)
            up = float(tp.value(ln))
            p[idx] = orig - h
            tp, ln, _ = loss_fn(params)
            down = float(tp.value(ln))
            p[idx] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(numeric), abs(analytic[idx]), 1e-6)
            worst = max(worst, abs(numeric - analytic[idx]) / denom)
    return worst


def test_gradients_match_finite_differences():
    params, loss_fn = make_adapter_graph(7, d=8, r=3)
    assert max_rel_error_vs_fd(params, loss_fn) < 1e-4


def test_gradients_match_finite_differences_with_mask():
    params, loss_fn = make_adapter_graph(11, d=8, r=3, with_mask=True)
    assert max_rel_error_vs_fd(params, loss_fn) < 1e-4


def test_mask_zeroes_gradient_exactly():
    tape = Tape()
    v = tape.leaf(np.array([[1.0, 2.0, 3.0]]), trainable=True)
    masked = tape.mask_mul(v, np.array([[1.0, 0.0, 1.0]]))
    loss = tape.softmax_xent_mean(masked, np.array([0]))
    grads = backward(tape, loss)
    assert grads[v][0, 1] == 0.0


def test_tape_determinism():
    def run():
        params, loss_fn = make_adapter_graph(3, d=6, r=2)
        tape, loss, nodes = loss_fn(params)
        grads = backward(tape, loss)
        return float(tape.value(loss)), {k: grads[n].copy() for k, n in nodes.items()}

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 20, 0.01) == pytest.approx(0.01, abs=1e-15)
    assert cosine_lr(10, 20, 0.01) == pytest.approx(0.005, abs=1e-15)
    expected = 0.01 * (1 + math.cos(19 * math.pi / 20)) / 2
    assert cosine_lr(19, 20, 0.01) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(6.16e-5, rel=1e-2)


def test_cosine_lr_monotone_and_contracts():
    lrs = [cosine_lr(e, 20, 0.01) for e in range(20)]
    assert all(lrs[i + 1] <= lrs[i] for i in range(19))
    assert all(lr > 0 for lr in lrs)
    with pytest.raises(ContractViolation):
        cosine_lr(0, 0, 0.01)
    with pytest.raises(ContractViolation):
        cosine_lr(20, 20, 0.01)


def test_sgd_plain_step():
    state = OptimizerState(base_lr=0.1, momentum=0.0, total_epochs=2)
    params = {"p": np.array([1.0])}
    sgd_step(state, params, {"p": np.array([2.0])})
    np.testing.assert_allclose(params["p"], [0.8], atol=1e-15)


def test_sgd_momentum_recurrence():
    state = OptimizerState(base_lr=0.1, momentum=0.9, total_epochs=2)
    params = {"p": np.array([0.0])}
    sgd_step(state, params, {"p": np.array([1.0])})
    sgd_step(state, params, {"p": np.array([1.0])})
    np.testing.assert_allclose(state.velocity["p"], [1.9], atol=1e-15)
    np.testing.assert_allclose(params["p"], [-(0.1 + 0.19)], atol=1e-15)


def test_sgd_zero_gradient_fixed_point():
    state = OptimizerState(base_lr=0.1, momentum=0.5, total_epochs=2)
    state.velocity["p"] = np.array([1.0])
    params = {"p": np.array([5.0])}
    for _ in range(50):
        before = params["p"].copy()
        sgd_step(state, params, {"p": np.array([0.0])})
        moved = abs(params["p"] - before)
    assert state.velocity["p"][0] < 1e-12
    assert moved[0] < 1e-12


def test_sgd_shape_mismatch():
    state = OptimizerState(base_lr=0.1, total_epochs=1)
    with pytest.raises(ContractViolation):
        sgd_step(state, {"p": np.zeros(2)}, {"p": np.zeros(3)})
