"""Gradient and tape behavior of the autodiff core."""

import numpy as np
import pytest

from minicxr import autodiff as ad
from minicxr.autodiff import (Adam, DegenerateRowError, DiffArray, DimensionError,
                              Tape, TrainingDivergenceError, constant,
                              finite_difference_check, param)

RNG = np.random.default_rng(1234)


def test_matmul_identity():
    a = param(np.eye(2))
    b = param([[3.0, 4.0], [5.0, 6.0]])
    assert np.allclose(ad.matmul(a, b).values, [[3, 4], [5, 6]])


def test_matmul_direct():
    out = ad.matmul(param([[1.0, 2.0]]), param([[3.0], [4.0]]))
    assert np.allclose(out.values, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(param(np.zeros((2, 3))), param(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    a = param(RNG.standard_normal((3, 3)))
    b = param(RNG.standard_normal((3, 3)))
    finite_difference_check(lambda: ad.sum_all(ad.matmul(a, b)), [a, b])


def test_softmax_trivial_rows():
    out = ad.softmax_rows(param([[0.0, 0.0]]))
    assert np.allclose(out.values, [0.5, 0.5])
    out2 = ad.softmax_rows(param([[np.log(1.0), np.log(3.0)]]))
    assert np.allclose(out2.values, [0.25, 0.75])


def test_softmax_rows_sum_to_one_in_range():
    for _ in range(50):
        x = param(RNG.uniform(-50, 50, size=(4, 7)))
        s = ad.softmax_rows(x).values.sum(axis=-1)
        assert np.all(np.abs(s - 1.0) < 1e-6)


def test_softmax_masked_positions_exactly_zero():
    mask = np.array([[False, True, False]])
    out = ad.softmax_rows(param([[1.0, 99.0, 2.0]]), mask=mask)
    assert out.values[0, 1] == 0.0
    assert abs(out.values.sum() - 1.0) < 1e-12


def test_softmax_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        ad.softmax_rows(param([[1.0, 2.0]]), mask=np.array([[True, True]]))


def test_softmax_jacobian_matches_finite_differences():
    x = param(RNG.standard_normal((1, 5)))
    w = constant(RNG.standard_normal((1, 5)))
    finite_difference_check(lambda: ad.sum_all(ad.mul(ad.softmax_rows(x), w)), [x])


def test_cross_entropy_uniform_logits():
    logits = param(np.zeros((3, 4)))
    loss = ad.cross_entropy_nll(logits, [0, 1, 3])
    assert abs(loss.values - np.log(4)) < 1e-12


def test_cross_entropy_saturated():
    logits = np.zeros((2, 5))
    logits[0, 2] = 20.0
    logits[1, 4] = 20.0
    loss = ad.cross_entropy_nll(param(logits), [2, 4])
    assert loss.values < 1e-6


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        ad.cross_entropy_nll(param(np.zeros((2, 4))), [0, 4])


def test_cross_entropy_gradient_matches_finite_differences():
    logits = param(RNG.standard_normal((6, 10)))
    targets = RNG.integers(0, 10, size=6)
    finite_difference_check(lambda: ad.cross_entropy_nll(logits, targets), [logits])


def test_layernorm_constant_row_zero_before_affine():
    x = param(np.full((2, 8), 3.7))
    g = constant(np.ones(8))
    b = constant(np.zeros(8))
    assert np.allclose(ad.layernorm(x, g, b).values, 0.0)


def test_gelu_origin():
    assert ad.gelu(param([0.0])).values[0] == 0.0


def test_embedding_double_use_accumulates_twice():
    table = param(RNG.standard_normal((5, 3)))
    ids = np.array([2, 2, 4])
    with Tape() as tape:
        loss = ad.sum_all(ad.embedding_lookup(table, ids))
    tape.backward(loss)
    assert np.allclose(table.grad[2], 2.0)
    assert np.allclose(table.grad[4], 1.0)
    assert np.allclose(table.grad[0], 0.0)
    finite_difference_check(
        lambda: ad.sum_all(ad.mul(ad.embedding_lookup(table, ids),
                                  constant(np.ones((3, 3))))), [table])


def test_detached_constants_never_accumulate():
    c = constant(RNG.standard_normal((3, 3)))
    w = param(RNG.standard_normal((3, 3)))
    with Tape() as tape:
        loss = ad.sum_all(ad.matmul(c, w))
    tape.backward(loss)
    assert np.all(c.grad == 0.0)
    assert np.any(w.grad != 0.0)


def test_backward_sets_loss_grad_to_one():
    x = param([[1.0, 2.0]])
    with Tape() as tape:
        loss = ad.mean_all(x)
    tape.backward(loss)
    assert loss.grad == 1.0


def test_tape_replay_is_bit_identical():
    x = param(RNG.standard_normal((4, 4)))
    w = param(RNG.standard_normal((4, 4)))
    with Tape(seed=99) as tape:
        y = ad.gelu(ad.matmul(x, w))
        loss = ad.mean_all(y)
    replayed = tape.replay()
    assert np.array_equal(replayed[y.node_id], y.values)
    assert np.array_equal(replayed[loss.node_id], loss.values)


def test_forward_deterministic_for_fixed_seed():
    def run():
        rng = np.random.default_rng(np.random.SeedSequence(7))
        x = param(rng.standard_normal((3, 3)))
        return ad.gelu(ad.matmul(x, x)).values

    assert np.array_equal(run(), run())


# -- optimizer ---------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    p = param(np.array([1.0, -2.0]))
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    assert np.allclose(p.values, [1.0, -2.0])


def test_adam_first_step_magnitude():
    p = param(np.array([0.0]))
    opt = Adam({"p": p}, lr=0.1)
    p.grad[...] = 1.0
    opt.step()
    # bias-corrected first step moves by ~lr against the gradient
    assert abs(p.values[0] + 0.1) < 1e-6


def test_adam_converges_on_quadratic():
    p = param(np.array([0.0]))
    opt = Adam({"p": p}, lr=0.3)
    for _ in range(50):
        opt.zero_grad()
        p.grad[...] = 2 * (p.values - 3.0)
        opt.step()
    assert abs(p.values[0] - 3.0) < 0.05


def test_adam_nonfinite_gradient_names_parameter():
    p = param(np.array([0.0]))
    opt = Adam({"bad_param": p})
    p.grad[...] = np.nan
    with pytest.raises(TrainingDivergenceError, match="bad_param"):
        opt.step()


# -- full finite-difference battery ------------------------------------------

def _rand(shape):
    return RNG.standard_normal(shape)


UNARY_OPS = [
    ("exp", ad.exp), ("log", None), ("sigmoid", ad.sigmoid), ("tanh", ad.tanh),
    ("gelu", ad.gelu), ("logsigmoid", ad.logsigmoid),
]


@pytest.mark.parametrize("name,op", UNARY_OPS)
def test_unary_op_gradients(name, op):
    trials = 100
    for t in range(trials):
        if name == "log":
            x = param(np.abs(_rand((2, 3))) + 0.5)
            op_fn = ad.log
        else:
            x = param(_rand((2, 3)))
            op_fn = op
        w = constant(_rand((2, 3)))
        finite_difference_check(lambda: ad.sum_all(ad.mul(op_fn(x), w)), [x])


def test_binary_and_structural_op_gradients():
    for _ in range(100):
        a = param(_rand((2, 3)))
        b = param(_rand((2, 3)))
        row = param(_rand((3,)))
        finite_difference_check(lambda: ad.sum_all(ad.mul(a, b)), [a, b])
        finite_difference_check(lambda: ad.sum_all(ad.add(a, row)), [a, row])
        finite_difference_check(lambda: ad.sum_all(ad.sub(a, b)), [a, b])
        finite_difference_check(
            lambda: ad.mean_all(ad.concat_last([ad.slice_last(a, 0, 2), b])), [a, b])


def test_layernorm_softmax_reduction_gradients():
    for _ in range(100):
        x = param(_rand((3, 5)))
        g = param(np.abs(_rand(5)) + 0.5)
        b = param(_rand(5))
        w = constant(_rand((3, 5)))
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(ad.layernorm(x, g, b), w)), [x, g, b])
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(ad.softmax_rows(x), w)), [x])
        finite_difference_check(lambda: ad.mean_all(ad.mean_axis(x, 0)), [x])


def test_minimum_clip_gradients():
    for _ in range(100):
        a = param(_rand((2, 4)))
        b = param(_rand((2, 4)))
        w = constant(_rand((2, 4)))
        finite_difference_check(lambda: ad.sum_all(ad.mul(ad.minimum(a, b), w)), [a, b])
        # keep FD probes away from the clip kinks
        c = param(np.where(np.abs(_rand((2, 4))) < 0.01, 0.5, _rand((2, 4)) * 3))
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(ad.clip(c, -1.0, 1.0), w)), [c])


def test_batched_matmul_gradients():
    for _ in range(30):
        a = param(_rand((2, 3, 4)))
        b = param(_rand((2, 4, 2)))
        shared = param(_rand((4, 2)))
        finite_difference_check(lambda: ad.sum_all(ad.matmul(a, b)), [a, b])
        finite_difference_check(lambda: ad.sum_all(ad.matmul(a, shared)), [a, shared])


def test_extract_patches_gradient_and_inverse():
    img = param(_rand((8, 8)))
    w = constant(_rand((4, 16)))
    finite_difference_check(
        lambda: ad.sum_all(ad.mul(ad.extract_patches(img, 4), w)), [img])
    flat = ad.extract_patches(img, 4).values
    back = ad.reassemble_patches(flat, 4, 8, 8)
    assert np.array_equal(back, img.values)


def test_token_logprobs_gradient():
    for _ in range(50):
        logits = param(_rand((4, 6)))
        targets = RNG.integers(0, 6, size=4)
        w = constant(_rand(4))
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(ad.token_logprobs(logits, targets), w)), [logits])


def test_log_softmax_rows_gradient():
    for _ in range(50):
        x = param(_rand((3, 6)))
        w = constant(_rand((3, 6)))
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(ad.log_softmax_rows(x), w)), [x])


def test_independent_tapes_on_threads():
    import threading

    results = {}

    def work(tid):
        rng = np.random.default_rng(tid)
        x = param(rng.standard_normal((8, 8)))
        w = param(rng.standard_normal((8, 8)))
        for _ in range(20):
            with Tape() as tape:
                loss = ad.mean_all(ad.gelu(ad.matmul(x, w)))
            x.zero_grad()
            w.zero_grad()
            tape.backward(loss)
        results[tid] = (x.grad.copy(), w.grad.copy())

    # reference single-threaded gradients
    work(1)
    work(2)
    ref = {k: v for k, v in results.items()}
    results.clear()
    threads = [threading.Thread(target=work, args=(tid,)) for tid in (1, 2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for tid in (1, 2):
        assert np.array_equal(results[tid][0], ref[tid][0])
        assert np.array_equal(results[tid][1], ref[tid][1])
