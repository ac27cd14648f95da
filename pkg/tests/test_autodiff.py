import math

import numpy as np
import pytest

from prada import autodiff as ad
from prada.autodiff import Tensor

SEEDS = range(10)


def _weighted(op, shape_out_seed=0):
    """Scalar probe: sum(op(*xs) * W) with a fixed random W, so every output coordinate matters."""
    cache = {}

    def f(*xs):
        y = op(*xs)
        if y.shape not in cache:
            cache[y.shape] = Tensor(np.random.default_rng(shape_out_seed + 99).normal(size=y.shape))
        return ad.tsum(ad.mul(y, cache[y.shape]))

    return f


def _rand(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape))


CAUSAL_MASK = np.array([[1, 1, 1, 0, 0], [1, 0, 1, 1, 1], [0, 0, 1, 0, 0]], dtype=float)


# Each case: name -> (builder(rng) -> list of inputs, op)
CASES = {
    "add_broadcast": (lambda r: [_rand(r, 3, 4), _rand(r, 4)], ad.add),
    "sub": (lambda r: [_rand(r, 3, 4), _rand(r, 3, 1)], ad.sub),
    "mul_broadcast": (lambda r: [_rand(r, 2, 3, 4), _rand(r, 1, 4)], ad.mul),
    "neg": (lambda r: [_rand(r, 5)], ad.neg),
    "scale": (lambda r: [_rand(r, 2, 3)], lambda a: ad.scale(a, -2.5)),
    "tanh": (lambda r: [_rand(r, 3, 5)], ad.tanh),
    "gelu": (lambda r: [_rand(r, 4, 6, scale=2.0)], ad.gelu),
    "reshape": (lambda r: [_rand(r, 2, 6)], lambda a: ad.reshape(a, (3, 4))),
    "transpose": (lambda r: [_rand(r, 2, 3, 4)], lambda a: ad.transpose(a, (2, 0, 1))),
    "slice": (lambda r: [_rand(r, 4, 5)], lambda a: ad.take_slice(a, (slice(1, 3), slice(None, None, 2)))),
    "expand": (lambda r: [_rand(r, 1, 4)], lambda a: ad.expand(a, (3, 4))),
    "concat": (lambda r: [_rand(r, 2, 3), _rand(r, 1, 3)], lambda a, b: ad.concat_rows([a, b], axis=0)),
    "concat_axis1": (lambda r: [_rand(r, 2, 3), _rand(r, 2, 2)], lambda a, b: ad.concat_rows([a, b], axis=1)),
    "sum_axis": (lambda r: [_rand(r, 3, 4)], lambda a: ad.tsum(a, axis=1)),
    "mean": (lambda r: [_rand(r, 3, 4)], lambda a: ad.tmean(a, axis=0)),
    "mean_pool": (lambda r: [_rand(r, 3, 5, 2)], lambda x: ad.mean_pool_rows(x, CAUSAL_MASK)),
    "matmul": (lambda r: [_rand(r, 3, 4), _rand(r, 4, 2)], ad.matmul),
    "matmul_batched_by_2d": (lambda r: [_rand(r, 2, 3, 4), _rand(r, 4, 5)], ad.matmul),
    "matmul_batched": (lambda r: [_rand(r, 2, 3, 4), _rand(r, 2, 4, 2)], ad.matmul),
    "linear": (lambda r: [_rand(r, 3, 4), _rand(r, 4, 2), _rand(r, 2)], ad.linear),
    "embedding": (lambda r: [_rand(r, 6, 3)], lambda t: ad.embedding_gather(t, [[0, 2, 2], [5, 0, 1]])),
    "layer_norm": (lambda r: [_rand(r, 2, 3, 5), _rand(r, 5), _rand(r, 5)], ad.layer_norm),
    "softmax": (lambda r: [_rand(r, 3, 6)], ad.softmax),
    "causal_attention": (lambda r: [_rand(r, 2, 5, 3), _rand(r, 2, 5, 3), _rand(r, 2, 5, 3)], ad.causal_attention),
    "cross_entropy": (lambda r: [_rand(r, 3, 5, 7)],
                      lambda z: ad.softmax_cross_entropy(z, np.arange(15).reshape(3, 5) % 7, CAUSAL_MASK)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_matches_central_differences(name):
    build, op = CASES[name]
    for seed in SEEDS:
        inputs = build(np.random.default_rng(seed))
        rep = ad.finite_diff_check(_weighted(op, seed), inputs, h=1e-5, tol=1e-4)
        assert rep.passed, f"{name} seed {seed}: max rel err {rep.max_rel_err:.2e}"


def test_detach_blocks_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.add(ad.tsum(ad.detach(x)), ad.tsum(ad.scale(x, 2.0)))
        tape.backward(y)
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


def test_grad_reverse_forward_identity_and_negated_backward():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = rng.normal(size=(4, 3))
    with ad.Tape() as tape:
        y = ad.grad_reverse(x)
        assert np.array_equal(y.data, x.data)
        assert y.data is not x.data
        tape.backward(ad.tsum(ad.mul(y, Tensor(w))))
    np.testing.assert_array_equal(x.grad, -w)


def test_grad_reverse_worked_example():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.grad_reverse(x)
        tape.backward(ad.tsum(ad.mul(y, Tensor(np.array([0.4, 1.0])))))
    np.testing.assert_array_equal(y.data, [1.5, -2.0])
    np.testing.assert_array_equal(x.grad, [-0.4, -1.0])


def test_grad_reverse_twice_is_plain_gradient():
    x = Tensor(np.arange(3.0), requires_grad=True)
    with ad.Tape() as tape:
        tape.backward(ad.tsum(ad.grad_reverse(ad.grad_reverse(ad.scale(x, 3.0)))))
    np.testing.assert_array_equal(x.grad, np.full(3, 3.0))


def test_fanout_accumulates():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with ad.Tape() as tape:
        tape.backward(ad.tsum(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_twice_raises():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.tsum(x)
        tape.backward(loss)
        with pytest.raises(ad.ContractError, match="twice"):
            tape.backward(loss)


def test_reset_allows_new_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        tape.backward(ad.tsum(x))
        tape.reset()
        tape.backward(ad.tsum(ad.scale(x, 4.0)))
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        with pytest.raises(ad.ContractError, match="scalar"):
            tape.backward(ad.scale(x, 1.0))


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\) and \(4, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_cross_entropy_all_masked_is_degenerate():
    with pytest.raises(ad.DegenerateBatchError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 1], [0, 0])


def test_mean_pool_empty_row_is_degenerate():
    with pytest.raises(ad.DegenerateBatchError):
        ad.mean_pool_rows(Tensor(np.ones((2, 3, 2))), [[1, 0, 0], [0, 0, 0]])


def test_uniform_logits_give_log_vocab():
    V = 96
    loss = ad.softmax_cross_entropy(Tensor(np.full((5, V), 0.37)), np.arange(5))
    assert abs(loss.item() - math.log(V)) < 1e-6


def test_cross_entropy_matches_brute_force_log_sum_exp():
    z = np.random.default_rng(0).normal(size=(4, 8)) * 3
    t = np.array([1, 7, 0, 3])
    brute = np.mean([math.log(sum(math.exp(v) for v in row)) - row[k] for row, k in zip(z, t)])
    assert abs(ad.softmax_cross_entropy(Tensor(z), t).item() - brute) < 1e-10


def test_cross_entropy_is_shift_invariant_for_large_logits():
    z = np.random.default_rng(1).normal(size=(3, 5))
    a = ad.softmax_cross_entropy(Tensor(z), [0, 1, 2]).item()
    b = ad.softmax_cross_entropy(Tensor(z + 1000.0), [0, 1, 2]).item()
    assert abs(a - b) < 1e-10


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_grad():
            y = ad.scale(x, 2.0)
        assert not y.requires_grad
        assert tape.nodes == []


def test_constants_are_not_recorded():
    with ad.Tape() as tape:
        y = ad.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert not y.requires_grad and tape.nodes == []


def test_relative_error_floor_ignores_rounding_noise():
    err = ad.relative_error(np.array([1e-13, 1.0]), np.array([-1e-13, 1.0]))
    assert err.max() < 1e-4
