import numpy as np
import pytest

from cilfuse.errors import NumericError, ShapeError
from cilfuse.linalg import (
    Mat,
    Param,
    SgdConfig,
    ce_mean_and_grad,
    cross_entropy,
    finite_diff_grad,
    l2_normalize,
    matmul,
    params_digest,
    sgd_step,
    softmax,
    softmax_rows,
)


def triple_loop_matmul(a, b):
    """Reference oracle: scalar accumulation in increasing k."""
    n, kk = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(kk):
                acc += float(a[i, k]) * float(b[k, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_selector_row(self):
        got = matmul(np.array([[1.0, 0.0]]), np.array([[5.0], [7.0]]))
        assert np.array_equal(got, [[5.0]])

    def test_matches_triple_loop_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, k, m = rng.integers(1, 9, size=3)
            a = rng.standard_normal((n, k))
            b = rng.standard_normal((k, m))
            assert np.array_equal(matmul(a, b), triple_loop_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)

    def test_analytic(self):
        assert np.allclose(softmax([np.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-12)

    def test_large_magnitude_stable(self):
        p = softmax([1000.0, 0.0])
        assert np.isfinite(p).all() and p[0] > 1 - 1e-12

    def test_sums_to_one_at_magnitude_1e3(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            z = rng.uniform(-1e3, 1e3, size=rng.integers(1, 12))
            assert abs(softmax(z).sum() - 1.0) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax([])


class TestCrossEntropy:
    def test_near_one_hot(self):
        assert cross_entropy([10.0, -10.0], 0) < 1e-8

    def test_analytic_ln2(self):
        assert abs(cross_entropy([0.0, 0.0], 1) - np.log(2.0)) < 1e-15

    def test_against_direct_formula(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            z = rng.standard_normal(5) * 3
            y = int(rng.integers(0, 5))
            direct = -np.log(np.exp(z)[y] / np.exp(z).sum())
            assert abs(cross_entropy(z, y) - direct) < 1e-10

    def test_nonnegative(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            z = rng.standard_normal(4) * 10
            assert cross_entropy(z, int(rng.integers(0, 4))) >= 0.0

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy([0.0, 1.0], 2)


class TestL2Normalize:
    def test_analytic(self):
        assert np.allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    def test_zero_vector_unchanged(self):
        assert np.array_equal(l2_normalize([0.0, 0.0]), [0.0, 0.0])

    def test_unit_vector_fixed_point(self):
        v = np.array([1.0, 0.0, 0.0])
        assert np.allclose(l2_normalize(v), v, atol=1e-12)


class TestSgd:
    def test_frozen_untouched(self):
        p = Param(np.array([[1.0, 2.0]]), frozen=True)
        p.grad[:] = 99.0
        before = p.value.tobytes()
        sgd_step([p], 0, SgdConfig())
        assert p.value.tobytes() == before

    def test_analytic_update(self):
        p = Param(np.array([[1.0]]))
        p.grad[:] = 0.5
        sgd_step([p], 0, SgdConfig(base_lr=0.1))
        assert abs(p.value[0, 0] - 0.95) < 1e-15
        assert p.grad[0, 0] == 0.0

    def test_decay_schedule(self):
        cfg = SgdConfig(base_lr=0.1, decay_every=30, decay_factor=0.1)
        assert abs(cfg.lr_at(30) - 0.01) < 1e-15
        assert abs(cfg.lr_at(29) - 0.1) < 1e-15
        p = Param(np.array([[0.0]]))
        p.grad[:] = 1.0
        sgd_step([p], 30, cfg)
        assert abs(p.value[0, 0] + 0.01) < 1e-15

    def test_zero_epochs_allowed(self):
        assert SgdConfig(epochs=0).epochs == 0

    def test_validation(self):
        with pytest.raises(ValueError):
            SgdConfig(base_lr=0.0)
        with pytest.raises(ValueError):
            SgdConfig(batch_size=0)
        with pytest.raises(ValueError):
            SgdConfig(decay_factor=1.5)


class TestFiniteDiff:
    def test_quadratic(self):
        p = Param(np.array([[3.0]]))
        g = finite_diff_grad(lambda: float(p.value[0, 0] ** 2), p, 1e-5)
        assert abs(g[0, 0] - 6.0) < 1e-6

    def test_constant(self):
        p = Param(np.array([[1.0, 2.0]]))
        assert np.array_equal(finite_diff_grad(lambda: 4.2, p, 1e-5), np.zeros((1, 2)))

    def test_cross_entropy_grad_vs_analytic(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            p = Param(rng.standard_normal((1, 6)))
            y = int(rng.integers(0, 6))
            fd = finite_diff_grad(lambda: cross_entropy(p.value[0], y), p, 1e-5)
            analytic = softmax(p.value[0]).reshape(1, -1)
            analytic[0, y] -= 1.0
            denom = max(np.abs(analytic).max(), 1e-12)
            assert np.abs(fd - analytic).max() / denom < 1e-6

    def test_non_finite_loss_rejected(self):
        p = Param(np.array([[1.0]]))
        with pytest.raises(NumericError):
            finite_diff_grad(lambda: float("nan"), p, 1e-5)


def test_ce_mean_and_grad_consistency():
    rng = np.random.default_rng(9)
    z = rng.standard_normal((7, 5))
    y = rng.integers(0, 5, size=7)
    loss, grad = ce_mean_and_grad(z, y)
    direct = np.mean([cross_entropy(z[i], int(y[i])) for i in range(7)])
    assert abs(loss - direct) < 1e-12
    expect = softmax_rows(z)
    expect[np.arange(7), y] -= 1.0
    assert np.allclose(grad, expect / 7, atol=1e-12)


def test_params_digest_changes_with_values():
    p = Param(np.array([[1.0, 2.0]]))
    d1 = params_digest([p])
    p.value[0, 0] = 1.0000000001
    assert params_digest([p]) != d1
