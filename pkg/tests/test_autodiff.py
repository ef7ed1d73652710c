import numpy as np
import pytest

from splatpose.autodiff import (
    Tensor,
    concat,
    from_value_and_grad,
    layer_norm,
    numerical_gradient,
)


def check_grad(build, x0, rtol=1e-6, atol=1e-9):
    """build(Tensor) -> scalar Tensor; compares tape grad with central FD."""
    x = Tensor(x0.copy(), requires_grad=True)
    out = build(x)
    out.backward()
    num = numerical_gradient(lambda a: float(build(Tensor(a)).data), x0.copy())
    assert np.allclose(x.grad, num, rtol=rtol, atol=atol), (
        f"max err {np.max(np.abs(x.grad - num))}"
    )


class TestElementwise:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(0)
        a0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=(4,))
        a = Tensor(a0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        out = ((a + b) * b).sum()
        out.backward()
        na = numerical_gradient(lambda x: float((((Tensor(x) + Tensor(b0)) * Tensor(b0)).sum()).data), a0)
        nb = numerical_gradient(lambda x: float((((Tensor(a0) + Tensor(x)) * Tensor(x)).sum()).data), b0)
        assert np.allclose(a.grad, na, rtol=1e-6)
        assert np.allclose(b.grad, nb, rtol=1e-6)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "pow"])
    def test_binary_ops(self, op):
        rng = np.random.default_rng(hash(op) % 1000)
        x0 = rng.uniform(0.5, 2.0, size=(4, 3))
        build = {
            "add": lambda x: (x + 2.5).sum(),
            "sub": lambda x: (3.0 - x).sum(),
            "mul": lambda x: (x * x).sum(),
            "div": lambda x: (1.0 / x).sum(),
            "pow": lambda x: (x**3).sum(),
        }[op]
        check_grad(build, x0)

    @pytest.mark.parametrize("fn", ["exp", "log", "sqrt", "sigmoid", "gelu"])
    def test_unary_ops(self, fn):
        rng = np.random.default_rng(hash(fn) % 1000)
        x0 = rng.uniform(0.2, 2.0, size=(5, 2))
        check_grad(lambda x: getattr(x, fn)().sum(), x0, rtol=1e-5, atol=1e-8)

    def test_softmax(self):
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(3, 6))
        w = rng.normal(size=(3, 6))
        check_grad(lambda x: (x.softmax(axis=-1) * Tensor(w)).sum(), x0, rtol=1e-5, atol=1e-8)


class TestMatmulShapes:
    def test_matmul_2d(self):
        rng = np.random.default_rng(2)
        a0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=(4, 5))
        w = rng.normal(size=(3, 5))
        check_grad(lambda x: ((x @ Tensor(b0)) * Tensor(w)).sum(), a0)
        check_grad(lambda x: ((Tensor(a0) @ x) * Tensor(w)).sum(), b0)

    def test_matmul_batched(self):
        rng = np.random.default_rng(3)
        a0 = rng.normal(size=(2, 3, 4))
        b0 = rng.normal(size=(2, 4, 3))
        w = rng.normal(size=(2, 3, 3))
        check_grad(lambda x: ((x @ Tensor(b0)) * Tensor(w)).sum(), a0)
        check_grad(lambda x: ((Tensor(a0) @ x) * Tensor(w)).sum(), b0)

    def test_requires_2d(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(3)) @ Tensor(np.ones(3))


class TestShapeOps:
    def test_reshape_transpose_getitem(self):
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 6))
        check_grad(lambda x: ((x.transpose((2, 0, 1)).reshape(4, 6)) * Tensor(w)).sum(), x0)
        w2 = rng.normal(size=(3, 2))
        check_grad(lambda x: (x[..., 0:2][0] * Tensor(w2)).sum(), x0)

    def test_concat(self):
        rng = np.random.default_rng(5)
        a0 = rng.normal(size=(2, 3))
        b0 = rng.normal(size=(4, 3))
        w = rng.normal(size=(6, 3))

        def build(x):
            return (concat([x, Tensor(b0)], axis=0) * Tensor(w)).sum()

        check_grad(build, a0)

    def test_sum_axes(self):
        rng = np.random.default_rng(6)
        x0 = rng.normal(size=(3, 4, 2))
        w = rng.normal(size=(3, 2))
        check_grad(lambda x: (x.sum(axis=1) * Tensor(w)).sum(), x0)
        check_grad(lambda x: x.mean() * 3.0, x0)


class TestLayerNorm:
    @pytest.mark.parametrize("seed", range(5))
    def test_grad_x_and_gain(self, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(4, 8))
        g0 = rng.uniform(0.5, 1.5, size=8)
        w = rng.normal(size=(4, 8))

        x = Tensor(x0.copy(), requires_grad=True)
        g = Tensor(g0.copy(), requires_grad=True)
        (layer_norm(x, g) * Tensor(w)).sum().backward()

        nx = numerical_gradient(
            lambda a: float(((layer_norm(Tensor(a), Tensor(g0)) * Tensor(w)).sum()).data), x0.copy()
        )
        ng = numerical_gradient(
            lambda a: float(((layer_norm(Tensor(x0), Tensor(a)) * Tensor(w)).sum()).data), g0.copy()
        )
        assert np.allclose(x.grad, nx, rtol=1e-5, atol=1e-8)
        assert np.allclose(g.grad, ng, rtol=1e-5, atol=1e-8)


class TestCustomNode:
    def test_value_and_grad_passthrough(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(3, 3))

        def quad(a):  # f = sum(a^2), df = 2a
            return float((a**2).sum()), 2 * a

        x = Tensor(x0.copy(), requires_grad=True)
        v, g = quad(x.data)
        out = from_value_and_grad(x, v, g) * 2.0
        out.backward()
        assert np.allclose(x.grad, 4 * x0)

    def test_shape_mismatch_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            from_value_and_grad(x, 1.0, np.ones(3))


class TestGraphMechanics:
    def test_grad_accumulates_on_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        out = (x * x + x).sum()  # d/dx = 2x + 1 = 5
        out.backward()
        assert np.allclose(x.grad, [5.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2).backward()

    def test_no_grad_leaves_untouched(self):
        x = Tensor(np.ones(3))
        y = Tensor(np.ones(3), requires_grad=True)
        out = (x + y).sum()
        out.backward()
        assert x.grad is None
        assert np.allclose(y.grad, 1.0)

    def test_deep_chain_iterative_topo(self):
        # deep graphs must not hit the recursion limit
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.001
        y.sum().backward()
        assert np.allclose(x.grad, [1.0])
