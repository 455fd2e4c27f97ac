"""Core autodiff engine: every primitive against central finite differences."""

import numpy as np
import pytest

from conftest import assert_grad_matches
from fimp.diffcore import tensor as T
from fimp.diffcore.tensor import Tensor
from fimp.errors import DimensionError, MaskedSoftmaxError


def t(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


@pytest.mark.usefixtures("f64")
class TestPrimitiveGradients:
    def test_arithmetic(self):
        a, b = t((3, 4), 0), t((3, 4), 1)
        c = t((4,), 2)  # broadcast operand
        assert_grad_matches(lambda: ((a * b + c) / (b * b + 2.0) - a).sum(),
                            {"a": a, "b": b, "c": c})

    def test_matmul_batched(self):
        a, b = t((2, 3, 4), 0), t((2, 4, 5), 1)
        w = t((5, 3), 2)
        assert_grad_matches(lambda: ((a @ b) @ w).sum(),
                            {"a": a, "b": b, "w": w})

    def test_matmul_broadcast(self):
        a, b = t((2, 2, 3, 1, 4), 0), t((2, 1, 4, 6), 1)
        assert_grad_matches(lambda: ((a @ b) ** 2).sum(), {"a": a, "b": b})

    def test_affine(self):
        x, w, b = t((2, 3, 4), 0), t((4, 5), 1), t((5,), 2)
        assert_grad_matches(lambda: (T.affine(x, w, b) ** 2).sum(),
                            {"x": x, "w": w, "b": b})

    def test_pointwise(self):
        x = t((3, 5), 3)
        for fn in (T.exp, T.tanh, T.sigmoid, T.relu, T.elu, T.absolute):
            assert_grad_matches(lambda: (fn(x) * 1.7).sum(), {"x": x})
        xp = Tensor(np.abs(x.data) + 0.5, requires_grad=True)
        for fn in (T.log, T.sqrt):
            assert_grad_matches(lambda: fn(xp).sum(), {"x": xp})

    def test_reductions_and_shapes(self):
        x = t((2, 3, 4), 4)
        assert_grad_matches(
            lambda: ((x.sum(axis=1) ** 2).sum()
                     + x.mean(axis=(0, 2), keepdims=True).sum() * 3.0
                     + (x.transpose((2, 0, 1)).reshape((4, 6)) ** 2).sum()),
            {"x": x})

    def test_getitem_slices(self):
        x = t((4, 6), 5)
        assert_grad_matches(lambda: (x[1:3, ::2] ** 2).sum() + x[0, 0] * 3.0,
                            {"x": x})

    def test_concat_stack(self):
        a, b = t((2, 3), 6), t((4, 3), 7)
        assert_grad_matches(lambda: (T.concat([a, b], axis=0) ** 2).sum(),
                            {"a": a, "b": b})
        c, d = t((2, 3), 8), t((2, 3), 9)
        assert_grad_matches(lambda: (T.stack([c, d], axis=1) ** 3).sum(),
                            {"c": c, "d": d})

    def test_cumsum(self):
        x = t((4, 3, 2), 10)
        assert_grad_matches(lambda: (T.cumsum(x, axis=0) ** 2).sum(), {"x": x})

    def test_gather(self):
        x = t((2, 5, 3), 11)
        idx = np.random.default_rng(0).integers(0, 5, size=(2, 4, 2))
        assert_grad_matches(lambda: (T.gather(x, idx) ** 2).sum(), {"x": x})

    def test_softmax_masked(self):
        x = t((3, 5), 12)
        mask = np.ones((3, 5), dtype=bool)
        mask[0, 2:] = False
        mask[2, :1] = False
        w = np.random.default_rng(1).normal(size=(3, 5))
        assert_grad_matches(lambda: (T.softmax(x, mask=mask) * w).sum(), {"x": x})

    def test_layer_norm(self):
        x, g, b = t((4, 6), 13), t((6,), 14), t((6,), 15)
        assert_grad_matches(lambda: (T.layer_norm(x, g, b) ** 2).sum(),
                            {"x": x, "g": g, "b": b})

    def test_shared_subexpression_accumulates(self):
        # One tensor consumed by several ops: gradient must sum across paths.
        x = t((3, 3), 16)
        assert_grad_matches(
            lambda: (x @ x).sum() + (x * x).sum() + x.transpose((1, 0)).sum(),
            {"x": x})


class TestSoftmaxSemantics:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = Tensor(rng.normal(size=(6, 9)) * 5)
            mask = rng.random((6, 9)) > 0.3
            mask[:, 0] = True
            s = T.softmax(x, mask=mask)
            np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_masked_entries_exactly_zero(self):
        x = Tensor(np.random.default_rng(1).normal(size=(4, 7)))
        mask = np.ones((4, 7), dtype=bool)
        mask[1, 3] = mask[2, :3] = False
        s = T.softmax(x, mask=mask)
        assert (s.data[~mask] == 0.0).all()

    def test_all_masked_row_raises(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.ones((2, 3), dtype=bool)
        mask[1] = False
        with pytest.raises(MaskedSoftmaxError):
            T.softmax(x, mask=mask)


class TestErrors:
    def test_layer_norm_single_feature(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.ones((3, 1))), Tensor(np.ones(1)),
                         Tensor(np.zeros(1)))

    def test_matmul_dim_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2).backward()


def test_dtype_switch():
    assert Tensor(np.ones(3)).dtype == np.float32
    with T.using_dtype(np.float64):
        assert Tensor(np.ones(3)).dtype == np.float64
    assert Tensor(np.ones(3)).dtype == np.float32
