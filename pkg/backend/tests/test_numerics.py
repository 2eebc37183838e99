"""
Tests for the tensor type, the gradient tape and finite-difference checking
"""

import numpy as np
import pytest

from errors import ConfigurationError, DimensionError, NumericError
from model import numerics
from model.numerics import (
    GradTape,
    ParamSet,
    ParamSpec,
    Tensor,
    add,
    concat,
    dropout_mask,
    gather_rows,
    grad_check,
    grad_check_report,
    layer_norm,
    linear,
    linear_specs,
    matmul,
    mean,
    mlp,
    mlp_specs,
    mul,
    relu,
    reshape,
    rms_norm,
    scale,
    sigmoid,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)


def _composite(weights: np.ndarray):
    """Scalar function touching every differentiable op."""

    def f(p: ParamSet) -> Tensor:
        x = p["x"]
        h = sigmoid(linear(x, p, "lin"))
        h = layer_norm(h, p["ln.gain"], p["ln.bias"])
        h = rms_norm(h, p["rms.gain"])
        att = softmax_rows(scale(matmul(h, transpose(h, (1, 0))), 0.5), mask=np.tri(4, dtype=bool))
        h = add(matmul(att, h), sub(h, mean(h, axis=0)))
        rows = gather_rows(h, np.array([3, -1, 0, 1, 1]))
        both = concat([rows, reshape(rows, (5, 3))], axis=-1)
        return sum_all(mul(both, Tensor(weights)))

    return f


@pytest.fixture
def composite_params(rng):
    specs = {"x": ParamSpec((4, 5), "weight", 1)}
    specs.update(linear_specs("lin", 5, 3))
    specs.update({"ln.gain": ParamSpec((3,), "weight", 1), "ln.bias": ParamSpec((3,), "weight", 1)})
    specs["rms.gain"] = ParamSpec((3,), "weight", 1)
    return ParamSet.init(specs, seed=11)


class TestTensor:
    def test_immutable(self):
        t = Tensor([[1.0, 2.0]])
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_copy_on_construction(self):
        arr = np.ones(3)
        t = Tensor(arr)
        arr[0] = 9.0
        assert t.data[0] == 1.0

    def test_operators(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a @ a).data, np.array([[7.0, 10.0], [15.0, 22.0]]))
        np.testing.assert_array_equal((a + 1).data, a.data + 1)
        np.testing.assert_array_equal((2 * a).data, a.data * 2)

    def test_matmul_dimension_error(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestOps:
    def test_softmax_rows_sum_to_one(self, rng):
        out = softmax_rows(Tensor(rng.normal(scale=30.0, size=(50, 7))))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_mask(self):
        mask = np.array([[True, False, True], [False, False, False]])
        out = softmax_rows(Tensor(np.zeros((2, 3))), mask=mask).data
        np.testing.assert_allclose(out[0], [0.5, 0.0, 0.5])
        np.testing.assert_array_equal(out[1], np.zeros(3))

    def test_layer_norm_statistics(self, rng):
        x = rng.normal(loc=3.0, scale=5.0, size=(6, 16))
        out = layer_norm(x, np.ones(16), np.zeros(16), eps=0.0).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-12)

    def test_rms_norm_formula(self, rng):
        x = rng.normal(size=(5, 8))
        g = rng.normal(size=8)
        expected = x * g / np.sqrt((x ** 2).mean(axis=-1, keepdims=True) + 1e-6)
        np.testing.assert_allclose(rms_norm(x, g, 1e-6).data, expected, rtol=1e-14)

    def test_rms_norm_of_zero_is_zero(self):
        np.testing.assert_array_equal(rms_norm(np.zeros((2, 4)), np.ones(4)).data, np.zeros((2, 4)))

    def test_gather_rows_padding(self):
        a = Tensor(np.arange(6.0).reshape(3, 2))
        out = gather_rows(a, np.array([2, -1, 0])).data
        np.testing.assert_array_equal(out, [[4.0, 5.0], [0.0, 0.0], [0.0, 1.0]])

    def test_norm_width_mismatch(self):
        with pytest.raises(DimensionError):
            layer_norm(np.ones((2, 4)), np.ones(3), np.zeros(3))

    def test_mlp_shapes(self):
        params = ParamSet.init(mlp_specs("m", (4, 6, 2)), seed=0)
        assert mlp(np.ones((3, 4)), params, "m", (4, 6, 2)).shape == (3, 2)

    def test_matmul_identity_examples(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), m).data, m)
        np.testing.assert_array_equal(matmul([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]).data, np.zeros((2, 2)))

    def test_matmul_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(matmul(a, b).data, expected, rtol=0, atol=1e-12)

    def test_softmax_analytic_row(self):
        np.testing.assert_allclose(softmax_rows([[0.0, np.log(2.0)]]).data, [[1.0 / 3.0, 2.0 / 3.0]], atol=1e-15)

    def test_softmax_large_logits(self):
        out = softmax_rows([[1000.0, 1000.1]]).data
        assert np.isfinite(out).all()
        assert out.sum() == pytest.approx(1.0, abs=1e-15)
        assert out[0, 1] == pytest.approx(1.0 / (1.0 + np.exp(-0.1)), abs=1e-12)

    def test_sigmoid_extremes_and_symmetry(self):
        ends = sigmoid([-50.0, 50.0]).data
        assert ((ends > 0.0) & (ends < 1.0)).all()
        x = np.linspace(-50.0, 50.0, 201)
        np.testing.assert_allclose(sigmoid(-x).data, 1.0 - sigmoid(x).data, atol=1e-15)
        assert sigmoid(0.0).item() == 0.5

    def test_relu_gradient_by_finite_differences(self, rng):
        x = rng.uniform(0.1, 2.0, size=(4, 6)) * rng.choice([-1.0, 1.0], size=(4, 6))
        weights = rng.normal(size=(4, 6))
        params = ParamSet({"x": x})

        def f(p: ParamSet) -> Tensor:
            return sum_all(mul(relu(p["x"]), weights))

        with GradTape() as tape:
            tape.watch(params)
            loss = f(params)
        np.testing.assert_array_equal(tape.gradient(loss)["x"], weights * (x > 0))
        assert grad_check(f, params, h=1e-5) < 1e-8
        np.testing.assert_array_equal(relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_norms_scale_with_gain(self, rng):
        x, g = rng.normal(size=(4, 8)), rng.normal(size=8)
        zeros = np.zeros(8)
        np.testing.assert_array_equal(layer_norm(x, 2.0 * g, zeros).data, 2.0 * layer_norm(x, g, zeros).data)
        np.testing.assert_array_equal(rms_norm(x, 2.0 * g).data, 2.0 * rms_norm(x, g).data)

    def test_layer_norm_of_constant_row(self):
        out = layer_norm(np.full((3, 5), 2.5), np.ones(5), np.zeros(5)).data
        np.testing.assert_array_equal(out, np.zeros((3, 5)))


class TestParamSet:
    def test_init_is_deterministic_per_name(self):
        a = ParamSet.init(linear_specs("a", 4, 3), seed=5)
        specs = dict(linear_specs("a", 4, 3))
        specs.update(linear_specs("b", 2, 2))
        b = ParamSet.init(specs, seed=5)
        np.testing.assert_array_equal(a["a.weight"].data, b["a.weight"].data)
        c = ParamSet.init(linear_specs("a", 4, 3), seed=6)
        assert not np.array_equal(a["a.weight"].data, c["a.weight"].data)

    def test_init_bounds(self):
        params = ParamSet.init({"w": ParamSpec((64, 8), "weight", 16), "g": ParamSpec((8,), "gain")}, seed=1)
        assert np.abs(params["w"].data).max() <= 0.25
        np.testing.assert_array_equal(params["g"].data, np.ones(8))

    def test_require_and_with_value(self):
        params = ParamSet.init(linear_specs("a", 2, 2), seed=0)
        with pytest.raises(ConfigurationError):
            params.require("missing")
        with pytest.raises(DimensionError):
            params.with_value("a.bias", np.zeros(3))
        updated = params.with_value("a.bias", np.ones(2))
        np.testing.assert_array_equal(updated["a.bias"].data, np.ones(2))
        np.testing.assert_array_equal(params["a.bias"].data, ParamSet.init(linear_specs("a", 2, 2), seed=0)["a.bias"].data)

    def test_subset_and_merge(self):
        params = ParamSet.init({**linear_specs("a", 2, 2), **linear_specs("b", 2, 2)}, seed=0)
        assert sorted(params.subset("a.")) == ["a.bias", "a.weight"]
        assert len(params.subset("a.").merge(params.subset("b."))) == 4


class TestGradTape:
    def test_linear_gradient(self, rng):
        x = rng.normal(size=(3, 4))
        params = ParamSet.init(linear_specs("l", 4, 2), seed=0)
        with GradTape() as tape:
            tape.watch(params)
            loss = sum_all(linear(x, params, "l"))
        grads = tape.gradient(loss)
        np.testing.assert_allclose(grads["l.weight"], np.repeat(x.sum(axis=0)[:, None], 2, axis=1))
        np.testing.assert_allclose(grads["l.bias"], [3.0, 3.0])

    def test_unused_parameter_has_zero_gradient(self):
        params = ParamSet.init({**linear_specs("a", 2, 2), **linear_specs("b", 2, 2)}, seed=0)
        with GradTape() as tape:
            tape.watch(params)
            loss = sum_all(linear(np.ones((1, 2)), params, "a"))
        np.testing.assert_array_equal(tape.gradient(loss)["b.weight"], np.zeros((2, 2)))

    def test_non_scalar_loss(self):
        params = ParamSet.init(linear_specs("a", 2, 2), seed=0)
        with GradTape() as tape:
            tape.watch(params)
            out = linear(np.ones((1, 2)), params, "a")
        with pytest.raises(DimensionError):
            tape.gradient(out)

    def test_nothing_recorded_outside_tape(self):
        params = ParamSet.init(linear_specs("a", 2, 2), seed=0)
        tape = GradTape()
        tape.watch(params)
        linear(np.ones((1, 2)), params, "a")
        assert tape.num_nodes == 0


class TestGradCheck:
    def test_composite_passes(self, rng, composite_params):
        f = _composite(rng.normal(size=(5, 6)))
        assert grad_check(f, composite_params, h=1e-5) < 1e-6

    def test_report_covers_every_parameter(self, rng, composite_params):
        report = grad_check_report(_composite(rng.normal(size=(5, 6))), composite_params, max_entries=3)
        assert set(report) == set(composite_params)

    def test_corrupted_backward_is_caught(self, rng, composite_params, monkeypatch):
        def wrong_sigmoid(g, node):
            s = node.out.data
            return (2.0 * g * s * (1.0 - s),)

        monkeypatch.setitem(numerics.BACKWARD_RULES, "sigmoid", wrong_sigmoid)
        f = _composite(rng.normal(size=(5, 6)))
        assert grad_check(f, composite_params, h=1e-5) > 1e-3

    def test_step_outside_range(self, composite_params, rng):
        with pytest.raises(ConfigurationError):
            grad_check(_composite(rng.normal(size=(5, 6))), composite_params, h=1e-2)

    def test_non_finite_loss(self):
        params = ParamSet({"x": np.array([np.inf])})
        with pytest.raises(NumericError):
            grad_check(lambda p: sum_all(p["x"]), params)

    def test_sum_of_squares(self, rng):
        params = ParamSet({"x": rng.normal(size=(3, 4))})
        assert grad_check(lambda p: sum_all(mul(p["x"], p["x"])), params, h=1e-5) < 1e-8


class TestDropout:
    def test_identity_outside_training(self):
        np.testing.assert_array_equal(dropout_mask((3, 3), 0.3, seed=1).data, np.ones((3, 3)))

    def test_training_mask(self):
        mask = dropout_mask((400, 250), 0.3, seed=1, training=True).data
        assert set(np.unique(mask)) <= {0.0, 1.0 / 0.7}
        assert abs((mask > 0).mean() - 0.7) < 0.01
        np.testing.assert_array_equal(mask, dropout_mask((400, 250), 0.3, seed=1, training=True).data)

    def test_bad_rate(self):
        with pytest.raises(ConfigurationError):
            dropout_mask((2,), 1.0, seed=0)
