"""Unit tests for the SGD and Adam updates."""

import math
import unittest

import numpy as np

from scene_fusion.autodiff import mean_all, mul
from scene_fusion.errors import ConfigError
from scene_fusion.optim import AdamState, Optimizer, OptimizerKind, adam_step, sgd_step
from scene_fusion.params import ParamStore, backward
from scene_fusion.tensor import Precision, Tensor2D


def store_with_grad(value, grad) -> ParamStore:
    params = ParamStore(Precision.TEST)
    params.add("w", Tensor2D(np.array(value, dtype=np.float64)))
    params["w"].grad = Tensor2D(np.array(grad, dtype=np.float64))
    return params


class TestSgd(unittest.TestCase):
    def test_plain_step(self):
        params = store_with_grad([[1.0, -2.0]], [[0.5, 1.0]])
        sgd_step(params, 0.1)
        np.testing.assert_allclose(params.value("w").data, [[0.95, -2.1]])

    def test_weight_decay(self):
        params = store_with_grad([[2.0]], [[0.0]])
        sgd_step(params, 0.5, weight_decay=0.1)
        np.testing.assert_allclose(params.value("w").data, [[1.9]])

    def test_weight_decay_adds_to_gradient(self):
        params = store_with_grad([[1.0]], [[0.5]])
        sgd_step(params, 0.1, weight_decay=0.1)
        self.assertAlmostEqual(params.value("w").data[0, 0], 0.94, delta=1e-12)

    def test_ten_steps_match_scalar_formula(self):
        params = store_with_grad([[1.5]], [[0.0]])
        w = 1.5
        for _ in range(10):
            params["w"].grad = Tensor2D(np.array([[w - 0.3]]))
            sgd_step(params, 0.2, weight_decay=0.05)
            w = w - 0.2 * ((w - 0.3) + 0.05 * w)
            self.assertAlmostEqual(params.value("w").data[0, 0], w, delta=1e-12)

    def test_gradients_reset_after_step(self):
        params = store_with_grad([[1.0]], [[3.0]])
        sgd_step(params, 0.1)
        self.assertEqual(params["w"].grad.to_list(), [[0.0]])

    def test_zero_learning_rate_keeps_values(self):
        params = store_with_grad([[1.0, 2.0]], [[5.0, -5.0]])
        sgd_step(params, 0.0)
        self.assertEqual(params.value("w").to_list(), [[1.0, 2.0]])


class TestAdam(unittest.TestCase):
    def test_first_step_moves_by_learning_rate(self):
        params = store_with_grad([[1.0, 1.0]], [[0.2, -4.0]])
        state = AdamState()
        adam_step(params, state, 0.01)
        np.testing.assert_allclose(params.value("w").data, [[0.99, 1.01]], atol=1e-9)
        self.assertEqual(state.t, 1)

    def test_moments_accumulate(self):
        params = store_with_grad([[0.0]], [[1.0]])
        state = AdamState()
        adam_step(params, state, 0.1)
        params["w"].grad = Tensor2D(np.array([[1.0]]))
        adam_step(params, state, 0.1)
        np.testing.assert_allclose(state.m["w"], [[0.19]])
        np.testing.assert_allclose(state.v["w"], [[0.001999]])
        self.assertEqual(state.t, 2)

    def test_first_step_from_spec_example(self):
        params = store_with_grad([[1.0]], [[0.5]])
        adam_step(params, AdamState(), 0.1)
        self.assertAlmostEqual(params.value("w").data[0, 0], 0.9, delta=1e-6)

    def test_zero_gradient_keeps_value(self):
        params = store_with_grad([[0.7]], [[0.0]])
        adam_step(params, AdamState(), 0.1)
        self.assertEqual(params.value("w").to_list(), [[0.7]])

    def test_ten_steps_match_scalar_formula(self):
        params = store_with_grad([[1.5]], [[0.0]])
        state = AdamState()
        w, m, v = 1.5, 0.0, 0.0
        for t in range(1, 11):
            g = w - 0.3
            params["w"].grad = Tensor2D(np.array([[g]]))
            adam_step(params, state, 0.05, weight_decay=0.01)
            g = g + 0.01 * w
            m = 0.9 * m + (1.0 - 0.9) * g
            v = 0.999 * v + (1.0 - 0.999) * g * g
            m_hat = m / (1.0 - 0.9**t)
            v_hat = v / (1.0 - 0.999**t)
            w = w - 0.05 * m_hat / (math.sqrt(v_hat) + 1e-8)
            self.assertAlmostEqual(params.value("w").data[0, 0], w, delta=1e-12)

    def test_minimizes_a_quadratic(self):
        params = ParamStore(Precision.TEST)
        params.add("w", Tensor2D(np.array([[3.0, -2.0]])))
        params.zero_grad()
        optimizer = Optimizer(OptimizerKind.ADAM, 0.1)
        for _ in range(300):
            w = params.var("w")
            backward(mean_all(mul(w, w)), params)
            optimizer.step(params)
        self.assertLess(float(np.abs(params.value("w").data).max()), 0.1)


class TestOptimizer(unittest.TestCase):
    def test_kind_from_string(self):
        self.assertIs(Optimizer("sgd", 0.1).kind, OptimizerKind.SGD)

    def test_negative_learning_rate(self):
        with self.assertRaises(ConfigError):
            Optimizer("adam", -0.1)

    def test_unknown_kind(self):
        with self.assertRaises(ValueError):
            Optimizer("rmsprop", 0.1)

    def test_sgd_dispatch(self):
        params = store_with_grad([[1.0]], [[1.0]])
        Optimizer("sgd", 0.5).step(params)
        self.assertEqual(params.value("w").to_list(), [[0.5]])


if __name__ == "__main__":
    unittest.main()
