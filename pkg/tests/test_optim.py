import numpy as np
import pytest

from sparse_view_recon.exceptions import DomainError
from sparse_view_recon.optim import AdamState, SurfelOptimizer, adam_step
from sparse_view_recon.splat_render import SurfelGradients


class TestAdamStep:

    def test_first_step_moves_by_learning_rate(self):
        params = {"x": np.array([1.0, -2.0, 3.0])}
        grads = {"x": np.array([0.5, -4.0, 10.0])}
        new, state = adam_step(params, grads, AdamState.zeros_like(params), lr=0.1)
        assert np.allclose(new["x"], params["x"] - 0.1 * np.sign(grads["x"]), atol=1e-6)
        assert state.step == 1

    def test_minimizes_quadratic(self):
        target = np.array([[0.3, -0.7], [1.5, 0.2]])
        params = {"x": np.zeros((2, 2))}
        state = AdamState.zeros_like(params)
        for _ in range(2000):
            params, state = adam_step(params, {"x": 2.0 * (params["x"] - target)}, state, lr=0.01)
        assert np.allclose(params["x"], target, atol=1e-3)

    def test_non_finite_rows_are_skipped(self):
        params = {"a": np.ones((3, 2)), "b": np.ones(3)}
        state = AdamState.zeros_like(params)
        grads = {"a": np.array([[1.0, 1.0], [np.nan, 1.0], [1.0, 1.0]]), "b": np.array([1.0, 1.0, np.inf])}
        new, state = adam_step(params, grads, state, lr=0.1)
        # row 1 has a NaN in "a", row 2 an inf in "b": both rows are frozen in every group
        assert np.array_equal(new["a"][1:], np.ones((2, 2)))
        assert np.array_equal(new["b"][1:], np.ones(2))
        assert np.all(new["a"][0] < 1.0)
        assert np.all(state.m["a"][1:] == 0.0)
        assert state.skipped == 2

    def test_clamp_ranges(self):
        params = {"opacities": np.array([0.99, 0.01]), "scales": np.array([[1e-4, 1.0]])}
        grads = {"opacities": np.array([-1.0, 1.0]), "scales": np.array([[1.0, 1.0]])}
        params_o = {"opacities": params["opacities"]}
        new, _ = adam_step(params_o, {"opacities": grads["opacities"]}, AdamState.zeros_like(params_o), lr=0.5)
        assert np.array_equal(new["opacities"], [1.0, 0.0])
        params_s = {"scales": params["scales"]}
        new, _ = adam_step(params_s, {"scales": grads["scales"]}, AdamState.zeros_like(params_s), lr=0.5)
        assert new["scales"][0, 0] == pytest.approx(1e-4)
        assert new["scales"][0, 1] == pytest.approx(0.5)

    def test_per_group_learning_rates(self):
        params = {"a": np.zeros(2), "b": np.zeros(2)}
        grads = {"a": np.ones(2), "b": np.ones(2)}
        new, _ = adam_step(params, grads, AdamState.zeros_like(params), lr={"a": 0.1, "b": 0.01})
        assert np.allclose(new["a"], -0.1, atol=1e-6)
        assert np.allclose(new["b"], -0.01, atol=1e-6)

    def test_missing_gradient(self):
        params = {"a": np.zeros(2)}
        with pytest.raises(DomainError):
            adam_step(params, {}, AdamState.zeros_like(params), lr=0.1)

    def test_gradient_shape_mismatch(self):
        params = {"a": np.zeros(2)}
        with pytest.raises(DomainError):
            adam_step(params, {"a": np.zeros(3)}, AdamState.zeros_like(params), lr=0.1)

    def test_state_extend(self):
        state = AdamState.zeros_like({"a": np.zeros((2, 3))})
        state.m["a"][:] = 1.0
        grown = state.extend(4)
        assert grown.m["a"].shape == (6, 3)
        assert np.all(grown.m["a"][2:] == 0.0)


class TestSurfelOptimizer:

    def test_step_keeps_frames_orthonormal(self, random_cloud, rng):
        optimizer = SurfelOptimizer()
        cloud = random_cloud
        for _ in range(5):
            grads = SurfelGradients(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 2)),
                                    rng.normal(size=5), rng.normal(size=(5, 3)))
            cloud = optimizer.step(cloud, grads)
        assert np.allclose(np.linalg.norm(cloud.tangents_u, axis=1), 1.0)
        assert np.allclose(np.sum(cloud.tangents_u * cloud.tangents_v, axis=1), 0.0, atol=1e-12)
        assert cloud.opacities.min() >= 0.0 and cloud.opacities.max() <= 1.0
        assert not np.allclose(cloud.positions, random_cloud.positions)

    def test_zero_gradient_is_fixed_point(self, random_cloud):
        optimizer = SurfelOptimizer()
        stepped = optimizer.step(random_cloud, SurfelGradients.zeros(len(random_cloud)))
        assert np.allclose(stepped.positions, random_cloud.positions)
        assert np.allclose(stepped.tangents_u, random_cloud.tangents_u)

    def test_extend_after_densification(self, random_cloud):
        optimizer = SurfelOptimizer()
        optimizer.step(random_cloud, SurfelGradients.zeros(5))
        optimizer.extend(5)
        grown = random_cloud.concatenate(random_cloud.copy())
        stepped = optimizer.step(grown, SurfelGradients.zeros(10))
        assert len(stepped) == 10
        assert optimizer.state.m["positions"].shape == (10, 3)
