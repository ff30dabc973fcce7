"""
Unit tests for Riemannian preconditioning and ideal gate rescaling.
"""

import numpy as np
import pytest

from moelora.errors import RoutingModeError, SingularMatrixError
from moelora.grad_engine import backward_expert, loss_and_grad
from moelora.layer import LayerShape, LoraExpert, forward, init_layer
from moelora.oracle import projection_matrices
from moelora.precond import (
    PrecondConfig,
    damping_for,
    ideal_gate_rescale,
    precondition_bundle,
    precondition_pair,
)
from moelora.tensor_core import RngStream, frobenius_norm, seeded_gaussian

EXACT = PrecondConfig(damping_rel=0.0)


class TestPreconditionPair:
    """Tests for the per-expert preconditioners."""

    def setup_method(self):
        """Set up a random expert and gradients."""
        rng = RngStream(seed=5)
        self.expert = LoraExpert(
            B=seeded_gaussian(rng, 6, 2, 0.5), A=seeded_gaussian(rng, 2, 5, 0.5)
        )
        self.grad_a = seeded_gaussian(rng, 2, 5, 1.0)
        self.grad_b = seeded_gaussian(rng, 6, 2, 1.0)

    def test_orthonormal_factors_leave_gradients_unchanged(self):
        expert = LoraExpert(B=np.eye(6)[:, :2], A=np.eye(5)[:2])
        p_a, p_b = precondition_pair(expert, self.grad_a, self.grad_b, EXACT)
        np.testing.assert_allclose(p_a, self.grad_a, atol=1e-15)
        np.testing.assert_allclose(p_b, self.grad_b, atol=1e-15)

    def test_matches_explicit_inverse(self):
        p_a, p_b = precondition_pair(self.expert, self.grad_a, self.grad_b, EXACT)
        b, a = self.expert.B, self.expert.A
        np.testing.assert_allclose(
            p_a, np.linalg.solve(b.T @ b, self.grad_a), rtol=1e-10
        )
        np.testing.assert_allclose(
            p_b, np.linalg.solve(a @ a.T, self.grad_b.T).T, rtol=1e-10
        )

    def test_damping_is_relative_to_trace(self):
        assert damping_for(np.eye(3) * 4.0, 1e-6) == pytest.approx(4e-6)
        assert damping_for(np.eye(3) * 1e-3, 1e-6) == pytest.approx(1e-6)

    def test_more_damping_shrinks_step(self):
        norms = []
        for rel in (0.0, 1e-4, 1e-2, 1.0):
            cfg = PrecondConfig(damping_rel=rel)
            p_a, _ = precondition_pair(self.expert, self.grad_a, self.grad_b, cfg)
            norms.append(frobenius_norm(p_a))
        assert all(later <= earlier for earlier, later in zip(norms, norms[1:]))


class TestIdealGateRescale:
    """Tests for division by the gate value."""

    def test_divides_by_gate(self):
        p_a, p_b = ideal_gate_rescale(np.ones((2, 2)), np.ones((3, 2)), 0.25)
        np.testing.assert_array_equal(p_a, 4.0 * np.ones((2, 2)))
        np.testing.assert_array_equal(p_b, 4.0 * np.ones((3, 2)))

    def test_floor_caps_the_boost(self):
        p_a, _ = ideal_gate_rescale(np.ones((1, 1)), np.ones((1, 1)), 1e-8, floor=1e-4)
        assert p_a[0, 0] == pytest.approx(1e4)

    @pytest.mark.parametrize("gate", [0.0, -0.1, 1.5])
    def test_gate_out_of_range(self, gate):
        with pytest.raises(ValueError):
            ideal_gate_rescale(np.ones((1, 1)), np.ones((1, 1)), gate)


class TestPreconditionBundle:
    """Tests for whole-bundle preconditioning."""

    def setup_method(self):
        """Build a matrix-mode step with fixed gates."""
        shape = LayerShape(m=6, n=6, num_experts=3, top_k=2, rank=2, alpha=2.0)
        self.layer = init_layer(shape, RngStream(seed=1), init_sigma=0.3)
        self.gates = np.array([0.7, 0.3, 0.0])
        outputs, cache = forward(self.layer, np.eye(6), gates=self.gates)
        target = seeded_gaussian(RngStream(seed=2), 6, 6, 1.0)
        _, self.grad_x = loss_and_grad("mse-matrix", outputs, target)
        self.bundle = backward_expert(cache, self.grad_x)

    def test_disabled_passes_through(self):
        cfg = PrecondConfig(enabled=False)
        out = precondition_bundle(self.layer, self.bundle, self.gates, cfg, "standard")
        assert out is self.bundle

    def test_first_order_update_is_projection(self):
        out = precondition_bundle(
            self.layer, self.bundle, self.gates, EXACT, "standard"
        )
        s = self.layer.scaling
        for i in out.active:
            expert = self.layer.experts[i]
            update = expert.B @ out.grad_a[i] + out.grad_b[i] @ expert.A
            proj = projection_matrices(expert)
            expected = self.gates[i] * s * (
                proj.col_b @ self.grad_x + self.grad_x @ proj.row_a
            )
            np.testing.assert_allclose(update, expected, rtol=1e-9, atol=1e-12)

    def test_input_bundle_not_mutated(self):
        before = [g.copy() for g in self.bundle.grad_a]
        precondition_bundle(self.layer, self.bundle, self.gates, EXACT, "standard")
        for old, new in zip(before, self.bundle.grad_a, strict=True):
            np.testing.assert_array_equal(old, new)

    def test_ideal_rescale_divides_active_experts(self):
        cfg = EXACT.model_copy(update={"ideal_gate_rescale": True})
        plain = precondition_bundle(
            self.layer, self.bundle, self.gates, EXACT, "standard"
        )
        scaled = precondition_bundle(
            self.layer, self.bundle, self.gates, cfg, "standard"
        )
        np.testing.assert_allclose(scaled.grad_a[0], plain.grad_a[0] / 0.7, rtol=1e-14)
        np.testing.assert_allclose(scaled.grad_b[1], plain.grad_b[1] / 0.3, rtol=1e-14)

    def test_ideal_rescale_needs_matrix_mode(self):
        cfg = PrecondConfig(ideal_gate_rescale=True)
        with pytest.raises(RoutingModeError):
            precondition_bundle(self.layer, self.bundle, None, cfg, "standard")

    def test_ideal_rescale_conflicts_with_sqrt_detach(self):
        cfg = PrecondConfig(ideal_gate_rescale=True)
        with pytest.raises(RoutingModeError):
            precondition_bundle(self.layer, self.bundle, self.gates, cfg, "sqrt-detach")

    def test_zero_factor_needs_damping(self):
        shape = LayerShape(m=4, n=4, num_experts=2, top_k=1, rank=2, alpha=2.0)
        layer = init_layer(shape, RngStream(seed=0), init_sigma=0.0)
        gates = np.array([1.0, 0.0])
        outputs, cache = forward(layer, np.eye(4), gates=gates)
        _, grad_x = loss_and_grad("mse-matrix", outputs, np.ones((4, 4)))
        bundle = backward_expert(cache, grad_x)
        with pytest.raises(SingularMatrixError):
            precondition_bundle(layer, bundle, gates, EXACT, "standard")
        damped = precondition_bundle(
            layer, bundle, gates, PrecondConfig(damping_rel=1e-6), "standard"
        )
        assert np.all(np.isfinite(damped.grad_a[0]))
