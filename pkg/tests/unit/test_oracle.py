"""
Unit tests for the projection identities, the verification suites and gradcheck.
"""

import numpy as np
import pytest

from moelora.layer import LayerShape, LoraExpert, forward
from moelora.oracle import (
    EXACT,
    GradcheckReport,
    ParamClassResult,
    VerificationRow,
    balanced_gate_ratio,
    balanced_suite,
    damping_monotonicity_suite,
    gradcheck_layer,
    gradcheck_rows,
    gradcheck_suite,
    identical_expert_layer,
    identity_suite,
    measure_one_step,
    oracle_gates,
    oracle_layer,
    oracle_target,
    predicted_update_conventional,
    predicted_update_rescaled,
    projection_matrices,
    projection_suite,
    random_invertible,
    reparameterization_suite,
    verification_grid,
    write_report,
)
from moelora.precond import PrecondConfig
from moelora.tensor_core import RngStream, seeded_gaussian

IDEAL = EXACT.model_copy(update={"ideal_gate_rescale": True})


class TestProjections:
    """Tests for the column/row-space projectors."""

    def test_coordinate_column(self):
        b = np.zeros((4, 1))
        b[0, 0] = 2.0
        expert = LoraExpert(B=b, A=np.ones((1, 3)))
        pair = projection_matrices(expert)
        expected = np.zeros((4, 4))
        expected[0, 0] = 1.0
        np.testing.assert_allclose(pair.col_b, expected, atol=1e-15)
        np.testing.assert_allclose(pair.row_a, np.ones((3, 3)) / 3.0, rtol=1e-14)

    def test_full_rank_factor_projects_onto_everything(self):
        rng = RngStream(seed=4)
        expert = LoraExpert(
            B=seeded_gaussian(rng, 5, 3, 1.0), A=seeded_gaussian(rng, 3, 3, 1.0)
        )
        pair = projection_matrices(expert)
        np.testing.assert_allclose(pair.row_a, np.eye(3), atol=1e-10)

    def test_projection_suite_passes(self):
        rows = projection_suite(count=20)
        assert [row.identity for row in rows] == [
            "projection-symmetry",
            "projection-idempotence",
            "projection-range",
        ]
        assert all(row.passed for row in rows)


class TestPredictions:
    """Tests for the squared-gate and linear-gate predictions."""

    def setup_method(self):
        """Two identical experts sharing gates (0.5, 0.5)."""
        rng = RngStream(seed=8)
        self.layer = identical_expert_layer(2, 2, rng)
        self.gates = np.array([0.5, 0.5])
        self.grad = seeded_gaussian(rng, 12, 12, 1.0)

    def test_balanced_pair_doubles_update(self):
        conventional = predicted_update_conventional(
            self.layer, self.gates, self.grad, 1e-3
        )
        rescaled = predicted_update_rescaled(self.layer, self.gates, self.grad, 1e-3)
        np.testing.assert_allclose(rescaled, 2.0 * conventional, rtol=1e-12)

    def test_single_expert_predictions_coincide(self):
        layer = oracle_layer(1, 2, RngStream(seed=1))
        gates = np.array([1.0])
        np.testing.assert_allclose(
            predicted_update_conventional(layer, gates, self.grad, 1e-3),
            predicted_update_rescaled(layer, gates, self.grad, 1e-3),
            rtol=1e-15,
        )

    def test_scaling_enters_squared(self):
        gates = np.array([1.0])
        unit = oracle_layer(1, 4, RngStream(seed=2), alpha=4.0)
        scaled = oracle_layer(1, 4, RngStream(seed=2), alpha=16.0)
        assert scaled.scaling == 4.0
        np.testing.assert_allclose(
            predicted_update_rescaled(scaled, gates, self.grad, 1e-3),
            16.0 * predicted_update_rescaled(unit, gates, self.grad, 1e-3),
            rtol=1e-12,
        )


class TestMeasureOneStep:
    """Tests for single-step update measurements."""

    def setup_method(self):
        """Set up an oracle fixture with three of five experts active."""
        rng = RngStream(seed=3)
        self.layer = oracle_layer(5, 2, rng, top_k=3)
        self.gates = oracle_gates(5, 3, rng)
        self.target = oracle_target(self.layer, self.gates, rng)

    def test_oracle_gates_are_a_simplex(self):
        assert np.count_nonzero(self.gates) == 3
        assert self.gates.sum() == pytest.approx(1.0, abs=1e-14)

    def test_target_sets_gradient_norm(self):
        outputs, _ = forward(self.layer, np.eye(12), gates=self.gates)
        assert np.linalg.norm(outputs - self.target) == pytest.approx(0.03)

    def test_zero_step_changes_nothing(self):
        report = measure_one_step(
            self.layer, "standard", EXACT, self.target, self.gates, 0.0
        )
        np.testing.assert_array_equal(report.observed, 0.0)
        np.testing.assert_array_equal(report.value_observed, 0.0)

    def test_layer_is_not_modified(self):
        before = self.layer.experts[0].A.copy()
        measure_one_step(self.layer, "standard", EXACT, self.target, self.gates, 1e-2)
        np.testing.assert_array_equal(self.layer.experts[0].A, before)

    @pytest.mark.parametrize(
        "mode,cfg,identity",
        [
            ("standard", EXACT, "squared-gate"),
            ("sqrt-detach", EXACT, "linear-gate"),
            ("standard", IDEAL, "linear-gate"),
            ("standard", PrecondConfig(enabled=False), "plain"),
        ],
    )
    def test_identity_pairing(self, mode, cfg, identity):
        report = measure_one_step(self.layer, mode, cfg, self.target, self.gates, 1e-5)
        assert report.identity == identity
        scale = np.linalg.norm(report.predicted)
        np.testing.assert_allclose(
            report.first_order, report.predicted, rtol=0, atol=1e-8 * scale
        )

    def test_sqrt_path_weights(self):
        report = measure_one_step(
            self.layer, "sqrt-detach", EXACT, self.target, self.gates, 1e-5
        )
        np.testing.assert_allclose(report.path_weights, np.sqrt(self.gates))

    def test_first_order_scaling_with_alpha(self):
        rng = RngStream(seed=12)
        layer = oracle_layer(1, 4, rng, alpha=16.0)
        gates = np.array([1.0])
        target = oracle_target(layer, gates, rng)
        report = measure_one_step(layer, "standard", EXACT, target, gates, 1e-6)
        scale = np.linalg.norm(report.predicted)
        np.testing.assert_allclose(
            report.first_order, report.predicted, rtol=0, atol=1e-8 * scale
        )


class TestIdentitySuites:
    """Tests for the identity rows over the verification grid."""

    def test_grid_respects_top_k(self):
        grid = verification_grid()
        assert (1, 2, 1) not in grid
        assert (20, 10, 4) in grid
        assert all(k <= n for n, k, _ in grid)

    @pytest.mark.parametrize("config", [(1, 1, 1), (2, 2, 2), (5, 2, 4), (20, 10, 4)])
    def test_identity_suite_passes(self, config):
        rows = identity_suite(*config)
        assert len(rows) == 7
        failed = [row.identity for row in rows if not row.passed]
        assert failed == []
        assert rows[-1].identity == "rescale-route-agreement"

    @pytest.mark.parametrize("k", [1, 2, 10])
    def test_balanced_gate_ratio(self, k):
        layer = identical_expert_layer(10, 4, RngStream(seed=0))
        assert balanced_gate_ratio(layer, k) == pytest.approx(k, rel=1e-3)

    def test_balanced_suite_passes(self):
        rows = balanced_suite(ks=(1, 2, 5))
        assert [row.config_id for row in rows] == [
            "balanced-k1",
            "balanced-k2",
            "balanced-k5",
        ]
        assert all(row.passed for row in rows)

    def test_reparameterization_invariance(self):
        (row,) = reparameterization_suite(count=10)
        assert row.identity == "reparameterization-invariance"
        assert row.passed

    def test_random_invertible_condition(self):
        r_matrix = random_invertible(4, RngStream(seed=1))
        singular = np.linalg.svd(r_matrix, compute_uv=False)
        assert singular.max() / singular.min() == pytest.approx(100.0, rel=1e-9)

    def test_damping_monotonicity(self):
        (row,) = damping_monotonicity_suite(count=10)
        assert row.passed
        assert row.residual == 0.0


class TestGradcheck:
    """Tests for finite-difference gradient checking."""

    def setup_method(self):
        """Set up a small gradcheck layer."""
        shape = LayerShape(m=6, n=5, num_experts=4, top_k=2, rank=2, alpha=4.0)
        self.layer = gradcheck_layer(shape, RngStream(seed=0))

    @pytest.mark.parametrize("mode", ["standard", "sqrt-detach"])
    @pytest.mark.parametrize("loss_kind", ["mse-token", "softmax-xent"])
    def test_analytic_matches_numeric(self, mode, loss_kind):
        report = gradcheck_suite(self.layer, mode, loss_kind, samples=200)
        assert [c.name for c in report.classes] == ["A", "B", "router"]
        for result in report.classes:
            assert result.checked + result.excluded == 200
            assert result.checked > 0
        assert report.passed

    def test_zero_loss_point(self):
        inputs = seeded_gaussian(RngStream(seed=5), 5, 3, 1.0)
        outputs, _ = forward(self.layer, inputs)
        report = gradcheck_suite(
            self.layer,
            "standard",
            "mse-token",
            samples=50,
            inputs=inputs,
            target=outputs,
        )
        assert report.loss == 0.0
        expert_classes = [c for c in report.classes if c.name != "router"]
        assert all(c.passed for c in expert_classes)

    def test_layer_left_untouched(self):
        before = self.layer.router.copy()
        gradcheck_suite(self.layer, "standard", "mse-token", samples=20)
        np.testing.assert_array_equal(self.layer.router, before)

    def test_rows_and_failure(self):
        report = GradcheckReport(
            mode="sqrt-detach",
            loss_kind="mse-token",
            loss=1.0,
            classes=[
                ParamClassResult(
                    name="A",
                    checked=3,
                    excluded=0,
                    max_rel_error=1e-9,
                    max_error_ratio=0.01,
                    passed=True,
                ),
                ParamClassResult(
                    name="router",
                    checked=2,
                    excluded=1,
                    max_rel_error=0.5,
                    max_error_ratio=5e5,
                    passed=False,
                ),
            ],
        )
        assert not report.passed
        rows = gradcheck_rows([report])
        assert [row.identity for row in rows] == ["gradcheck-A", "gradcheck-router"]
        assert rows[0].config_id == "sqrt-detach-mse-token"
        assert [row.residual for row in rows] == [0.01, 5e5]
        assert all(row.tolerance == 1.0 for row in rows)

    def test_rows_agree_with_tolerance_at_desk_scale(self):
        shape = LayerShape(m=64, n=64, num_experts=20, top_k=10, rank=4, alpha=16.0)
        layer = gradcheck_layer(shape, RngStream(seed=0))
        report = gradcheck_suite(layer, "standard", "mse-token", samples=40)
        assert report.passed
        for result in report.classes:
            assert result.passed == (result.max_error_ratio <= 1.0)
        for row in gradcheck_rows([report]):
            assert row.passed == (row.residual <= row.tolerance)


class TestWriteReport:
    """Tests for the CSV and text verification report."""

    def test_writes_both_files(self, tmp_path):
        rows = [
            VerificationRow(
                config_id="N2-k1-r1",
                identity="squared-gate-residual",
                residual=1e-13,
                tolerance=1e-10,
                passed=True,
            ),
            VerificationRow(
                config_id="N2-k1-r1",
                identity="squared-gate-scaling",
                residual=50.0,
                tolerance=90.0,
                passed=False,
            ),
        ]
        csv_path = tmp_path / "verify.csv"
        text_path = tmp_path / "verify.txt"
        write_report(rows, csv_path, text_path)

        lines = csv_path.read_text().splitlines()
        assert lines[0] == "config_id,identity,residual,tolerance,passed"
        assert lines[1].endswith(",pass")
        assert lines[2].endswith(",FAIL")
        summary = text_path.read_text().splitlines()
        assert summary[0] == "2 checks, 1 failed"
        assert summary[2].startswith("FAIL")
