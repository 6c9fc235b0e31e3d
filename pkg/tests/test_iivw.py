import numpy as np
import pytest

from visitsim.dgm import ScenarioConfig, simulate_panel
from visitsim.domain import Subject, build_panel, panel_row_arrays
from visitsim.errors import EstimationError, ValidationError
from visitsim.iivw import WeightTable, compute_iiv_weights, fit_iivw, fit_wgee
from visitsim.survfit import CoxFit, fit_andersen_gill


def toy_coxfit(eta, converged=True):
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    z = np.zeros((len(eta), len(eta)))
    return CoxFit(eta, z, z, 0.0, converged, 1, 1)


def simple_panel():
    return build_panel([
        Subject(1, 1, 5.0, [0.0, 1.0, 2.0], [0.1, 0.2, 0.3]),
        Subject(2, 0, 6.0, [0.0, 2.0], [0.4, 0.5]),
        Subject(3, 1, 6.0, [0.0], [0.6]),
    ])


class TestComputeWeights:
    def test_normalization_mean_one(self):
        # raw weights {2, 1, 0.5} -> normalized {1.8333, 0.8333, 0.3333}
        raw = np.array([2.0, 1.0, 0.5])
        normalized = raw - raw.mean() + 1.0
        np.testing.assert_allclose(normalized, [1.8333, 0.8333, 0.3333], atol=5e-5)
        assert normalized.mean() == pytest.approx(1.0, abs=1e-10)

    def test_null_weight_model_gives_unit_weights(self):
        panel = simple_panel()
        table = compute_iiv_weights(toy_coxfit([0.0]), panel)
        assert all(w == 1.0 for w in table.weights.values())

    def test_first_visit_weight_one_and_shift(self):
        panel = simple_panel()
        table = compute_iiv_weights(toy_coxfit([0.5]), panel)
        raw_t = np.exp(-0.5)
        mean_raw = (raw_t * 3 + 1.0 * 2 + raw_t * 1) / 6.0
        for s in panel.subjects:
            assert table.weight_for(s.id, 0) == 1.0
            expect = (raw_t if s.z == 1 else 1.0) - mean_raw + 1.0
            for j in range(1, s.n_visits):
                assert table.weight_for(s.id, j) == pytest.approx(expect, abs=1e-12)

    def test_mean_one_before_shift_on_simulated_panel(self):
        cfg = ScenarioConfig(family="joint_model", weibull_scale=0.3, gamma=1.5, n_subjects=60)
        panel = simulate_panel(cfg, 3)
        ag = fit_andersen_gill(panel.gap_records, robust="sandwich")
        compute_iiv_weights(ag, panel)
        raw = {s.id: float(np.exp(-s.z * ag.eta[0])) for s in panel.subjects}
        values = [raw[s.id] for s in panel.subjects for _ in range(s.n_visits)]
        normalized = np.asarray(values) - np.mean(values) + 1.0
        assert normalized.mean() == pytest.approx(1.0, abs=1e-10)

    def test_requires_converged_weight_model(self):
        with pytest.raises(EstimationError):
            compute_iiv_weights(toy_coxfit([0.5], converged=False), simple_panel())

    def test_determinism(self):
        panel = simple_panel()
        a = compute_iiv_weights(toy_coxfit([0.3]), panel)
        b = compute_iiv_weights(toy_coxfit([0.3]), panel)
        assert a.weights == b.weights

    def test_csv_export(self, tmp_path):
        table = compute_iiv_weights(toy_coxfit([0.3]), simple_panel())
        path = tmp_path / "weights.csv"
        table.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "subject_id,visit_index,weight"
        assert len(lines) == 1 + len(table)


class TestWgee:
    def test_unit_weights_equal_ols(self):
        cfg = ScenarioConfig(family="joint_model", weibull_scale=0.3, gamma=0.0, n_subjects=50)
        panel = simulate_panel(cfg, 5)
        unit = WeightTable({(s.id, j): 1.0 for s in panel.subjects for j in range(s.n_visits)})
        fit = fit_wgee(panel, unit)
        rows = panel_row_arrays(panel)
        X = np.column_stack([np.ones_like(rows["y"]), rows["z"], rows["t"]])
        ols = np.linalg.solve(X.T @ X, X.T @ rows["y"])
        np.testing.assert_allclose(fit.estimates, ols, atol=1e-10)
        assert fit.loglik is None
        assert fit.model_label == "E"

    def test_weight_rescaling_leaves_estimates(self):
        cfg = ScenarioConfig(family="joint_model", weibull_scale=0.3, gamma=1.5, n_subjects=50)
        panel = simulate_panel(cfg, 6)
        table = compute_iiv_weights(fit_andersen_gill(panel.gap_records, robust="sandwich"), panel)
        half = WeightTable({k: 0.5 * v for k, v in table.weights.items()})
        a = fit_wgee(panel, table)
        b = fit_wgee(panel, half)
        np.testing.assert_allclose(a.estimates, b.estimates, atol=1e-12)

    def test_missing_weight_rejected(self):
        panel = simple_panel()
        incomplete = WeightTable({(1, 0): 1.0})
        with pytest.raises(ValidationError, match="missing weight"):
            fit_wgee(panel, incomplete)

    def test_two_stage_pipeline(self):
        cfg = ScenarioConfig(family="joint_model", weibull_scale=0.3, gamma=0.0, n_subjects=100)
        panel = simulate_panel(cfg, 9)
        fit = fit_iivw(panel)
        assert fit.converged
        assert fit.param_names == ("alpha0", "alpha1", "alpha2")
        assert np.all(fit.std_errors > 0)
