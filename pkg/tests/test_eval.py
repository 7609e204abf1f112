"""Tests for the evaluation metrics, CV protocol and report export."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sphmicro import eval as evaluation
from sphmicro import fit, model, sph


@pytest.fixture(scope="module")
def hardi():
    return model.load_scheme("hardi")


@pytest.fixture(scope="module")
def cv_configs():
    cfg = model.sample_config_2c(np.random.default_rng(0), 12)
    cfg.f[:] = np.linspace(0.1, 0.9, 12)
    cfg.d[:] = np.linspace(0.3, 2.8, 12)
    return cfg


class TestMAE:
    def test_identity(self):
        x = np.random.default_rng(1).random((50, 2))
        np.testing.assert_array_equal(evaluation.mae(x, x), [0.0, 0.0])

    def test_constant_offset(self):
        x = np.random.default_rng(2).random((40, 2))
        y = x.copy()
        y[:, 1] += 0.1
        np.testing.assert_allclose(evaluation.mae(y, x), [0.0, 0.1], atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            evaluation.mae(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            evaluation.mae(np.zeros((0, 2)), np.zeros((0, 2)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (30, 2), elements=st.floats(-10, 10)), st.randoms())
    def test_permutation_invariant(self, err, random):
        order = list(range(30))
        random.shuffle(order)
        truth = np.zeros((30, 2))
        np.testing.assert_array_equal(evaluation.mae(err, truth),
                                      evaluation.mae(err[order], truth))


class TestFailureRate:
    def test_interior(self):
        assert evaluation.failure_rate(np.linspace(0.1, 0.9, 20)) == 0.0

    def test_all_at_one(self):
        assert evaluation.failure_rate(np.ones(10)) == 1.0

    def test_tolerance_edges(self):
        f = np.array([0.0, 0.0009, 0.0011, 0.5, 0.9989, 0.9991, 1.0])
        assert evaluation.failure_rate(f) == pytest.approx(4 / 7)

    def test_accepts_fit_result(self):
        b = np.array([1.0, 2.2])
        means = np.vstack([fit.smt_model_2c(b, 1.0, 0.5), np.ones(2)])
        res = fit.nlls_smt_2c(means, b)
        assert evaluation.failure_rate(res) == 0.5

    def test_empty(self):
        assert evaluation.failure_rate(np.zeros(0)) == 0.0


class TestRotationalCV:
    def test_rotated_signals_shape_and_identity(self, hardi, cv_configs):
        rots = np.stack([np.eye(3), sph.random_rotations(np.random.default_rng(3), 1)[0]])
        sig = evaluation.rotated_signals(cv_configs, hardi, rots)
        assert sig.shape == (12, 2, len(hardi))
        np.testing.assert_allclose(sig[:, 0], model.synth_signal(cv_configs, hardi), atol=1e-12)
        assert np.abs(sig[:, 1] - sig[:, 0]).max() > 1e-3

    def test_constant_predictor(self, hardi, cv_configs):
        res = evaluation.rotational_cv(lambda s: np.tile([1.0, 0.5], (len(s), 1)), cv_configs,
                                       hardi, rotations=sph.so3_grid(3))
        np.testing.assert_array_equal(res.cv, [0.0, 0.0])
        np.testing.assert_array_equal(res.n_excluded, [0, 0])

    def test_powder_mean_functional(self, hardi, cv_configs):
        # exactly rotation-invariant up to the scheme's re-expansion error
        res = evaluation.rotational_cv(lambda s: model.powder_average(s, hardi), cv_configs,
                                       hardi)
        assert res.per_config.shape == (12, 2)
        assert np.all(res.cv < 0.5)

    def test_directional_predictor_varies(self, hardi, cv_configs):
        j = hardi.weighted_indices[0]
        res = evaluation.rotational_cv(lambda s: s[:, [j, j]], cv_configs, hardi,
                                       rotations=sph.so3_grid(4))
        assert np.all(res.cv > 1.0)

    def test_guard_excludes_and_counts(self, hardi, cv_configs):
        # parameter 0 has a mean near 0.01 for the first five configs
        def shifted(s):
            out = np.ones((len(s), 2))
            out[:, 0] = 1.0 + 0.1 * s[:, hardi.weighted_indices[0]]
            small = np.arange(len(s)) // 27 < 5
            out[small, 0] = 0.01 + 0.001 * s[small, hardi.weighted_indices[0]]
            return out

        rots = sph.so3_grid(3)
        res = evaluation.rotational_cv(shifted, cv_configs, hardi, rotations=rots, chunk=12)
        np.testing.assert_array_equal(res.n_excluded, [5, 0])
        np.testing.assert_allclose(res.cv[0], res.per_config[5:, 0].mean())
        np.testing.assert_allclose(res.cv_unguarded[0], res.per_config[:, 0].mean())

    def test_chunking_invariant(self, hardi, cv_configs):
        pred = lambda s: s[:, hardi.weighted_indices[:2]]  # noqa: E731
        rots = sph.so3_grid(3)
        a = evaluation.rotational_cv(pred, cv_configs, hardi, rotations=rots, chunk=5)
        b = evaluation.rotational_cv(pred, cv_configs, hardi, rotations=rots, chunk=12)
        np.testing.assert_allclose(a.per_config, b.per_config, rtol=1e-12)

    def test_default_grid_size(self):
        assert len(sph.so3_grid(9)) == 729


def two_method_report():
    rep = evaluation.EvalReport(param_names=("d", "f"))
    rep.add_mae("scnn", [0.0884123456, 0.0473])
    rep.add_mae("nlls", [0.1234, 0.1007])
    cv = evaluation.CVResult(cv=np.array([0.21, 0.35]), cv_unguarded=np.array([0.3, 0.4]),
                             n_excluded=np.array([2, 1]), per_config=np.zeros((3, 2)),
                             means=np.zeros((3, 2)))
    rep.add_cv("scnn", cv)
    rep.add_failure("nlls", 0.155)
    rep.dataset = {"n_test": 20000, "snr": 30.0, "seed": 7}
    return rep


class TestReport:
    def test_csv_layout(self, tmp_path):
        path = evaluation.export_report(two_method_report(), tmp_path / "r.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "method,mae_d,mae_f,cv_d,cv_f"
        assert len(lines) == 3
        assert lines[1] == "scnn,0.0884123,0.0473,0.21,0.35"
        assert lines[2] == "nlls,0.1234,0.1007,,"

    @pytest.mark.parametrize("suffix", ["csv", "json"])
    def test_round_trip(self, tmp_path, suffix):
        rep = two_method_report()
        rows = evaluation.read_report_table(
            evaluation.export_report(rep, tmp_path / f"r.{suffix}"))
        assert [r["method"] for r in rows] == ["scnn", "nlls"]
        for row, ref in zip(rows, rep.rows()):
            for key, value in ref.items():
                if key == "method":
                    continue
                if value is None:
                    assert row[key] is None
                else:
                    np.testing.assert_allclose(row[key], value, rtol=5e-6)

    def test_json_descriptors(self, tmp_path):
        path = evaluation.export_report(two_method_report(), tmp_path / "r.json")
        doc = json.loads(path.read_text())
        assert doc["columns"] == ["method", "mae_d", "mae_f", "cv_d", "cv_f"]
        assert doc["failure_rate"] == {"nlls": 0.155}
        assert doc["cv_excluded"] == {"scnn": [2, 1]}
        assert doc["dataset"]["n_test"] == 20000

    def test_empty_report(self, tmp_path):
        path = evaluation.export_report(evaluation.EvalReport(), tmp_path / "e.csv")
        assert path.read_text() == "method,mae_d,mae_f,cv_d,cv_f\n"
        assert evaluation.read_report_table(path) == []

    def test_deterministic(self, tmp_path):
        a = evaluation.export_report(two_method_report(), tmp_path / "a.json").read_bytes()
        b = evaluation.export_report(two_method_report(), tmp_path / "b.json").read_bytes()
        assert a == b

    def test_three_compartment_columns(self):
        rep = evaluation.EvalReport(param_names=model.PARAM_NAMES["3c"])
        assert rep.columns() == ["method", "mae_d_i", "mae_d_sph", "mae_f_i", "mae_f_sph",
                                 "cv_d_i", "cv_d_sph", "cv_f_i", "cv_f_sph"]

    def test_invariants(self):
        rep = evaluation.EvalReport()
        with pytest.raises(ValueError):
            rep.add_mae("x", [-0.1, 0.2])
        with pytest.raises(ValueError):
            rep.add_failure("x", 1.5)

    def test_bad_format(self, tmp_path):
        with pytest.raises(ValueError, match="format"):
            evaluation.export_report(two_method_report(), tmp_path / "r.xml")

    def test_io_error_names_path(self, tmp_path):
        with pytest.raises(OSError, match="missing"):
            evaluation.export_report(two_method_report(), tmp_path / "missing" / "r.csv")
