from __future__ import annotations

import datetime as dt
import math

import numpy as np
import pytest

from kronocov import windpipe
from kronocov.estimators import LambdaRule
from kronocov.synthgen import RngSeed, random_stable_matrix, simulate_var1
from kronocov.windpipe import (
    DetrendState,
    PanelFormatError,
    PredictorModel,
    WindPanel,
    apply_detrend,
    detrend,
    fit_predictor,
    load_panel,
    load_statlib_wind,
    mean_db_improvement,
    predict_series,
    retrend,
    rmse_by_station,
    save_panel,
    tune_lambda,
    tune_lambda_velocity,
    unwindowize,
    windowize,
)


def _dates(T, start=dt.date(1969, 1, 1)):
    return tuple(start + dt.timedelta(days=k) for k in range(T))


def _panel(speeds, start=dt.date(1969, 1, 1)):
    speeds = np.asarray(speeds, dtype=float)
    return WindPanel(_dates(speeds.shape[0], start), tuple(f"S{i}" for i in range(speeds.shape[1])), speeds)


class TestLoad:
    def test_small(self, tmp_path):
        f = tmp_path / "p.csv"
        f.write_text("date,A,B\n2000-01-01,1,2\n2000-01-02,3,4\n2000-01-03,5,6.5\n")
        panel = load_panel(f)
        assert (panel.T, panel.q) == (3, 2)
        assert panel.stations == ("A", "B")
        assert panel.speeds[2, 1] == 6.5

    def test_empty(self, tmp_path):
        f = tmp_path / "e.csv"
        f.write_text("")
        with pytest.raises(PanelFormatError):
            load_panel(f)

    def test_round_trip_bit_exact(self, tmp_path, rng):
        panel = _panel(rng.gamma(2.0, 3.0, size=(40, 3)))
        save_panel(panel, tmp_path / "r.csv")
        back = load_panel(tmp_path / "r.csv")
        assert np.array_equal(back.speeds, panel.speeds)
        assert back.dates == panel.dates

    @pytest.mark.parametrize("body,needle", [
        ("2000-01-01,1,\n", ":2: missing value"),
        ("2000-01-02,1,2\n2000-01-01,1,2\n", ":3: date"),
        ("01/02/2000,1,2\n", ":2: bad ISO date"),
        ("2000-01-01,1\n", ":2: expected 3 fields"),
        ("2000-01-01,x,2\n", ":2: non-numeric"),
    ])
    def test_errors_carry_line(self, tmp_path, body, needle):
        f = tmp_path / "bad.csv"
        f.write_text("date,A,B\n" + body)
        with pytest.raises(PanelFormatError, match=needle):
            load_panel(f)

    def test_negative_speed(self):
        with pytest.raises(ValueError):
            _panel([[1.0, -0.1]])

    def test_statlib(self, tmp_path):
        lines = ["Yr Mo Dy RPT VAL ROS KIL SHA BIR DUB CLA MUL CLO BEL MAL"]
        lines += [f"61  1  {d} " + " ".join(f"{d + s / 10:.2f}" for s in range(12)) for d in (1, 2)]
        f = tmp_path / "wind.data"
        f.write_text("\n".join(lines) + "\n")
        panel = load_statlib_wind(f)
        assert panel.q == 11 and "ROS" not in panel.stations
        assert panel.dates[0] == dt.date(1961, 1, 1)
        assert panel.speeds[1, 0] == pytest.approx(2.0)
        assert panel.speeds[1, 2] == pytest.approx(2.3)  # KIL

    def test_select_years(self, rng):
        panel = _panel(rng.gamma(2.0, size=(800, 2)))
        sub = panel.select_years(1970, 1970)
        assert sub.T == 365 and sub.dates[0] == dt.date(1970, 1, 1)


class TestDetrend:
    def test_constant_degree_zero(self):
        v, _ = detrend(_panel(np.full((30, 3), 9.0)), degree=0)
        assert np.max(np.abs(v)) <= 1e-12

    def test_degree_zero_centres_exactly(self, rng):
        v, _ = detrend(_panel(rng.gamma(2.0, 3.0, size=(400, 4))), degree=0)
        assert np.max(np.abs(v.mean(axis=0))) <= 1e-10

    def test_seasonal_signal(self):
        T = 730
        doy = np.array([d.timetuple().tm_yday for d in _dates(T)])
        root = 5 + np.sin(2 * np.pi * (doy - 1) / 365)
        speeds = np.repeat((root**2)[:, None], 3, axis=1)
        v, state = detrend(_panel(speeds), degree=14)
        signal = root - root.mean()
        assert np.sqrt(np.mean(v**2)) <= 0.02 * np.sqrt(np.mean(signal**2))
        assert state.seasonal_coeffs.size == 15

    def test_degenerate(self):
        with pytest.raises(ValueError):
            detrend(_panel(np.ones((5, 2))), degree=14)

    def test_state_round_trip_and_inverse(self, rng):
        panel = _panel(rng.gamma(2.0, 3.0, size=(400, 3)))
        v, state = detrend(panel, degree=4)
        again = DetrendState.from_dict(state.to_dict())
        np.testing.assert_array_equal(apply_detrend(panel, again), v)
        np.testing.assert_allclose(retrend(v, panel.day_of_year, state), panel.speeds, rtol=1e-10)

    def test_state_validation(self):
        with pytest.raises(ValueError):
            DetrendState(np.zeros(2), np.zeros(3), degree=5)


class TestWindowize:
    def test_paper_dimensions(self, rng):
        s = windowize(rng.standard_normal((730, 11)), 8)
        assert (s.n, s.d) == (91, 88)

    def test_small(self, rng):
        assert windowize(rng.standard_normal((16, 3)), 8).n == 2

    def test_first_sample(self, rng):
        V = rng.standard_normal((20, 3))
        s = windowize(V, 4)
        expected = np.concatenate([V[0], V[1], V[2], V[3]])
        np.testing.assert_array_equal(s.data[0], expected)
        np.testing.assert_array_equal(s.data[1], np.concatenate(V[4:8]))

    def test_inverse(self, rng):
        V = rng.standard_normal((23, 2))
        s = windowize(V, 5)
        np.testing.assert_array_equal(unwindowize(s), V[:20])

    def test_short(self, rng):
        with pytest.raises(ValueError):
            windowize(rng.standard_normal((3, 2)), 4)


class TestPredictor:
    def test_identity(self):
        assert np.all(fit_predictor(np.eye(6), 3, 2).W == 0)

    def test_scalar_ar1(self):
        Sigma = np.array([[4 / 3, 2 / 3], [2 / 3, 4 / 3]])
        np.testing.assert_allclose(fit_predictor(Sigma, 2, 1).W, [[0.5]], rtol=1e-12)

    def test_recovers_var1(self):
        Phi = random_stable_matrix(3, 0.8, RngSeed(10))
        Z = simulate_var1(Phi, 20_000, RngSeed(11))
        from kronocov.estimators import scm

        W = fit_predictor(scm(windowize(Z, 2)), 2, 3).W
        assert np.linalg.norm(W - Phi, 2) <= 0.1

    def test_pinv_stability(self, rng):
        G = rng.standard_normal((12, 4))
        Sigma = G @ G.T  # rank 4, well below pinv_tol in the null space
        N = 1e-15 * rng.standard_normal((12, 12))
        W1 = fit_predictor(Sigma, 4, 3).W
        W2 = fit_predictor(Sigma + 0.5 * (N + N.T), 4, 3).W
        assert np.max(np.abs(W1 - W2)) <= 1e-6

    def test_model_validation(self):
        with pytest.raises(ValueError):
            PredictorModel(3, 2, np.zeros((2, 3)))

    def test_model_round_trip(self, rng):
        m = PredictorModel(3, 2, rng.standard_normal((2, 4)), 0.5)
        assert np.array_equal(PredictorModel.from_dict(m.to_dict()).W, m.W)


class TestPredict:
    def test_zero_model(self, rng):
        pred, valid = predict_series(PredictorModel(3, 2, np.zeros((2, 4))), rng.standard_normal((10, 2)))
        assert np.all(pred == 0) and valid.sum() == 8 and not valid[:2].any()

    def test_model_matched(self):
        V = np.empty((30, 2))
        V[0] = [1.0, -2.0]
        for t in range(1, 30):
            V[t] = 0.5 * V[t - 1]
        pred, valid = predict_series(PredictorModel(2, 2, 0.5 * np.eye(2)), V)
        assert np.max(np.abs(pred[valid] - V[valid])) <= 1e-10

    def test_sliding_index_oracle(self, rng):
        p, q, T = 4, 3, 25
        V = rng.standard_normal((T, q))
        W = rng.standard_normal((q, q * (p - 1)))
        pred, _ = predict_series(PredictorModel(p, q, W), V)
        for t in range(p - 1, T):
            hist = np.concatenate([V[t - (p - 1) + k] for k in range(p - 1)])
            np.testing.assert_allclose(pred[t], W @ hist, rtol=1e-12, atol=1e-12)

    def test_station_mismatch(self, rng):
        with pytest.raises(ValueError):
            predict_series(PredictorModel(2, 2, np.zeros((2, 2))), rng.standard_normal((5, 3)))


class TestRmse:
    def test_zero(self, rng):
        Y = rng.standard_normal((10, 3))
        assert np.all(rmse_by_station(Y, Y, 2) == 0)

    def test_offset(self, rng):
        Y = rng.standard_normal((10, 3))
        np.testing.assert_allclose(rmse_by_station(Y + 0.7, Y, 1), 0.7)

    def test_db_metric(self):
        a = np.array([2.0, 1.0])
        b = np.array([1.0, 1.0])
        assert mean_db_improvement(a, b) == pytest.approx(0.5 * 20 * math.log10(2))

    def test_shape(self):
        with pytest.raises(ValueError):
            rmse_by_station(np.zeros((3, 2)), np.zeros((3, 3)), 0)


class TestTune:
    def _velocity(self, seed=0):
        Phi = random_stable_matrix(4, 0.9, RngSeed(seed))
        return simulate_var1(Phi, 200, RngSeed(seed, (1,)))

    def test_single(self):
        res = tune_lambda_velocity(self._velocity(), 5, LambdaRule("prls_practical"), [0.3])
        assert res.best_C == 0.3 and len(res.curve) == 1

    def test_curve_is_exhaustive_and_argmin(self):
        grid = [0.05, 0.1, 0.3, 1.0]
        res = tune_lambda_velocity(self._velocity(), 5, LambdaRule("prls_practical"), grid, threads=2)
        assert [c for c, _ in res.curve] == grid
        best = min(res.curve, key=lambda cv: (cv[1], cv[0]))
        assert res.best_C == best[0]

    def test_all_fail(self, monkeypatch):
        def boom(*a, **k):
            raise np.linalg.LinAlgError("forced")

        monkeypatch.setattr(windpipe, "estimate_covariance", boom)
        with pytest.raises(ValueError, match="every C"):
            tune_lambda_velocity(self._velocity(), 5, LambdaRule("prls_practical"), [0.1, 0.2])

    def test_empty(self):
        with pytest.raises(ValueError):
            tune_lambda_velocity(self._velocity(), 5, LambdaRule("prls_practical"), [])

    def test_panel_entry_point(self, rng):
        panel = _panel(rng.gamma(4.0, 2.0, size=(400, 3)))
        res = tune_lambda(panel, 4, LambdaRule("svt_lounici"), [0.5, 1.9], degree=3)
        assert res.best_C in (0.5, 1.9)


def test_prls_predictor_beats_scm_when_n_below_d():
    from kronocov.estimators import scm
    from kronocov.windpipe import estimate_covariance

    q, p, n = 10, 8, 40
    wins = 0
    for run in range(5):
        s = RngSeed(77, (run,))
        Z = simulate_var1(random_stable_matrix(q, 0.9, s.child(0)), n * p + 500, s.child(1))
        train, test = Z[: n * p], Z[n * p:]
        samples = windowize(train, p)
        W_scm = fit_predictor(scm(samples), p, q)
        best = tune_lambda_velocity(train, p, LambdaRule("prls_practical"), [0.1, 0.2, 0.5, 1.0]).best_C
        Sigma, lam = estimate_covariance(samples, "prls", LambdaRule("prls_practical", best))
        W_prls = fit_predictor(Sigma, p, q, lambda_used=lam)
        r_scm = rmse_by_station(predict_series(W_scm, test)[0], test, p - 1).mean()
        r_prls = rmse_by_station(predict_series(W_prls, test)[0], test, p - 1).mean()
        wins += r_prls <= r_scm
    assert wins == 5
