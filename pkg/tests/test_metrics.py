import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from banc import metrics
from banc.dsp import AudioBuffer, Bir
from oracles import cross_correlation_lag, edc_partial_sums, fractional_delay, oversampled_lag

FS = 48000


def _delayed_pair(rng, delay, n=4800):
    x = rng.standard_normal(n + 100)
    left = x[100:]
    right = x[100 - delay : 100 - delay + n]
    return left, right


def _exp_bir(t60, seed=0, n=FS, fs=FS):
    t = np.arange(n) / fs
    noise = np.random.default_rng(seed).standard_normal(n)
    return np.exp(-6.9078 * t / t60) * noise


class TestGccPhat:
    def test_identical_channels(self, rng):
        x = rng.standard_normal(2000)
        assert abs(metrics.gcc_phat_itd(x, x, FS)) < 1e-15

    def test_48_sample_delay_against_brute_force(self, rng):
        left, right = _delayed_pair(rng, 48)
        lag = cross_correlation_lag(left, right, 200)
        assert lag == 48
        itd = metrics.gcc_phat_itd(left, right, FS)
        assert abs(itd - lag / FS) < 1e-5
        assert abs(itd * 1e3 - 1.000) < 0.01

    def test_left_delayed_is_negative(self, rng):
        right, left = _delayed_pair(rng, 10)
        assert metrics.gcc_phat_itd(left, right, FS) == pytest.approx(-10 / FS, abs=1e-7)

    def test_fractional_delay(self, rng):
        left = rng.standard_normal(4096)
        right = fractional_delay(left, 10.5)
        truth = oversampled_lag(left, right, 20)
        assert abs(truth - 10.5) < 0.1
        itd = metrics.gcc_phat_itd(left, right, FS) * FS
        assert abs(itd - 10.5) < 0.25

    def test_max_lag_window(self, rng):
        left, right = _delayed_pair(rng, 48)
        # the true peak lies outside a 20-sample window
        assert abs(metrics.gcc_phat_itd(left, right, FS, max_lag=20)) <= 20 / FS

    def test_zero_energy(self, rng):
        with pytest.raises(ValueError, match="zero-energy"):
            metrics.gcc_phat_itd(np.zeros(100), rng.standard_normal(100), FS)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(-60, 60), st.floats(0.01, 100.0), st.integers(0, 2**31))
    def test_antisymmetric_and_scale_invariant(self, delay, scale, seed):
        rng = np.random.default_rng(seed)
        left, right = _delayed_pair(rng, delay % 97, n=1000) if delay >= 0 else _delayed_pair(rng, -delay)[::-1]
        a = metrics.gcc_phat_itd(left, right, FS)
        assert abs(a + metrics.gcc_phat_itd(right, left, FS)) < 1e-6
        assert abs(a - metrics.gcc_phat_itd(scale * left, scale * right, FS)) < 1e-6


class TestSpatialErrors:
    def _buf(self, left, right):
        return AudioBuffer(np.stack([left, right]), FS)

    def test_identity(self, rng):
        b = self._buf(*_delayed_pair(rng, 12))
        assert metrics.itd_error(b, b) == 0.0
        assert metrics.ild_errors(b, b) == (0.0, 0.0)

    def test_swap_doubles(self, rng):
        left, right = _delayed_pair(rng, 24)
        tau = metrics.gcc_phat_itd(left, right, FS)
        err = metrics.itd_error(self._buf(left, right), self._buf(right, left))
        assert err == pytest.approx(2 * abs(tau), abs=1e-9)
        assert err == pytest.approx(48 / FS, abs=1e-6)

    def test_energy_doubled_left(self, rng):
        left, right = rng.standard_normal(1000), rng.standard_normal(1000)
        e = metrics.ild_errors(self._buf(left, right), self._buf(math.sqrt(2) * left, right))
        assert abs(e[0] - 6.0206) < 1e-4
        assert abs(e[0] - 20 * math.log10(2)) < 1e-9
        assert e[1] == 0.0

    def test_common_scaling_not_zero(self, rng):
        left, right = rng.standard_normal(1000), rng.standard_normal(1000)
        e = metrics.ild_errors(self._buf(left, right), self._buf(0.5 * left, 0.5 * right))
        # 20 log10(0.25) on squared norms
        np.testing.assert_allclose(e, [40 * math.log10(2)] * 2, rtol=1e-12)

    def test_zero_reference(self, rng):
        ref = self._buf(np.zeros(100), rng.standard_normal(100))
        with pytest.raises(ValueError, match="zero reference energy"):
            metrics.ild_errors(ref, ref)

    def test_mono_rejected(self, rng):
        mono = AudioBuffer(rng.standard_normal(100), FS)
        with pytest.raises(ValueError, match="2 channels"):
            metrics.itd_error(mono, mono)


class TestEdc:
    def test_unit_impulse(self):
        h = np.zeros(100)
        h[0] = 1.0
        edc = metrics.schroeder_edc(h)
        assert edc[0] == 0.0
        assert np.all(edc[1:] == -120.0)

    def test_constant_closed_form(self):
        n = 500
        edc = metrics.schroeder_edc(np.full(n, 0.3))
        t = np.arange(n)
        np.testing.assert_allclose(edc, 10 * np.log10((n - t) / n), atol=1e-10)

    def test_matches_partial_sums_exactly(self, rng):
        h = rng.standard_normal(3000) * np.exp(-np.arange(3000) / 300)
        np.testing.assert_array_equal(metrics.schroeder_edc(h), edc_partial_sums(h))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=200).filter(lambda v: any(v)))
    def test_non_increasing(self, values):
        edc = metrics.schroeder_edc(np.array(values))
        assert edc[0] == 0.0
        assert np.all(np.diff(edc) <= 0)

    def test_zero_energy(self):
        with pytest.raises(ValueError):
            metrics.schroeder_edc(np.zeros(10))

    @pytest.mark.parametrize("exponent", [-530, 530])
    def test_extreme_scale(self, rng, exponent):
        h = rng.standard_normal(500) * np.exp(-np.arange(500) / 50)
        np.testing.assert_array_equal(metrics.schroeder_edc(np.ldexp(h, exponent)), metrics.schroeder_edc(h))
        np.testing.assert_allclose(metrics.schroeder_edc(10.0 ** (exponent * 0.3) * h), metrics.schroeder_edc(h),
                                   atol=1e-9)
        assert metrics.schroeder_edc(np.array([3.0756348324446213e-263]))[0] == 0.0


class TestAcousticParams:
    @pytest.mark.parametrize("t60", [0.2, 0.5, 0.9])
    def test_exponential_t60(self, t60):
        h = _exp_bir(t60)
        p = metrics.channel_params(h, FS)
        assert abs(p.t60 - t60) / t60 < 0.05
        assert abs(p.edt - t60) / t60 < 0.1

    def test_impulse(self):
        h = np.zeros(FS)
        h[480] = 1.0
        p = metrics.channel_params(h, FS)
        assert p.cte == 480 / FS
        assert p.drr == metrics.DRR_CAP_DB
        assert p.t60 is None and p.edt is None

    def test_drr_window(self):
        h = np.zeros(FS)
        h[100] = 1.0
        h[100 + 119] = 0.5  # inside the 2.5 ms window (120 samples)
        h[100 + 1000] = 0.5
        p = metrics.channel_params(h, FS)
        assert p.drr == pytest.approx(10 * math.log10(1.25 / 0.25), abs=1e-12)

    def test_scale_invariant(self):
        h = _exp_bir(0.4, seed=3)
        a, b = metrics.channel_params(h, FS), metrics.channel_params(7.5 * h, FS)
        for field in ("t60", "drr", "edt", "cte", "c50"):
            assert getattr(a, field) == pytest.approx(getattr(b, field), rel=1e-9)

    def test_per_channel(self):
        bir = Bir(_exp_bir(0.3, 1), _exp_bir(0.7, 2), FS)
        left, right = metrics.acoustic_params(bir)
        assert left.t60 < right.t60


class TestEvalReport:
    def _item(self, rng, name="a"):
        left, right = _delayed_pair(rng, 5, n=FS // 2)
        buf = AudioBuffer(np.stack([left, right]), FS)
        bir = Bir(_exp_bir(0.3, 4, n=FS // 2), _exp_bir(0.4, 5, n=FS // 2), FS)
        return metrics.EvalItem(name, buf, buf, [bir], [bir])

    def test_perfect_is_zero(self, rng):
        rep = metrics.eval_report([self._item(rng)])
        for col in metrics.COLUMNS[1:]:
            assert rep.rows[0][col] == 0.0

    def test_single_item_mean(self, rng):
        item = self._item(rng)
        item.rec = AudioBuffer(item.rec.samples * np.array([[1.0], [0.5]]), FS)
        rep = metrics.eval_report([item])
        for col in metrics.COLUMNS[1:]:
            assert rep.mean[col] == rep.rows[0][col]
        assert rep.mean["e_ildr_db"] > 0

    def test_columns(self, rng):
        rep = metrics.eval_report([self._item(rng)])
        header = next(csv.reader(io.StringIO(rep.to_csv())))
        assert header == ["item", "e_itd_ms", "e_ildl_db", "e_ildr_db",
                          "t60_ms_l", "drr_db_l", "edt_ms_l", "cte_ms_l",
                          "t60_ms_r", "drr_db_r", "edt_ms_r", "cte_ms_r"]
        data = json.loads(rep.to_json())
        assert data["columns"] == header
        assert data["mean"]["item"] == "mean"

    def test_missing_birs_are_nan(self, rng):
        item = self._item(rng)
        item.bir_ref, item.bir_rec = [], []
        rep = metrics.eval_report([item])
        assert math.isnan(rep.rows[0]["t60_ms_l"])
        assert json.loads(rep.to_json())["items"][0]["t60_ms_l"] is None

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            metrics.eval_report([])
