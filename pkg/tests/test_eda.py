import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from sympcam.dataset import Series
from sympcam.eda import CvxEDAParams, decompose_tonic, spearman
from sympcam.errors import DecompositionError, DomainError, UndefinedCorrelationError

from _oracles import spearman_oracle


def bateman(t, onset, tau0=0.7, tau1=2.0):
    lag = np.clip(t - onset, 0, None)
    return np.exp(-lag / tau1) - np.exp(-lag / tau0)


class TestSpearman:
    def test_identity_and_reverse(self):
        a = np.arange(10.0)
        assert spearman(a, a) == 1.0
        assert spearman(a, a[::-1]) == -1.0

    def test_matches_oracle_with_ties(self, rng):
        for _ in range(100):
            n = int(rng.integers(3, 501))
            a = rng.integers(0, max(n // 3, 2), n).astype(float)
            b = np.round(rng.standard_normal(n), 1)
            if np.ptp(a) == 0 or np.ptp(b) == 0:
                continue
            assert abs(spearman(a, b) - spearman_oracle(a, b)) <= 1e-12

    @settings(max_examples=20, deadline=None)
    # values on a 0.1 grid so the float transforms stay strictly monotone
    @given(st.lists(st.integers(-50, 50), min_size=3, max_size=60).filter(lambda v: len(set(v)) > 1),
           st.randoms(use_true_random=False))
    def test_monotone_invariance(self, values, r):
        a = np.array(values) / 10.0
        b = np.array([r.uniform(-1, 1) for _ in values])
        if np.ptp(b) == 0:
            return
        base = spearman(a, b)
        assert spearman(np.exp(a), b) == base
        assert spearman(a ** 3, b) == base
        assert spearman(2.5 * a + 7.0, b) == base

    def test_constant_input_is_undefined(self):
        with pytest.raises(UndefinedCorrelationError):
            spearman(np.ones(5), np.arange(5.0))

    def test_input_validation(self):
        with pytest.raises(ValueError):
            spearman([1.0, 2.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            spearman([1.0, 2.0, 3.0], [1.0, 2.0])


class TestDecomposition:
    def test_constant_input(self):
        d = decompose_tonic(Series(np.full(400, 3.5), 4.0))
        np.testing.assert_array_equal(d.tonic.values, 3.5)
        np.testing.assert_array_equal(d.phasic.values, 0.0)

    def test_slow_ramp_is_tonic(self):
        x = np.linspace(2.0, 4.0, 4 * 120)
        d = decompose_tonic(Series(x, 4.0))
        assert np.sum(d.phasic.values ** 2) < 0.01 * np.sum(x ** 2)
        np.testing.assert_allclose(d.tonic.values, x, rtol=1e-2)

    def test_three_scr_bumps_recovered(self):
        fs = 4.0
        t = np.arange(int(120 * fs)) / fs
        onsets = (30.0, 60.0, 90.0)
        x = 3.0 + 0.004 * t + sum(0.6 * bateman(t, o) for o in onsets)
        d = decompose_tonic(Series(x, fs))
        driver = d.driver.values
        peaks, props = signal.find_peaks(driver, height=0)
        top = np.sort(peaks[np.argsort(props["peak_heights"])[-3:]])
        expected = np.round(np.array(onsets) * fs).astype(int)
        assert np.all(np.abs(top - expected) <= 2)
        # the three injected events dominate everything else
        others = np.delete(props["peak_heights"], np.argsort(props["peak_heights"])[-3:])
        assert others.size == 0 or others.max() < 0.1 * props["peak_heights"].max()

    def test_reconstruction_identity(self, canonical_session):
        eda = canonical_session.eda
        d = decompose_tonic(eda)
        recon = d.tonic.values + d.phasic.values + d.residual.values
        assert np.max(np.abs(recon - eda.values)) <= 1e-6 * np.max(np.abs(eda.values))

    def test_tonic_is_smooth(self, canonical_session):
        tonic = decompose_tonic(canonical_session.eda).tonic
        f, p = signal.periodogram(tonic.values - tonic.values.mean(), tonic.fs)
        assert p[f > 0.25].sum() < 0.05 * p.sum()

    def test_scale_equivariance(self, rng):
        fs = 4.0
        t = np.arange(int(90 * fs)) / fs
        x = 4.0 + 0.3 * np.sin(2 * np.pi * t / 60) + 0.5 * bateman(t, 40.0)
        a = decompose_tonic(Series(x, fs))
        b = decompose_tonic(Series(3.0 * x, fs))
        scale = np.abs(3.0 * x).max()
        np.testing.assert_allclose(b.tonic.values, 3.0 * a.tonic.values, atol=1e-6 * scale)
        np.testing.assert_allclose(b.phasic.values, 3.0 * a.phasic.values, atol=1e-6 * scale)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            decompose_tonic(Series(np.r_[np.ones(200), 0.0], 4.0))
        with pytest.raises(DomainError):
            decompose_tonic(Series(np.ones(80), 4.0))
        with pytest.raises(DomainError):
            decompose_tonic(Series(np.ones(60), 0.5))

    def test_iteration_cap_raises_with_diagnostics(self):
        t = np.arange(400) / 4.0
        x = 3.0 + 0.5 * bateman(t, 30.0)
        with pytest.raises(DecompositionError, match="iterations"):
            decompose_tonic(Series(x, 4.0), CvxEDAParams(maxiters=1))

    def test_csv_export(self, tmp_path):
        t = np.arange(200) / 4.0
        raw = Series(3.0 + 0.5 * bateman(t, 20.0), 4.0)
        d = decompose_tonic(raw)
        d.to_csv(tmp_path / "d.csv", raw)
        data = np.loadtxt(tmp_path / "d.csv", delimiter=",", skiprows=1)
        assert open(tmp_path / "d.csv").readline().strip() == "t_s,raw,tonic,phasic"
        np.testing.assert_array_equal(data[:, 1], raw.values)
        np.testing.assert_array_equal(data[:, 2], d.tonic.values)
