"""Tests for the memory-polynomial TD-DPD and its indirect-learning fit."""

import numpy as np
import pytest

from services.errors import DimensionError, StateError, TrainingDivergenceError
from services.metrics import tx_nmse
from services.mimo import normalize_power
from services.numerics import rng_stream, stream_id
from services.pa_model import SHARED, MpArrayModel, MpCoeffs, PaSynthSpec, mp_apply, synth_pa_array
import services.td_dpd as td_dpd
from services.td_dpd import TdDpdSpec, fit_td_dpd, ila_fit, mp_regressor_matrix, td_dpd_apply
from services.waveform import build_subcarrier_mask, fd_to_td, gen_fd_symbols


def ofdm_frames(count, branches, seed, n_fft=2048, bw=50.0, dbm=-20.0):
    mask = build_subcarrier_mask(n_fft, 200.0, bw)
    rng = rng_stream(seed, stream_id("ila-frames"))
    frames = []
    for _ in range(count):
        S = gen_fd_symbols(branches, mask, 16, rng, n_fft)
        x, _ = normalize_power(fd_to_td(S.entries), dbm)
        frames.append(x)
    return np.stack(frames)


class TestRegressor:
    def test_linear_memoryless_is_x(self, rng):
        x = rng.complex_normal(10)
        assert np.array_equal(mp_regressor_matrix(x, 0, 1)[:, 0], x)

    def test_entries(self, rng):
        x = rng.complex_normal(8)
        phi = mp_regressor_matrix(x, 1, 3)
        assert phi.shape == (8, 4)
        # column order: (k=1, m=0), (1, 1), (3, 0), (3, 1)
        assert phi[5, 1] == x[4]
        assert phi[5, 3] == pytest.approx(x[4] * abs(x[4]) ** 2)
        assert phi[0, 1] == 0 and phi[0, 3] == 0

    def test_column_count(self, rng):
        assert mp_regressor_matrix(rng.complex_normal(50), 4, 7).shape[1] == 20

    def test_too_short(self, rng):
        with pytest.raises(DimensionError):
            mp_regressor_matrix(rng.complex_normal(6), 2, 3)


class TestIla:
    def test_linear_pa_gives_identity(self):
        pa = MpCoeffs.identity(gain=100.0)
        drive = ofdm_frames(1, 1, seed=1, n_fft=512)[0, :, 0]
        dpd = ila_fit(pa, drive, TdDpdSpec(order=1, memory=2))
        expected = np.zeros((1, 3))
        expected[0, 0] = 1.0
        assert np.linalg.norm(dpd.coeffs - expected) < 1e-8

    def test_mild_cubic(self):
        spec = PaSynthSpec()
        pa = MpCoeffs(np.array([[1.0], [-0.01 / spec.reference_amplitude() ** 2]]))
        drive = ofdm_frames(2, 1, seed=2)[:, :, 0]
        dpd = ila_fit(pa, drive, TdDpdSpec(order=5, memory=0, iterations=2))
        test = ofdm_frames(1, 1, seed=3)[0, :, 0]
        assert tx_nmse(mp_apply(pa, mp_apply(dpd, test)), test) < -40.0

    @pytest.mark.parametrize("gain", [1.0, 100.0, 3.0 - 4.0j])
    def test_linear_pa_converges_at_default_iterations(self, gain):
        drive = ofdm_frames(1, 1, seed=4, n_fft=512)[0, :, 0]
        dpd = ila_fit(MpCoeffs.identity(gain=gain), drive, TdDpdSpec(order=1, memory=0))
        assert abs(dpd.coeffs[0, 0] - 1.0) < 1e-8

    @pytest.mark.parametrize("order,memory", [(7, 4), (9, 5)])
    def test_dpd_at_least_as_rich_as_pa(self, order, memory):
        pa = synth_pa_array(1, PaSynthSpec(), rng_stream(42, stream_id("pa")))
        branch = pa.coeffs_for(0, 1)
        dpd = ila_fit(branch, ofdm_frames(2, 1, seed=20)[:, :, 0], TdDpdSpec(order=order, memory=memory), gain=pa.gain)
        test = ofdm_frames(1, 1, seed=21)[0, :, 0]
        assert tx_nmse(mp_apply(branch, mp_apply(dpd, test)), pa.gain * test) < -35.0

    def test_two_rises_in_a_row_diverge(self, monkeypatch):
        values = iter([-30.0, -25.0, -20.0])
        monkeypatch.setattr(td_dpd, "_cascade_nmse", lambda *args: next(values))
        drive = ofdm_frames(1, 1, seed=4, n_fft=512)[0, :, 0]
        with pytest.raises(TrainingDivergenceError, match="rose twice"):
            ila_fit(MpCoeffs.identity(gain=2.0), drive, TdDpdSpec(order=3, memory=1, iterations=3))

    def test_single_rise_keeps_best_iterate(self, monkeypatch):
        drive = ofdm_frames(1, 1, seed=4, n_fft=512)[0, :, 0]
        pa = MpCoeffs(np.array([[2.0, 0.1], [-0.5, 0.0]]))
        monkeypatch.setattr(td_dpd, "_cascade_nmse", lambda *args: -30.0)
        first = ila_fit(pa, drive, TdDpdSpec(order=3, memory=1, iterations=1))
        values = iter([-30.0, -25.0])
        monkeypatch.setattr(td_dpd, "_cascade_nmse", lambda *args: next(values))
        kept = ila_fit(pa, drive, TdDpdSpec(order=3, memory=1, iterations=2))
        assert np.array_equal(kept.coeffs, first.coeffs)

    def test_rises_within_tolerance_are_ignored(self, monkeypatch):
        values = iter([-30.0, -29.995, -29.99])
        monkeypatch.setattr(td_dpd, "_cascade_nmse", lambda *args: next(values))
        drive = ofdm_frames(1, 1, seed=4, n_fft=512)[0, :, 0]
        ila_fit(MpCoeffs.identity(gain=2.0), drive, TdDpdSpec(order=3, memory=1, iterations=3))

    def test_zero_iterations(self):
        with pytest.raises(ValueError):
            ila_fit(MpCoeffs.identity(), np.ones(64, dtype=complex), TdDpdSpec(iterations=0))

    def test_zero_drive(self):
        with pytest.raises(ValueError):
            ila_fit(MpCoeffs.identity(), np.zeros(64, dtype=complex), TdDpdSpec(order=1, memory=0))


class TestArrayFit:
    def test_improves_cascade_by_15_db(self):
        """Synthetic desk-scale PA, every branch linearized on held-out frames"""
        pa = synth_pa_array(4, PaSynthSpec(), rng_stream(42, stream_id("pa")))
        drives = {1: ofdm_frames(2, 4, seed=10)}
        model = fit_td_dpd(pa, drives, TdDpdSpec(), threads=2)
        test = ofdm_frames(2, 4, seed=11)
        for b in range(4):
            ideal = np.concatenate([pa.gain * f[:, b] for f in test])
            raw = np.concatenate([mp_apply(pa.coeffs_for(b, 1), f[:, b]) for f in test])
            lin = np.concatenate([pa.apply(td_dpd_apply(model, f, 1), 1)[:, b] for f in test])
            assert tx_nmse(lin, ideal) <= tx_nmse(raw, ideal) - 15.0

    def test_thread_count_does_not_change_fit(self):
        pa = synth_pa_array(2, PaSynthSpec(), rng_stream(1, stream_id("pa")))
        drives = {1: ofdm_frames(1, 2, seed=5, n_fft=512), 2: ofdm_frames(1, 2, seed=6, n_fft=512, dbm=-24.0)}
        a = fit_td_dpd(pa, drives, TdDpdSpec(order=5, memory=2), threads=1)
        b = fit_td_dpd(pa, drives, TdDpdSpec(order=5, memory=2), threads=4)
        assert a.to_dict() == b.to_dict()

    def test_schedule_per_state(self):
        pa = synth_pa_array(2, PaSynthSpec(), rng_stream(1, stream_id("pa")))
        drives = {1: ofdm_frames(1, 2, seed=5, n_fft=512), 2: ofdm_frames(1, 2, seed=6, n_fft=512, dbm=-24.0)}
        model = fit_td_dpd(pa, drives, TdDpdSpec(), schedule={1: (7, 4), 2: (5, 3)})
        assert (model.coeffs_for(0, 1).order, model.coeffs_for(0, 1).memory) == (7, 4)
        assert (model.coeffs_for(1, 2).order, model.coeffs_for(1, 2).memory) == (5, 3)
        with pytest.raises(StateError):
            td_dpd_apply(model, np.zeros((16, 2), dtype=complex), 3)


class TestApply:
    def identity_model(self, branches):
        return MpArrayModel(branches=[{SHARED: MpCoeffs.identity()} for _ in range(branches)], kind="td-dpd")

    def test_identity(self, rng):
        frame = rng.complex_normal((32, 3))
        assert np.array_equal(td_dpd_apply(self.identity_model(3), frame, 1), frame)

    def test_zero_input(self):
        out = td_dpd_apply(self.identity_model(2), np.zeros((8, 2), dtype=complex), 1)
        assert np.all(out == 0)

    def test_branch_loop(self, rng):
        model = MpArrayModel(branches=[{SHARED: MpCoeffs(rng.complex_normal((2, 2)))} for _ in range(3)])
        frame = rng.complex_normal((32, 3))
        out = td_dpd_apply(model, frame, 1)
        for b in range(3):
            assert np.array_equal(out[:, b], mp_apply(model.coeffs_for(b, 1), frame[:, b]))
