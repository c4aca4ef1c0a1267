"""Tests for OFDM symbol generation, subcarrier masks and state vectors."""

import numpy as np
import pytest
from pydantic import ValidationError

from services.errors import DimensionError, StateError
from services.numerics import rng_stream
from services.waveform import (
    SignalState,
    StateGrid,
    build_subcarrier_mask,
    data_subcarrier_count,
    fd_to_td,
    gen_fd_symbols,
    make_state_vector,
    qam_constellation,
    td_to_fd,
)


def default_grid():
    rows = [(1, 50, -20), (2, 10, -20), (3, 30, -22), (4, 50, -24), (5, 10, -24), (6, 20, -22),
            (7, 40, -22), (8, 20, -20), (9, 30, -24), (10, 40, -20), (11, 20, -24)]
    states = [SignalState(id=i, bandwidth_mhz=bw, rms_power_dbm=p) for i, bw, p in rows]
    return StateGrid(states=states, training_ids=[1, 2, 3, 4, 5, 6])


class TestStateGrid:
    def test_maxima_follow_grid(self):
        grid = default_grid()
        assert grid.bw_max_mhz == 50.0
        assert grid.p_max_mw == pytest.approx(0.01)

    def test_state_vector_of_corner_state(self):
        grid = default_grid()
        assert np.allclose(make_state_vector(grid.get(1), grid), [1.0, 1.0])

    def test_state_vector_of_low_state(self):
        grid = default_grid()
        c = make_state_vector(grid.get(5), grid)
        assert c[0] == pytest.approx(0.2)
        assert c[1] == pytest.approx(10 ** (-0.4))

    def test_training_and_held_out(self):
        grid = default_grid()
        assert [s.id for s in grid.training_states] == [1, 2, 3, 4, 5, 6]
        assert [s.id for s in grid.held_out_states] == [7, 8, 9, 10, 11]

    def test_unknown_training_id(self):
        states = [SignalState(id=1, bandwidth_mhz=10, rms_power_dbm=-20)]
        with pytest.raises(ValidationError, match="not in the state grid"):
            StateGrid(states=states, training_ids=[2])

    def test_duplicate_ids(self):
        s = SignalState(id=1, bandwidth_mhz=10, rms_power_dbm=-20)
        with pytest.raises(ValidationError, match="unique"):
            StateGrid(states=[s, s], training_ids=[1])

    def test_get_unknown(self):
        with pytest.raises(StateError):
            default_grid().get(99)

    def test_state_outside_grid(self):
        grid = default_grid()
        outside = SignalState(id=20, bandwidth_mhz=60, rms_power_dbm=-20)
        with pytest.raises(StateError):
            make_state_vector(outside, grid)


class TestMask:
    def test_even_count_without_dc(self):
        mask = build_subcarrier_mask(2048, 200.0, 50.0)
        assert mask.size == 512
        assert 0 not in mask
        assert np.all((mask >= 1) & (mask < 2048))
        assert np.unique(mask).size == mask.size

    def test_symmetric_about_dc(self):
        mask = build_subcarrier_mask(256, 200.0, 20.0)
        half = mask.size // 2
        assert np.array_equal(mask[:half], np.arange(1, half + 1))
        assert np.array_equal(mask[half:], 256 - np.arange(half, 0, -1))

    def test_rounding_to_even(self):
        assert data_subcarrier_count(256, 200.0, 20.0) == 26

    def test_too_wide(self):
        with pytest.raises(DimensionError):
            build_subcarrier_mask(64, 200.0, 250.0)


class TestSymbols:
    def test_constellation_unit_power(self):
        for order in (4, 16, 64):
            pts = qam_constellation(order)
            assert pts.size == order
            assert np.mean(np.abs(pts) ** 2) == pytest.approx(1.0)

    def test_bad_order(self):
        with pytest.raises(ValueError):
            qam_constellation(8)

    def test_zero_off_mask(self):
        mask = build_subcarrier_mask(256, 200.0, 30.0)
        S = gen_fd_symbols(2, mask, 16, rng_stream(1, 1), 256)
        off = np.setdiff1d(np.arange(256), mask)
        assert S.entries.shape == (256, 2)
        assert np.all(S.entries[off] == 0)
        assert np.all(np.abs(S.entries[mask]) > 0)

    def test_symbols_on_constellation(self):
        mask = build_subcarrier_mask(256, 200.0, 30.0)
        S = gen_fd_symbols(1, mask, 16, rng_stream(1, 2), 256)
        pts = qam_constellation(16)
        dist = np.min(np.abs(S.entries[mask, 0][:, None] - pts[None, :]), axis=1)
        assert np.all(dist < 1e-12)

    def test_deterministic(self):
        mask = build_subcarrier_mask(256, 200.0, 30.0)
        a = gen_fd_symbols(1, mask, 16, rng_stream(5, 2), 256)
        b = gen_fd_symbols(1, mask, 16, rng_stream(5, 2), 256)
        assert np.array_equal(a.entries, b.entries)


class TestConversion:
    def test_fd_td_roundtrip(self):
        mask = build_subcarrier_mask(512, 200.0, 40.0)
        S = gen_fd_symbols(3, mask, 64, rng_stream(9, 9), 512)
        assert np.max(np.abs(td_to_fd(fd_to_td(S)) - S.entries)) < 1e-12

    def test_rejects_vector(self):
        with pytest.raises(DimensionError):
            td_to_fd(np.ones(8))
