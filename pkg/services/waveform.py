"""
Waveform Module
OFDM symbols on masked subcarriers, FD <-> TD conversion and the
signal-state conditioning vector
"""

from dataclasses import dataclass
from typing import List

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from services.errors import DimensionError, StateError
from services.numerics import StreamDraws, dft


class SignalState(BaseModel):
    id: int = Field(ge=0)
    bandwidth_mhz: float = Field(gt=0)
    rms_power_dbm: float

    @property
    def power_mw(self) -> float:
        return dbm_to_mw(self.rms_power_dbm)

    @property
    def label(self) -> str:
        return f"state {self.id} ({self.bandwidth_mhz:g} MHz, {self.rms_power_dbm:g} dBm)"


class StateGrid(BaseModel):
    states: List[SignalState]
    training_ids: List[int]
    bw_max_mhz: float = 0.0
    p_max_mw: float = 0.0

    @model_validator(mode="after")
    def check_grid(self):
        if not self.states:
            raise ValueError("state grid is empty")
        ids = [s.id for s in self.states]
        if len(set(ids)) != len(ids):
            raise ValueError(f"state ids must be unique, got {ids}")
        if not self.training_ids:
            raise ValueError("training_ids must not be empty")
        unknown = sorted(set(self.training_ids) - set(ids))
        if unknown:
            raise ValueError(f"training ids {unknown} are not in the state grid {ids}")

        bw_max = max(s.bandwidth_mhz for s in self.states)
        p_max = max(s.power_mw for s in self.states)
        # maxima always follow the grid; explicit values must agree
        if self.bw_max_mhz and not np.isclose(self.bw_max_mhz, bw_max):
            raise ValueError(f"bw_max_mhz={self.bw_max_mhz} but grid maximum is {bw_max}")
        if self.p_max_mw and not np.isclose(self.p_max_mw, p_max):
            raise ValueError(f"p_max_mw={self.p_max_mw} but grid maximum is {p_max}")
        self.bw_max_mhz = bw_max
        self.p_max_mw = p_max
        return self

    def get(self, state_id: int) -> SignalState:
        for state in self.states:
            if state.id == state_id:
                return state
        raise StateError(f"Unknown state id {state_id}")

    @property
    def training_states(self) -> List[SignalState]:
        return [self.get(i) for i in self.training_ids]

    @property
    def held_out_states(self) -> List[SignalState]:
        return [s for s in self.states if s.id not in self.training_ids]


@dataclass
class FdSymbolMatrix:
    """N x U frequency-domain symbols, zero off the data mask"""

    entries: np.ndarray
    mask: np.ndarray

    @property
    def n_fft(self) -> int:
        return self.entries.shape[0]

    @property
    def users(self) -> int:
        return self.entries.shape[1]


def dbm_to_mw(dbm: float) -> float:
    return float(10.0 ** (dbm / 10.0))


def dbm_to_watts(dbm: float) -> float:
    return float(10.0 ** ((dbm - 30.0) / 10.0))


def make_state_vector(state: SignalState, grid: StateGrid) -> np.ndarray:
    """c = [BW / BW_max, P_mW / P_max_mW]"""
    if state.bandwidth_mhz > grid.bw_max_mhz * (1 + 1e-12) or state.power_mw > grid.p_max_mw * (1 + 1e-12):
        raise StateError(f"{state.label} lies outside the grid maxima")
    return np.array([state.bandwidth_mhz / grid.bw_max_mhz, state.power_mw / grid.p_max_mw])


def data_subcarrier_count(n_fft: int, fs_mhz: float, bandwidth_mhz: float) -> int:
    # nearest even count so the band splits evenly around DC
    return int(2 * round(n_fft * bandwidth_mhz / fs_mhz / 2))


def build_subcarrier_mask(n_fft: int, fs_mhz: float, bandwidth_mhz: float) -> np.ndarray:
    """
    Data subcarriers centred on DC with DC excluded, in FFT bin order:
    bins 1..Nd/2 and N-Nd/2..N-1.
    """
    n_data = data_subcarrier_count(n_fft, fs_mhz, bandwidth_mhz)
    if n_data >= n_fft:
        raise DimensionError(
            f"{bandwidth_mhz} MHz at fs={fs_mhz} MHz needs {n_data} subcarriers, only {n_fft} available"
        )
    if n_data <= 0:
        raise DimensionError(f"{bandwidth_mhz} MHz is narrower than one subcarrier")
    half = n_data // 2
    positive = np.arange(1, half + 1)
    negative = np.arange(n_fft - half, n_fft)
    return np.concatenate([positive, negative])


def qam_constellation(order: int) -> np.ndarray:
    """Square QAM, unit average power"""
    if order not in (4, 16, 64):
        raise ValueError(f"qam_order must be 4, 16 or 64, got {order}")
    side = int(np.sqrt(order))
    levels = np.arange(-(side - 1), side, 2, dtype=float)
    points = (levels[:, None] + 1j * levels[None, :]).ravel()
    return points / np.sqrt(2.0 * (order - 1) / 3.0)


def gen_fd_symbols(users: int, mask: np.ndarray, qam_order: int, rng: StreamDraws, n_fft: int) -> FdSymbolMatrix:
    constellation = qam_constellation(qam_order)
    entries = np.zeros((n_fft, users), dtype=np.complex128)
    picks = rng.integers(0, qam_order, size=(mask.size, users))
    entries[mask, :] = constellation[picks]
    return FdSymbolMatrix(entries=entries, mask=mask)


def fd_to_td(m) -> np.ndarray:
    entries = m.entries if isinstance(m, FdSymbolMatrix) else np.asarray(m)
    if entries.ndim != 2 or entries.shape[1] < 1:
        raise DimensionError(f"FD matrix must be N x C with C >= 1, got {entries.shape}")
    return dft(entries, "inverse")


def td_to_fd(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 2 or frame.shape[1] < 1:
        raise DimensionError(f"TD frame must be N x C with C >= 1, got {frame.shape}")
    return dft(frame, "forward")
