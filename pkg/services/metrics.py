"""
Metrics Module
EVM of the received user symbols, TX-NMSE of the transmitter output and
Welch power spectral densities (signal and error signal)
"""

from dataclasses import dataclass
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel
from scipy import signal

from services.errors import DimensionError
from services.numerics import db10, is_power_of_two
from services.waveform import FdSymbolMatrix

DB_FLOOR = -300.0

Equalization = Literal["known-alpha", "ls-scalar"]


class EvmReport(BaseModel):
    per_user_pct: List[float]
    aggregate_pct: float
    state_id: Optional[int] = None
    label: str = ""


def evm(
    received: np.ndarray,
    reference,
    mask: Optional[np.ndarray] = None,
    equalize: Equalization = "known-alpha",
    gain: complex = 1.0,
    state_id: Optional[int] = None,
    label: str = "",
) -> EvmReport:
    """
    EVM per user over the data bins, relative to the reference power.
    known-alpha divides by the known end-to-end gain; ls-scalar fits one
    complex gain per user first.
    """
    if isinstance(reference, FdSymbolMatrix):
        mask = reference.mask if mask is None else mask
        reference = reference.entries
    received = np.asarray(received, dtype=np.complex128)
    reference = np.asarray(reference, dtype=np.complex128)
    if received.shape != reference.shape:
        raise DimensionError(f"received {received.shape} and reference {reference.shape} differ")
    if mask is None:
        mask = np.arange(reference.shape[0])

    y = received[mask]
    s = reference[mask]
    ref_power = np.sum(np.abs(s) ** 2, axis=0)
    if np.any(ref_power == 0):
        raise ValueError("EVM needs nonzero reference power for every user")

    if equalize == "known-alpha":
        if gain == 0:
            raise ValueError("known-alpha equalization needs a nonzero gain")
        y_hat = y / gain
    elif equalize == "ls-scalar":
        g = np.sum(np.conj(s) * y, axis=0) / ref_power
        safe = np.where(g == 0, 1.0, g)
        y_hat = np.where(g == 0, 0.0, y / safe)
    else:
        raise ValueError(f"Unknown equalization: {equalize}")

    per_user = 100.0 * np.sqrt(np.sum(np.abs(y_hat - s) ** 2, axis=0) / ref_power)
    aggregate = float(np.sqrt(np.mean(per_user**2)))
    return EvmReport(per_user_pct=[float(v) for v in per_user], aggregate_pct=aggregate, state_id=state_id, label=label)


def tx_nmse(actual: np.ndarray, ideal: np.ndarray) -> float:
    """10 log10(sum |actual - ideal|^2 / sum |ideal|^2), floored at -300 dB"""
    actual = np.asarray(actual)
    ideal = np.asarray(ideal)
    if actual.shape != ideal.shape:
        raise DimensionError(f"actual {actual.shape} and ideal {ideal.shape} differ")
    ref = float(np.sum(np.abs(ideal) ** 2))
    if ref == 0:
        raise ValueError("TX-NMSE needs a nonzero ideal signal")
    return db10(float(np.sum(np.abs(actual - ideal) ** 2)) / ref, DB_FLOOR)


@dataclass
class PsdEstimate:
    """Two-sided density, frequencies ascending from -fs/2"""

    freqs_hz: np.ndarray
    density: np.ndarray  # W/Hz, 1 ohm
    segment: int
    window: str
    overlap: float

    @property
    def density_dbm_hz(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = 10.0 * np.log10(self.density) + 30.0
        return np.maximum(out, DB_FLOOR)

    @property
    def bin_hz(self) -> float:
        return float(self.freqs_hz[1] - self.freqs_hz[0])

    def total_power(self) -> float:
        return float(np.sum(self.density) * self.bin_hz)


def welch_psd(
    stream: np.ndarray,
    fs_hz: float,
    segment: int = 2048,
    overlap: float = 0.5,
    window: str = "hann",
) -> PsdEstimate:
    stream = np.asarray(stream, dtype=np.complex128).ravel()
    if not is_power_of_two(segment):
        raise DimensionError(f"Welch segment must be a power of two, got {segment}")
    if stream.size < segment:
        raise DimensionError(f"stream of {stream.size} samples is shorter than the {segment}-sample segment")
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")

    freqs, pxx = signal.welch(
        stream,
        fs=fs_hz,
        window=window,
        nperseg=segment,
        noverlap=int(segment * overlap),
        detrend=False,
        return_onesided=False,
        scaling="density",
    )
    return PsdEstimate(
        freqs_hz=np.fft.fftshift(freqs),
        density=np.fft.fftshift(pxx),
        segment=segment,
        window=window,
        overlap=overlap,
    )


def error_psd(
    actual: np.ndarray,
    ideal: np.ndarray,
    fs_hz: float,
    segment: int = 2048,
    overlap: float = 0.5,
    window: str = "hann",
) -> PsdEstimate:
    """PSD of the per-branch error signals, power-summed over branches"""
    actual = np.asarray(actual)
    ideal = np.asarray(ideal)
    if actual.shape != ideal.shape:
        raise DimensionError(f"actual {actual.shape} and ideal {ideal.shape} differ")
    return branch_sum_psd(actual - ideal, fs_hz, segment, overlap, window)


def branch_sum_psd(
    frames: np.ndarray,
    fs_hz: float,
    segment: int = 2048,
    overlap: float = 0.5,
    window: str = "hann",
) -> PsdEstimate:
    frames = np.asarray(frames)
    if frames.ndim == 1:
        frames = frames[:, None]
    total = None
    for b in range(frames.shape[1]):
        est = welch_psd(frames[:, b], fs_hz, segment, overlap, window)
        total = est if total is None else PsdEstimate(
            est.freqs_hz, total.density + est.density, segment, window, overlap
        )
    return total
