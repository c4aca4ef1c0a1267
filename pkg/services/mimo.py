"""
MIMO Module
LOS channel, zero-forcing precoding, precoder pseudo-inverse,
per-branch power normalization and the noisy user receivers
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field

from services.errors import DimensionError, RankDeficientError
from services.numerics import StreamDraws, condition_number, left_inverse
from services.waveform import FdSymbolMatrix, dbm_to_watts

MAX_CONDITION = 1e12


class UserGeometry(BaseModel):
    distance_m: float = Field(gt=0)
    angle_deg: float


class NoiseConfig(BaseModel):
    psd_dbm_hz: float = -174.0
    noise_figure_db: float = 7.0
    bandwidth_hz: float = Field(default=200e6, gt=0)
    enabled: bool = True


@dataclass
class ChannelModel:
    H: np.ndarray  # U x B, identical on every subcarrier
    geometry: List[UserGeometry]
    carrier_ghz: float
    median_gain_db_at_1m: float
    pathloss_exponent: float

    @property
    def users(self) -> int:
        return self.H.shape[0]

    @property
    def antennas(self) -> int:
        return self.H.shape[1]

    def to_dict(self) -> dict:
        return {
            "H": [[[float(v.real), float(v.imag)] for v in row] for row in self.H],
            "geometry": [g.model_dump() for g in self.geometry],
            "carrier_ghz": self.carrier_ghz,
            "median_gain_db_at_1m": self.median_gain_db_at_1m,
            "pathloss_exponent": self.pathloss_exponent,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelModel":
        H = np.array([[complex(re, im) for re, im in row] for row in data["H"]])
        return cls(
            H=H,
            geometry=[UserGeometry(**g) for g in data["geometry"]],
            carrier_ghz=data["carrier_ghz"],
            median_gain_db_at_1m=data["median_gain_db_at_1m"],
            pathloss_exponent=data["pathloss_exponent"],
        )


@dataclass
class Precoder:
    W: np.ndarray  # B x U
    alpha: float = 1.0

    @property
    def effective(self) -> np.ndarray:
        return self.alpha * self.W


def pathloss_gain(distance_m: float, median_gain_db_at_1m: float, exponent: float) -> float:
    return float(10.0 ** ((median_gain_db_at_1m - 10.0 * exponent * np.log10(distance_m)) / 10.0))


def steering_vector(angle_deg: float, antennas: int) -> np.ndarray:
    """Half-wavelength ULA response"""
    b = np.arange(antennas)
    return np.exp(-1j * np.pi * b * np.sin(np.deg2rad(angle_deg)))


def los_channel(
    geometry: List[UserGeometry],
    carrier_ghz: float,
    median_gain_db_at_1m: float,
    pathloss_exponent: float,
    antennas: int,
    rng: StreamDraws,
) -> ChannelModel:
    users = len(geometry)
    if users < 1 or antennas < users:
        raise DimensionError(f"Need B >= U >= 1, got U={users}, B={antennas}")

    phases = rng.uniform(0.0, 2 * np.pi, users)
    H = np.zeros((users, antennas), dtype=np.complex128)
    for u, g in enumerate(geometry):
        gain = pathloss_gain(g.distance_m, median_gain_db_at_1m, pathloss_exponent)
        H[u] = np.sqrt(gain) * np.exp(1j * phases[u]) * steering_vector(g.angle_deg, antennas)

    cond = condition_number(H @ H.conj().T)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        angles = [g.angle_deg for g in geometry]
        raise RankDeficientError(f"User angles {angles} give a rank-deficient channel (cond {cond:.3e})")

    return ChannelModel(
        H=H,
        geometry=list(geometry),
        carrier_ghz=carrier_ghz,
        median_gain_db_at_1m=median_gain_db_at_1m,
        pathloss_exponent=pathloss_exponent,
    )


def zf_precoder(H: np.ndarray) -> Precoder:
    """W = H^H (H H^H)^-1, alpha left at 1"""
    gram = H @ H.conj().T
    cond = condition_number(gram)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise RankDeficientError(f"H H^H is ill-conditioned (cond {cond:.3e})")
    W = H.conj().T @ np.linalg.inv(gram)
    return Precoder(W=W, alpha=1.0)


def apply_precoding(S, precoder: Precoder) -> np.ndarray:
    """x[k] = alpha * W s[k] on every subcarrier; returns N x B"""
    entries = S.entries if isinstance(S, FdSymbolMatrix) else np.asarray(S)
    if entries.shape[1] != precoder.W.shape[1]:
        raise DimensionError(f"Symbols have {entries.shape[1]} users, precoder serves {precoder.W.shape[1]}")
    return entries @ precoder.effective.T


def branch_power(frame: np.ndarray) -> float:
    """Mean per-branch power (1-ohm watts)"""
    return float(np.mean(np.abs(frame) ** 2))


def normalize_power(frame: np.ndarray, target_dbm: float) -> Tuple[np.ndarray, float]:
    power = branch_power(frame)
    if power == 0:
        raise ValueError("Cannot normalize an all-zero frame")
    alpha = float(np.sqrt(dbm_to_watts(target_dbm) / power))
    return frame * alpha, alpha


def precoder_pinv(precoder: Precoder) -> np.ndarray:
    """Left inverse of alpha*W, U x B"""
    pinv, _ = left_inverse(precoder.effective, max_cond=MAX_CONDITION)
    return pinv


def bin_noise_variance(noise: NoiseConfig, n_fft: int) -> float:
    """
    Per-bin noise variance in unnormalized-DFT units.
    Bin power in watts is |X[k]|^2 / N^2, so the watts figure is scaled by N^2.
    """
    watts_per_hz = 10.0 ** ((noise.psd_dbm_hz - 30.0) / 10.0) * 10.0 ** (noise.noise_figure_db / 10.0)
    return float(watts_per_hz * noise.bandwidth_hz / n_fft * n_fft**2)


def receive(
    X_out: np.ndarray,
    channel: ChannelModel,
    noise: NoiseConfig,
    mask: np.ndarray,
    rng: StreamDraws,
) -> np.ndarray:
    """y[k] = H x_out[k] + n[k] on the data subcarriers, zero elsewhere (N x U)"""
    n_fft, antennas = X_out.shape
    if antennas != channel.antennas:
        raise DimensionError(f"TX frame has {antennas} branches, channel expects {channel.antennas}")

    Y = np.zeros((n_fft, channel.users), dtype=np.complex128)
    Y[mask] = X_out[mask] @ channel.H.T
    if noise.enabled:
        sigma2 = bin_noise_variance(noise, n_fft)
        Y[mask] += np.sqrt(sigma2) * rng.complex_normal((mask.size, channel.users))
    return Y
