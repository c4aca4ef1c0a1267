"""
PA Module
Memory-polynomial PA array: per-branch coefficients, synthesis of a
seeded ground truth and streaming application over frames
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import brentq

from services.errors import DimensionError, StateError
from services.numerics import StreamDraws
from services.waveform import dbm_to_watts

SHARED = None  # state key of a coefficient set used by every state


@dataclass
class MpCoeffs:
    """
    a[k, m] for odd orders k = 1, 3, ..., K (row index (k-1)//2)
    and delays m = 0..M (column index)
    """

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=np.complex128))
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("MP coefficients must be finite")

    @property
    def order(self) -> int:
        return 2 * self.coeffs.shape[0] - 1

    @property
    def memory(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def small_signal_gain(self) -> complex:
        return complex(self.coeffs[0, 0])

    @classmethod
    def identity(cls, order: int = 1, memory: int = 0, gain: complex = 1.0) -> "MpCoeffs":
        c = np.zeros(((order + 1) // 2, memory + 1), dtype=np.complex128)
        c[0, 0] = gain
        return cls(c)

    def static_gain(self, amplitude: float) -> complex:
        """Gain seen by a constant-envelope input of the given amplitude"""
        ks = np.arange(1, self.order + 1, 2)
        return complex(np.sum(self.coeffs.sum(axis=1) * amplitude ** (ks - 1)))

    def dominance_margin(self, x_ref: float) -> float:
        ks = np.arange(1, self.order + 1, 2)
        weights = np.abs(self.coeffs) * (x_ref ** (ks - 1))[:, None]
        others = weights.sum() - weights[0, 0]
        return float(abs(self.coeffs[0, 0]) - others)


def mp_apply(c: MpCoeffs, x: np.ndarray) -> np.ndarray:
    """y[n] = sum_k sum_m a[k,m] x[n-m] |x[n-m]|^(k-1), zero initial history"""
    x = np.asarray(x, dtype=np.complex128)
    if x.size == 0:
        raise DimensionError("mp_apply needs a non-empty stream")
    length = x.size
    mag = np.abs(x)
    y = np.zeros(length, dtype=np.complex128)
    for row, k in enumerate(range(1, c.order + 1, 2)):
        basis = x * mag ** (k - 1) if k > 1 else x
        for m in range(c.memory + 1):
            if m >= length:
                break
            y[m:] += c.coeffs[row, m] * basis[: length - m]
    return y


@dataclass
class MpArrayModel:
    """
    One MP coefficient set per branch, either shared by all states
    (key None) or keyed by state id. `gain` is the array's linear target.
    """

    branches: List[Dict[Optional[int], MpCoeffs]]
    gain: complex = 1.0
    kind: str = "pa"

    @property
    def antennas(self) -> int:
        return len(self.branches)

    def coeffs_for(self, branch: int, state_id: int) -> MpCoeffs:
        table = self.branches[branch]
        if state_id in table:
            return table[state_id]
        if SHARED in table:
            return table[SHARED]
        raise StateError(f"Branch {branch} of the {self.kind} model has no coefficients for state {state_id}")

    def check_states(self, state_ids: List[int]) -> None:
        for b in range(self.antennas):
            for sid in state_ids:
                self.coeffs_for(b, sid)

    def apply(self, frame: np.ndarray, state_id: int) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.complex128)
        if frame.ndim != 2 or frame.shape[1] != self.antennas:
            raise DimensionError(f"Frame shape {frame.shape} does not match {self.antennas} branches")
        out = np.empty_like(frame)
        for b in range(self.antennas):
            out[:, b] = mp_apply(self.coeffs_for(b, state_id), frame[:, b])
        return out

    def to_dict(self) -> dict:
        branches = []
        for table in self.branches:
            states = []
            for sid, c in table.items():
                states.append({
                    "state_id": sid,
                    "memory": c.memory,
                    "order": c.order,
                    "coeffs": [[float(v.real), float(v.imag)] for v in c.coeffs.ravel()],
                })
            branches.append({"states": states})
        return {
            "kind": self.kind,
            "branches": branches,
            "gain": [float(complex(self.gain).real), float(complex(self.gain).imag)],
        }

    @classmethod
    def from_dict(cls, data: dict, kind: Optional[str] = None) -> "MpArrayModel":
        try:
            branches = []
            for b, entry in enumerate(data["branches"]):
                table: Dict[Optional[int], MpCoeffs] = {}
                for st in entry["states"]:
                    order, memory = int(st["order"]), int(st["memory"])
                    if order < 1 or order % 2 == 0 or memory < 0:
                        raise ValueError(f"branch {b}: order must be odd >= 1 and memory >= 0")
                    flat = np.array([complex(re, im) for re, im in st["coeffs"]])
                    expected = ((order + 1) // 2) * (memory + 1)
                    if flat.size != expected:
                        raise ValueError(f"branch {b}: expected {expected} coefficients, got {flat.size}")
                    sid = st.get("state_id")
                    table[None if sid is None else int(sid)] = MpCoeffs(flat.reshape((order + 1) // 2, memory + 1))
                if not table:
                    raise ValueError(f"branch {b} has no coefficient sets")
                branches.append(table)
            re, im = data.get("gain", [1.0, 0.0])
        except (KeyError, TypeError) as e:
            raise ValueError(f"Malformed MP coefficient document: {e}")
        return cls(branches=branches, gain=complex(re, im), kind=kind or data.get("kind", "pa"))

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: Path, kind: Optional[str] = None) -> "MpArrayModel":
        return cls.from_dict(json.loads(Path(path).read_text()), kind=kind)


PaArrayModel = MpArrayModel


class PaSynthSpec(BaseModel):
    order: int = 7
    memory: int = 4
    small_signal_gain_db: float = 40.0
    compression_db: float = Field(default=1.0, gt=0)
    reference_power_dbm: float = -20.0
    reference_drive_db_above_rms: float = 6.0
    perturbation: float = Field(default=0.05, ge=0)
    linear_memory: float = 0.08
    nonlinear_memory: float = 0.3
    memory_decay: float = 0.5
    per_state_schedule: bool = False
    memory_by_bandwidth: Dict[str, int] = Field(
        default_factory=lambda: {"10": 3, "20": 4, "30": 5, "40": 6, "50": 7}
    )
    order_by_power: Dict[str, int] = Field(default_factory=lambda: {"-20": 7, "-22": 7, "-24": 5})

    def reference_amplitude(self) -> float:
        rms = np.sqrt(dbm_to_watts(self.reference_power_dbm))
        return float(rms * 10.0 ** (self.reference_drive_db_above_rms / 20.0))

    def schedule_for(self, bandwidth_mhz: float, rms_power_dbm: float):
        def nearest(table: Dict[str, int], value: float) -> int:
            key = min(table, key=lambda k: abs(float(k) - value))
            return table[key]

        return nearest(self.order_by_power, rms_power_dbm), nearest(self.memory_by_bandwidth, bandwidth_mhz)


# AM/AM shape of the odd orders at the reference drive, relative to a[1,0]
BASE_ORDER_SHAPE = {3: -0.12 + 0.04j, 5: 0.02 - 0.006j, 7: -0.003 + 0.001j, 9: 0.0004}


def base_coefficients(spec: PaSynthSpec, order: int, memory: int) -> MpCoeffs:
    """Geometric decay in k and m, then the nonlinear part is scaled so the
    static compression at the reference drive equals spec.compression_db"""
    if order < 1 or order % 2 == 0:
        raise ValueError(f"PA order must be odd >= 1, got {order}")
    g = 10.0 ** (spec.small_signal_gain_db / 20.0)
    x_ref = spec.reference_amplitude()
    n_orders = (order + 1) // 2
    c = np.zeros((n_orders, memory + 1), dtype=np.complex128)

    c[0, 0] = g
    for m in range(1, memory + 1):
        c[0, m] = g * spec.linear_memory * spec.memory_decay ** (m - 1) * np.exp(0.6j * m)

    for row in range(1, n_orders):
        k = 2 * row + 1
        shape = BASE_ORDER_SHAPE.get(k, BASE_ORDER_SHAPE[9] * 0.1 ** ((k - 9) // 2))
        a_k0 = g * shape / x_ref ** (k - 1)
        c[row, 0] = a_k0
        for m in range(1, memory + 1):
            c[row, m] = a_k0 * spec.nonlinear_memory * spec.memory_decay ** m

    if n_orders == 1:
        return MpCoeffs(c)

    linear = MpCoeffs(c[:1])
    target = 10.0 ** (-spec.compression_db / 20.0)

    def residual(scale: float) -> float:
        scaled = c.copy()
        scaled[1:] *= scale
        model = MpCoeffs(scaled)
        return abs(model.static_gain(x_ref)) / abs(linear.static_gain(x_ref)) - target

    if residual(4.0) > 0:
        raise ValueError(f"Cannot reach {spec.compression_db} dB compression with order {order}")
    scale = brentq(residual, 0.0, 4.0, xtol=1e-14)
    c[1:] *= scale
    return MpCoeffs(c)


def perturb(c: MpCoeffs, level: float, rng: StreamDraws) -> MpCoeffs:
    """Independent Gaussian factors on every coefficient except a[1,0]"""
    factors = 1.0 + level * rng.complex_normal(c.coeffs.shape)
    factors[0, 0] = 1.0
    return MpCoeffs(c.coeffs * factors)


def synth_pa_array(antennas: int, spec: PaSynthSpec, rng: StreamDraws, states=None) -> MpArrayModel:
    if spec.perturbation >= 1.0:
        raise ValueError(f"perturbation must be below 100%, got {spec.perturbation:.0%}")

    if spec.per_state_schedule:
        if not states:
            raise ValueError("per_state_schedule needs the state list")
        keyed = {}
        for state in states:
            order, memory = spec.schedule_for(state.bandwidth_mhz, state.rms_power_dbm)
            keyed[state.id] = base_coefficients(spec, order, memory)
    else:
        keyed = {SHARED: base_coefficients(spec, spec.order, spec.memory)}

    branches = []
    for _ in range(antennas):
        branches.append({sid: perturb(c, spec.perturbation, rng) for sid, c in keyed.items()})

    gain = 10.0 ** (spec.small_signal_gain_db / 20.0)
    return MpArrayModel(branches=branches, gain=complex(gain), kind="pa")


def pa_array_apply(model: MpArrayModel, frame: np.ndarray, state_id: int) -> np.ndarray:
    return model.apply(frame, state_id)


def compression_db(c: MpCoeffs, amplitude: float) -> float:
    """AM/AM gain drop at a constant-envelope drive amplitude"""
    y = mp_apply(c, np.full(4 * (c.memory + 1) + 8, amplitude, dtype=np.complex128))
    steady = abs(y[-1]) / amplitude
    small = abs(c.static_gain(0.0))
    return float(-20.0 * np.log10(steady / small))
