"""
TD-DPD Module
Per-branch memory-polynomial predistorters fitted by indirect learning
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field

from services.errors import DimensionError, TrainingDivergenceError
from services.metrics import tx_nmse
from services.numerics import lstsq
from services.pa_model import MpArrayModel, MpCoeffs, mp_apply

TdDpdModel = MpArrayModel

# cascade NMSE at numerical roundoff; nothing left to fit
CONVERGED_DB = -200.0


class TdDpdSpec(BaseModel):
    kind: Literal["mp"] = "mp"
    order: int = 7
    memory: int = 4
    iterations: int = 2
    ridge: float = Field(default=1e-8, ge=0)
    rise_tolerance_db: float = Field(default=0.01, ge=0)
    follow_pa_schedule: bool = True


def mp_regressor_matrix(x: np.ndarray, memory: int, order: int) -> np.ndarray:
    """Columns x[n-m] |x[n-m]|^(k-1), k-major / m-minor, zero history"""
    x = np.asarray(x, dtype=np.complex128)
    length = x.size
    n_orders = (order + 1) // 2
    p = (memory + 1) * n_orders
    if length <= p:
        raise DimensionError(f"Need more than {p} samples for an M={memory}, K={order} regressor, got {length}")

    mag = np.abs(x)
    phi = np.zeros((length, p), dtype=np.complex128)
    col = 0
    for row in range(n_orders):
        k = 2 * row + 1
        basis = x * mag ** (k - 1)
        for m in range(memory + 1):
            phi[m:, col] = basis[: length - m]
            col += 1
    return phi


def _frames(probe: np.ndarray) -> np.ndarray:
    probe = np.asarray(probe, dtype=np.complex128)
    return probe[None, :] if probe.ndim == 1 else probe


def _cascade_nmse(pa: MpCoeffs, dpd: Optional[MpCoeffs], frames: np.ndarray, gain: complex) -> float:
    out, ideal = [], []
    for x in frames:
        drive = mp_apply(dpd, x) if dpd is not None else x
        out.append(mp_apply(pa, drive))
        ideal.append(gain * x)
    return tx_nmse(np.concatenate(out), np.concatenate(ideal))


def ila_fit(
    branch_pa: MpCoeffs,
    probe: np.ndarray,
    spec: TdDpdSpec,
    gain: Optional[complex] = None,
    quiet: bool = True,
) -> MpCoeffs:
    """
    Indirect learning: fit a postinverse of PA/g by least squares and copy it
    as the predistorter, repeating with the predistorted probe as drive.
    probe is one stream or a (frames x L) stack; each frame starts with
    zero history, like the PA does.

    Only fitted iterates are compared with each other: a rise of more than
    spec.rise_tolerance_db counts, two in a row is divergence. An iterate at
    the NMSE floor ends the fit.
    """
    if spec.iterations < 1:
        raise ValueError("ila_fit needs at least one iteration")
    g = complex(branch_pa.small_signal_gain if gain is None else gain)
    frames = _frames(probe)
    scale = float(np.sqrt(np.mean(np.abs(frames) ** 2)))
    if scale == 0:
        raise ValueError("ILA probe is all zeros")

    ks = np.arange(1, spec.order + 1, 2)
    unscale = scale ** (ks - 1)

    dpd: Optional[MpCoeffs] = None
    best, best_nmse = None, np.inf
    history: List[float] = []
    rises = 0

    for it in range(spec.iterations):
        drives = np.stack([mp_apply(dpd, x) if dpd is not None else x for x in frames])
        post = np.stack([mp_apply(branch_pa, d) / g for d in drives])

        phi = np.vstack([mp_regressor_matrix(u / scale, spec.memory, spec.order) for u in post])
        target = (drives / scale).ravel()
        theta = lstsq(phi, target, spec.ridge).reshape(len(ks), spec.memory + 1)
        dpd = MpCoeffs(theta / unscale[:, None])

        nmse = _cascade_nmse(branch_pa, dpd, frames, g)
        if not quiet:
            print(f"   ILA iteration {it + 1}: cascade NMSE {nmse:.2f} dB")

        if nmse < best_nmse:
            best, best_nmse = dpd, nmse
        if nmse <= CONVERGED_DB:
            break

        if history and nmse > history[-1] + spec.rise_tolerance_db:
            rises += 1
            if rises >= 2:
                raise TrainingDivergenceError(
                    f"ILA diverged: cascade NMSE rose twice in a row ({history[-2]:.2f} -> {history[-1]:.2f} -> {nmse:.2f} dB)"
                )
        else:
            rises = 0
        history.append(nmse)

    return best


def fit_td_dpd(
    pa: MpArrayModel,
    probes: Dict[int, np.ndarray],
    spec: TdDpdSpec,
    schedule: Optional[Dict[int, tuple]] = None,
    threads: int = 1,
    quiet: bool = True,
) -> MpArrayModel:
    """
    One predistorter per (branch, state). probes[state_id] is a
    (frames x N x B) stack of PA input frames for that state.
    schedule optionally maps state_id -> (order, memory).
    """
    jobs = []
    for sid, stack in probes.items():
        order, memory = schedule.get(sid, (spec.order, spec.memory)) if schedule else (spec.order, spec.memory)
        state_spec = spec.model_copy(update={"order": order, "memory": memory})
        for b in range(pa.antennas):
            jobs.append((sid, b, state_spec, stack[:, :, b]))

    def run(job):
        sid, b, state_spec, frames = job
        return sid, b, ila_fit(pa.coeffs_for(b, sid), frames, state_spec, gain=pa.gain, quiet=quiet)

    branches: List[Dict[Optional[int], MpCoeffs]] = [dict() for _ in range(pa.antennas)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for sid, b, coeffs in pool.map(run, jobs):
            branches[b][sid] = coeffs

    return MpArrayModel(branches=branches, gain=pa.gain, kind="td-dpd")


def td_dpd_apply(model: MpArrayModel, frame: np.ndarray, state_id: int) -> np.ndarray:
    return model.apply(frame, state_id)
