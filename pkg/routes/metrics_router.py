from fastapi import APIRouter, HTTPException
from pydantic import BaseModel
from typing import List, Literal, Optional

import numpy as np

from services.metrics import evm, tx_nmse, welch_psd

router = APIRouter(prefix="/api/metrics", tags=["Metrics"])

# complex samples travel as [re, im] pairs
ComplexList = List[List[float]]


def to_complex(pairs, name: str) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim < 2 or arr.shape[-1] != 2:
        raise ValueError(f"{name} must be a list of [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


class EvmRequest(BaseModel):
    received: List[ComplexList]   # N x U
    reference: List[ComplexList]  # N x U
    mask: Optional[List[int]] = None
    equalize: Literal["known-alpha", "ls-scalar"] = "known-alpha"
    gain: List[float] = [1.0, 0.0]


class TxNmseRequest(BaseModel):
    actual: List[ComplexList]
    ideal: List[ComplexList]


class PsdRequest(BaseModel):
    stream: ComplexList
    fs_hz: float
    segment: int = 2048
    overlap: float = 0.5
    window: str = "hann"


@router.post("/evm")
async def compute_evm(request: EvmRequest):
    try:
        report = evm(
            to_complex(request.received, "received"),
            to_complex(request.reference, "reference"),
            mask=np.asarray(request.mask) if request.mask is not None else None,
            equalize=request.equalize,
            gain=complex(request.gain[0], request.gain[1]),
        )
        return {"status": "success", "data": report.model_dump()}
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/tx-nmse")
async def compute_tx_nmse(request: TxNmseRequest):
    try:
        value = tx_nmse(to_complex(request.actual, "actual"), to_complex(request.ideal, "ideal"))
        return {"status": "success", "tx_nmse_db": value}
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/psd")
async def compute_psd(request: PsdRequest):
    try:
        est = welch_psd(to_complex(request.stream, "stream"), request.fs_hz, request.segment,
                        request.overlap, request.window)
        return {
            "status": "success",
            "freqs_hz": est.freqs_hz.tolist(),
            "density_dbm_hz": est.density_dbm_hz.tolist(),
            "segment": est.segment,
            "window": est.window,
            "overlap": est.overlap,
            "total_power_w": est.total_power(),
        }
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
