from fastapi import APIRouter, HTTPException, Query
from pydantic import BaseModel
from typing import List, Optional

from lab_settings import resolve_config_path
from services.config_service import config_hash, parse_config, with_overrides
from services.errors import ConfigError, DpdLabError, PrerequisiteError, TrainingDivergenceError
from services.pipeline import PHASES, read_report, run_pipeline

router = APIRouter(prefix="/api/pipeline", tags=["Pipeline"])


class PipelineRunRequest(BaseModel):
    config_path: Optional[str] = None
    phases: List[str] = ["all"]
    out_dir: Optional[str] = None
    seed: Optional[int] = None
    threads: Optional[int] = None


def http_error(e: Exception) -> HTTPException:
    if isinstance(e, PrerequisiteError):
        return HTTPException(status_code=409, detail=str(e))
    if isinstance(e, TrainingDivergenceError):
        return HTTPException(status_code=500, detail=str(e))
    if isinstance(e, (ValueError, FileNotFoundError)):
        return HTTPException(status_code=400, detail=str(e))
    return HTTPException(status_code=500, detail=f"Pipeline failed: {str(e)}")


@router.post("/run")
def run_phases(request: PipelineRunRequest):
    """
    Run pipeline phases synchronously on a config file

    Example Request:
    {
        "config_path": "configs/desk.cfg",
        "phases": ["gen", "train-td"],
        "out_dir": "runs/api"
    }
    """
    try:
        cfg = parse_config(resolve_config_path(request.config_path))
        cfg = with_overrides(cfg, out_dir=request.out_dir, seed=request.seed, threads=request.threads)
        phases = None if "all" in request.phases else request.phases
        unknown = [p for p in (phases or []) if p not in PHASES]
        if unknown:
            raise ConfigError(f"Unknown phase(s) {unknown}; choose from {PHASES + ['all']}")

        result = run_pipeline(cfg, phases, quiet=True)
        return {
            "status": "success",
            "out_dir": str(result.out_dir),
            "config_hash": config_hash(cfg),
            "phases": result.phases,
            "report": [r.model_dump() for r in result.report.rows] if result.report else None,
        }
    except (DpdLabError, ValueError, FileNotFoundError) as e:
        print(f"❌ Error in run_phases: {str(e)}")
        raise http_error(e)


@router.get("/report")
def get_report(out_dir: str = Query(..., description="Output directory of an evaluated run")):
    """Report rows of a run whose eval phase completed"""
    try:
        report = read_report(out_dir)
        return {
            "status": "success",
            "config_hash": report.config_hash,
            "seed": report.seed,
            "rows": [r.model_dump(exclude={"runtime_s"}) for r in report.rows],
        }
    except (DpdLabError, ValueError) as e:
        print(f"❌ Error in get_report: {str(e)}")
        raise http_error(e)
