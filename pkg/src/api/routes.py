"""
FastAPI routes over the experiment harness and the linear-sem estimators
"""
import logging
from typing import Any, Dict, List

import pandas as pd
from fastapi import APIRouter, HTTPException

from src.api.models import (
    LinsemRequest,
    LinsemResponse,
    RunRequest,
    RunResponse,
    SummarizeRequest,
    SummarizeResponse,
)
from src.services import experiment_service as harness
from src.services.experiment_config import ExperimentConfig
from src.services.linsem_service import CovSet, tau_three_view, tau_with_external_info
from src.utils.errors import ConfigError, IdentificationError, ProxyDeconfoundError, ReportError

logger = logging.getLogger(__name__)

router = APIRouter()


def _records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    """DataFrame rows as JSON-safe dicts (NaN becomes null)"""
    return frame.astype(object).where(frame.notna(), None).to_dict("records")


@router.post("/run", response_model=RunResponse)
def run_experiment(request: RunRequest):
    """
    Run an inline experiment config:
    1. Parse and validate the config
    2. Run every seed, setting and model
    3. Return report rows and the mean (sem) summary
    """
    try:
        # Step 1: Parse the config
        config = ExperimentConfig.from_text(request.config)

        # Step 2: Run all cells (nothing is written to disk)
        result = harness.run(config, None, jobs=request.jobs, no_clamp=request.no_clamp, seeds=request.seeds)

        return RunResponse(
            name=config.name,
            rows=[row.as_dict() for row in result.rows],
            summary=_records(result.summary),
            summary_text=harness.format_summary(result.summary),
            failed=result.failed,
        )

    except ConfigError as e:
        raise HTTPException(status_code=422, detail=f"Invalid config: {e}")
    except Exception as e:
        logger.exception("experiment run failed")
        raise HTTPException(status_code=500, detail=f"Experiment run failed: {str(e)}")


@router.post("/summarize", response_model=SummarizeResponse)
def summarize_rows(request: SummarizeRequest):
    try:
        frame = pd.DataFrame(request.rows)
        missing = [c for c in harness.REPORT_COLUMNS if c not in frame.columns]
        extra = [c for c in frame.columns if c not in harness.REPORT_COLUMNS]
        if missing or extra:
            raise ReportError(f"rows have missing columns {missing} or unknown columns {extra}")
        summary = harness.summarize_frame(frame[harness.REPORT_COLUMNS])
        return SummarizeResponse(summary=_records(summary), summary_text=harness.format_summary(summary))

    except ReportError as e:
        raise HTTPException(status_code=422, detail=f"Invalid report rows: {e}")
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Summary failed: {str(e)}")


@router.post("/linsem/estimate", response_model=LinsemResponse)
def linsem_estimate(request: LinsemRequest):
    """
    Evaluate both closed-form estimators on supplied covariances. An
    estimator whose inputs are absent or not identified reports its error
    instead of a value.
    """
    try:
        cov = CovSet(
            sigma_XY=request.sigma_XY,
            sigma_XX=request.sigma_XX,
            sigma_XW=request.sigma_XW,
            sigma_YW=request.sigma_YW,
            sigma_VW=request.sigma_VW,
            sigma_WZ=request.sigma_WZ,
            sigma_VZ=request.sigma_VZ,
        )
    except ProxyDeconfoundError as e:
        raise HTTPException(status_code=422, detail=f"Invalid covariances: {e}")

    response = LinsemResponse()
    if request.beta_WU is not None and request.sigma_UU is not None:
        try:
            estimate = tau_with_external_info(cov, request.beta_WU, request.sigma_UU, return_diagnostics=True)
            response.tau_external = estimate.tau
            response.condition_numbers["external"] = estimate.condition_numbers
        except (IdentificationError, ProxyDeconfoundError, ValueError) as e:
            response.errors["external"] = str(e)
    if cov.has_three_views:
        try:
            estimate = tau_three_view(cov, return_diagnostics=True)
            response.tau_three_view = estimate.tau
            response.condition_numbers["three_view"] = estimate.condition_numbers
        except (IdentificationError, ProxyDeconfoundError, ValueError) as e:
            response.errors["three_view"] = str(e)
    if response.tau_external is None and response.tau_three_view is None and not response.errors:
        raise HTTPException(
            status_code=422,
            detail="Supply beta_WU and sigma_UU, or sigma_VW, sigma_WZ and sigma_VZ",
        )
    return response
