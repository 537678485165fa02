import logging
import uuid
from pathlib import Path

from fastapi import APIRouter, HTTPException, status
from pydantic import ValidationError

import schemas
from config import get_settings
from errors import ConfigError, DomainError, SimulationError, UsageError
from scenarios import load_manifest, run_scenario

logger = logging.getLogger(__name__)

router = APIRouter()


def run_dir(run_id: str) -> Path:
    return Path(get_settings().output_dir) / run_id


@router.get("/", response_model=list[schemas.ScenarioInfo])
def list_scenarios():
    return [
        schemas.ScenarioInfo(name=name, defaults=schemas.SCENARIO_PARAMS[name]().model_dump())
        for name in schemas.SCENARIO_NAMES
    ]


@router.post("/{name}", response_model=schemas.ScenarioRunResponse)
def run(name: str, request: schemas.ScenarioRunRequest):
    if name not in schemas.SCENARIO_NAMES:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"Unknown scenario: {name}")

    run_id = f"{name}-{uuid.uuid4().hex[:12]}"
    try:
        scenario = schemas.Scenario(
            name=name,
            params=request.params,
            out_dir=str(run_dir(run_id)),
            seed=request.seed,
            workers=request.workers,
            profile=request.profile,
        )
        manifest, result = run_scenario(scenario)
    except ValidationError as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=f"Error running scenario: {str(e)}"
        )
    except (ConfigError, UsageError, DomainError) as e:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Error running scenario: {str(e)}"
        )
    except SimulationError as e:
        logger.error(f"Scenario {name} failed: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Error running scenario: {str(e)}"
        )

    logger.info(f"Run {run_id} finished")
    return schemas.ScenarioRunResponse(run_id=run_id, summary=result.summary, manifest=manifest)


@router.get("/runs/{run_id}/manifest", response_model=schemas.RunManifest)
def get_manifest(run_id: str):
    path = run_dir(run_id) / "manifest.json"
    if "/" in run_id or ".." in run_id or not path.is_file():
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"Run not found: {run_id}")
    try:
        return load_manifest(path)
    except (SimulationError, ValidationError) as e:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Error reading manifest: {str(e)}"
        )
