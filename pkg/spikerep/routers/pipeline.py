# routers/pipeline.py
import logging
from typing import Any, Dict, Optional

from fastapi import APIRouter
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from spikerep.commands import COMMANDS, run_command
from spikerep.utils.config import build_config
from spikerep.utils.errors import PipelineError
from spikerep.utils.type_converter import convert_numpy_types

logger = logging.getLogger(__name__)

router = APIRouter()


class PipelineRequest(BaseModel):
    config: Dict[str, Any] = Field(default_factory=dict, description="Config keys overriding the defaults")
    inputs: Dict[str, str] = Field(default_factory=dict, description="Input files by name, e.g. recording, model")
    out_dir: str = Field(..., description="Directory that receives the artifacts and run.json")
    seed: Optional[int] = Field(None, description="Overrides config.seed")
    use_dae: bool = Field(False, description="Apply the DAE before the encoder at inference")

    model_config = {
        "json_schema_extra": {
            "example": {
                "config": {"synth_duration_s": 30.0, "synth_noise_std": 10.0},
                "inputs": {},
                "out_dir": "runs/synth-001",
                "seed": 0,
                "use_dae": False,
            }
        }
    }


@router.get("/commands")
async def list_commands():
    return {"commands": sorted(COMMANDS)}


@router.post("/{command}")
def run_pipeline_command(command: str, request: PipelineRequest):
    """Run one pipeline stage synchronously and return its RunManifest."""
    try:
        values = dict(request.config)
        if request.seed is not None:
            values["seed"] = request.seed
        cfg = build_config(values)
        manifest = run_command(command, cfg, request.inputs, request.out_dir, request.use_dae)
        return {"success": True, "manifest": convert_numpy_types(manifest.model_dump())}
    except PipelineError as e:
        logger.error(f"Error running {command}: {e.message}")
        status_code = 404 if e.error_type == "unknown_command" else 400
        return JSONResponse(status_code=status_code, content=e.to_dict())
