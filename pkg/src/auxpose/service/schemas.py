"""Request and response bodies for the service endpoints.

`config` fields carry flat key=value override pairs exactly as they would
appear in a run-config file; the service validates them against the
schema, so clients stay free of parsing logic.
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class GenDataRequest(BaseModel):
    out_dir: str
    seed: int = 0
    force: bool = False
    config: Dict[str, str] = Field(default_factory=dict)


class GenDataResponse(BaseModel):
    out_dir: str
    manifest: Dict
    n_train: int
    n_test: int


class TrainRequest(BaseModel):
    dataset_dir: str
    out_dir: str
    seed: int = 0
    resume: bool = False
    force: bool = False
    config: Dict[str, str] = Field(default_factory=dict)


class TrainResponse(BaseModel):
    out_dir: str
    epochs_run: int
    final: Optional[Dict] = None
    checkpoint: Optional[str] = None
    log_path: str


class EvalRequest(BaseModel):
    dataset_dir: str
    run_dir: str
    checkpoint: Optional[str] = None
    out_dir: Optional[str] = None
    export_masks: bool = False
    split: str = "test"
    config: Dict[str, str] = Field(default_factory=dict)


class EvalResponse(BaseModel):
    checkpoint: str
    report: Dict
    report_path: str
    trajectory_path: str
    mask_dir: Optional[str] = None


class ColorizeRequest(BaseModel):
    run_dir: str
    image_path: str
    out_path: str
    checkpoint: Optional[str] = None


class ColorizeResponse(BaseModel):
    out_path: str
    checkpoint: str
    width: int
    height: int


class AblateRequest(BaseModel):
    dataset_dir: str
    out_dir: str
    force: bool = False
    config: Dict[str, str] = Field(default_factory=dict)


class AblateResponse(BaseModel):
    csv_path: str
    rows: List[Dict]
    summary: Dict[str, Dict[str, float]]
    threshold: float
