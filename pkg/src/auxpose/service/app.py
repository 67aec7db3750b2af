"""HTTP face of the package: one endpoint per pipeline verb.

Bad requests (unknown config keys, missing paths, incompatible models)
come back as 400 with the underlying message; failures inside a run
(divergence, IO errors mid-write) come back as 500.
"""

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..runconfig import load_run_config
from ..tasks import (
    task_ablate,
    task_colorize,
    task_eval,
    task_gen_data,
    task_train,
)
from .schemas import (
    AblateRequest,
    AblateResponse,
    ColorizeRequest,
    ColorizeResponse,
    EvalRequest,
    EvalResponse,
    GenDataRequest,
    GenDataResponse,
    HealthResponse,
    TrainRequest,
    TrainResponse,
)

_USAGE_ERRORS = (ValueError, FileNotFoundError, NotADirectoryError)


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except _USAGE_ERRORS as err:
        raise HTTPException(status_code=400, detail=str(err)) from err
    except Exception as err:
        raise HTTPException(status_code=500,
                            detail=f"{type(err).__name__}: {err}") from err


def create_app() -> FastAPI:
    app = FastAPI(title="auxpose", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/gen-data", response_model=GenDataResponse)
    def gen_data(req: GenDataRequest) -> GenDataResponse:
        values = _run(load_run_config, None, req.config)
        result = _run(task_gen_data, values, req.seed, req.out_dir,
                      force=req.force)
        return GenDataResponse(**result)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest) -> TrainResponse:
        values = _run(load_run_config, None, req.config)
        result = _run(task_train, values, req.seed, req.dataset_dir,
                      req.out_dir, resume=req.resume, force=req.force)
        return TrainResponse(**result)

    @app.post("/eval", response_model=EvalResponse)
    def eval_run(req: EvalRequest) -> EvalResponse:
        values = _run(load_run_config, None, req.config)
        result = _run(task_eval, values, req.dataset_dir, req.run_dir,
                      checkpoint=req.checkpoint, out_dir=req.out_dir,
                      export_masks=req.export_masks, split=req.split)
        return EvalResponse(**result)

    @app.post("/colorize", response_model=ColorizeResponse)
    def colorize(req: ColorizeRequest) -> ColorizeResponse:
        result = _run(task_colorize, req.run_dir, req.image_path,
                      req.out_path, checkpoint=req.checkpoint)
        return ColorizeResponse(**result)

    @app.post("/ablate", response_model=AblateResponse)
    def ablate_run(req: AblateRequest) -> AblateResponse:
        values = _run(load_run_config, None, req.config)
        result = _run(task_ablate, values, req.dataset_dir, req.out_dir,
                      force=req.force)
        return AblateResponse(**result)

    return app


app = create_app()
