import logging
import os
from typing import List

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from mapsearch import __version__
from mapsearch.errors import MapSearchError
from mapsearch.models import AlgorithmKind
from mapsearch.services import surrogate
from mapsearch.services.costmodel import accelerator_presets, algorithmic_minimum, describe, evaluate
from mapsearch.services.mapspace import MapSpaceCtx, format_mapping, get_mapping, get_projection, parse_mapping
from mapsearch.services.search import METHODS, SearchBudget, run_method
from mapsearch.services.workload import parse_problem

logger = logging.getLogger(__name__)

app = FastAPI(title="mapsearch", version=__version__)

# Optional surrogate for method=mm; a broken file is reported by the health check.
model = None
startup_error = None

try:
    if os.environ.get("MAPSEARCH_MODEL"):
        model = surrogate.load(os.environ["MAPSEARCH_MODEL"])
except MapSearchError as e:
    startup_error = str(e)
    logger.error(f"Startup Error: {e}")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

MAX_ITERATIONS = 5000


@app.exception_handler(404)
async def custom_404_handler(request: Request, exc):
    detail = getattr(exc, "detail", None)
    if not detail or detail == "Not Found":
        detail = f"Not Found: {request.url.path}"
    return JSONResponse(status_code=404, content={"detail": detail})


@app.exception_handler(MapSearchError)
async def mapsearch_error_handler(request: Request, exc: MapSearchError):
    return JSONResponse(status_code=400, content={"detail": str(exc)})


class ProblemBody(BaseModel):
    kind: str
    dims: str
    accel: str = "desk"


class EvaluateBody(ProblemBody):
    mapping: str


class ProjectBody(ProblemBody):
    vector: List[float]


def _context(kind: str, dims: str, accel: str) -> MapSpaceCtx:
    presets = accelerator_presets()
    if accel not in presets:
        raise HTTPException(status_code=400, detail=f"Unknown accelerator preset {accel!r}")
    problem = parse_problem(AlgorithmKind.parse(kind), dims)
    return MapSpaceCtx(problem, presets[accel])


def _mapping_payload(ctx: MapSpaceCtx, m) -> dict:
    cost = evaluate(ctx.accel, ctx.problem, m)
    return {"problem": ctx.problem.label, "mapping": format_mapping(ctx.problem, m), "cost": describe(cost)}


@app.get("/api")
def health_check():
    """Health check and startup error report"""
    if startup_error:
        return {"status": "error", "detail": startup_error}
    return {"status": "ok", "message": "mapsearch API is running", "model": model is not None}


@app.get("/api/lower-bound")
def get_lower_bound(kind: str, dims: str, accel: str = "desk"):
    ctx = _context(kind, dims, accel)
    bound = algorithmic_minimum(ctx.accel, ctx.problem)
    return {"problem": ctx.problem.label, "cost": describe(bound)}


@app.get("/api/mapping/random")
def get_random_mapping(kind: str, dims: str, accel: str = "desk", seed: int = 0):
    ctx = _context(kind, dims, accel)
    return _mapping_payload(ctx, get_mapping(ctx, seed))


@app.post("/api/evaluate")
def post_evaluate(body: EvaluateBody):
    ctx = _context(body.kind, body.dims, body.accel)
    problem, m = parse_mapping(body.mapping)
    if problem != ctx.problem:
        raise HTTPException(status_code=400, detail=f"Mapping is for {problem.label}, not {ctx.problem.label}")
    return _mapping_payload(ctx, m)


@app.post("/api/project")
def post_project(body: ProjectBody):
    ctx = _context(body.kind, body.dims, body.accel)
    return _mapping_payload(ctx, get_projection(ctx, body.vector))


@app.get("/api/search")
def get_search(kind: str, dims: str, accel: str = "desk", method: str = "random",
               iterations: int = 100, seed: int = 0):
    """Best mapping found by one search run."""
    if method not in METHODS:
        raise HTTPException(status_code=400, detail=f"Invalid method; choose from {', '.join(METHODS)}")
    if not 1 <= iterations <= MAX_ITERATIONS:
        raise HTTPException(status_code=400, detail=f"iterations must be in [1, {MAX_ITERATIONS}]")
    ctx = _context(kind, dims, accel)
    if method == "mm":
        if startup_error:
            raise HTTPException(status_code=500, detail=f"Server startup error: {startup_error}")
        if model is None:
            raise HTTPException(status_code=404, detail="No surrogate model configured (set MAPSEARCH_MODEL)")
    trace = run_method(method, ctx, SearchBudget(iterations=iterations), seed, model)
    payload = _mapping_payload(ctx, trace.best)
    payload.update(method=method, iterations=len(trace.rows), normalized_edp=trace.best_true_obj)
    return payload
