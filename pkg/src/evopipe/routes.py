"""HTTP inspection surface for export artifacts, templates and reports."""

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from evopipe.errors import EvopipeError
from evopipe.harness import ExperimentResult, summarize
from evopipe.operators import default_instance, default_registry, parse_template
from evopipe.pipeline import (
    export_pipeline,
    import_pipeline,
    linear_pipeline,
    render_script,
)

router = APIRouter()


# ---------------------------------------------------------------------------
# Request models
# ---------------------------------------------------------------------------


class InspectRequest(BaseModel):
    """Request body carrying an export artifact."""

    artifact: str


class RenderRequest(BaseModel):
    """Request body carrying a template string."""

    template: str = Field(description="e.g. Selector-Transformer-MlpNN")


class ReportRequest(BaseModel):
    """Request body carrying result-file payloads."""

    results: list[ExperimentResult] = Field(min_length=1)


# ---------------------------------------------------------------------------
# Response models
# ---------------------------------------------------------------------------


class InspectResponse(BaseModel):
    """Validation outcome and shape of an imported pipeline."""

    valid: bool
    error: str | None = None
    complexity: int | None = None
    depth: int | None = None
    cv_score: float | None = None
    dataset: str | None = None
    seed: int | None = None
    script: str | None = None


class RenderResponse(BaseModel):
    """Default-hyperparameter pipeline satisfying a template."""

    template: str
    artifact: str
    script: str


class ReportResponse(BaseModel):
    report: str


# ---------------------------------------------------------------------------
# Endpoints
# ---------------------------------------------------------------------------


@router.post("/pipelines/inspect", response_model=InspectResponse)
async def inspect_pipeline(body: InspectRequest) -> dict[str, object]:
    """Import an artifact and describe it; invalid artifacts are reported, not raised."""
    try:
        tree, meta = import_pipeline(body.artifact)
    except EvopipeError as exc:
        return {"valid": False, "error": str(exc)}
    return {
        "valid": True,
        "complexity": tree.node_count,
        "depth": tree.max_depth,
        "cv_score": meta.cv_score,
        "dataset": meta.dataset,
        "seed": meta.seed,
        "script": render_script(tree, meta.cv_score),
    }


@router.post("/pipelines/render", response_model=RenderResponse)
async def render_pipeline(body: RenderRequest) -> dict[str, object]:
    """Fill each template slot with its first candidate at default hyperparameters."""
    registry = default_registry(nn_enabled=True)
    try:
        constraint = parse_template(body.template, registry)
    except EvopipeError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    steps = [
        (slot.role, default_instance(registry.get(slot.candidates[0])))
        for slot in constraint.slots
    ]
    tree = linear_pipeline(steps)
    return {
        "template": body.template,
        "artifact": export_pipeline(tree),
        "script": render_script(tree),
    }


@router.post("/reports", response_model=ReportResponse)
async def build_report(body: ReportRequest) -> dict[str, object]:
    """Summary tables over the posted experiment results."""
    return {"report": summarize(body.results)}
