"""evopipe: genetic-programming search over classification pipelines.

Pipelines are trees of selectors, transformers, stacked classifiers and
feature unions feeding a root classifier. A bi-objective NSGA-II search
trades cross-validated accuracy against pipeline size, with native neural
(logistic regression, one-hidden-layer MLP) and shallow estimators.
"""

from __future__ import annotations

from importlib.metadata import PackageNotFoundError
from importlib.metadata import version as _pkg_version
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from fastapi import FastAPI

try:
    __version__ = _pkg_version("evopipe")
except PackageNotFoundError:
    __version__ = "0.0.0-dev"


def create_app() -> FastAPI:
    """Return the HTTP inspection app (pipelines and reports).

    This is the standalone entry point for ASGI servers. Hosts that already run a
    FastAPI app include :data:`evopipe.routes.router` instead.
    """
    from fastapi import FastAPI

    from evopipe.routes import router

    app = FastAPI(title="evopipe", version=__version__)
    app.include_router(router)
    return app
