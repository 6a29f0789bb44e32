"""FastAPI application serving the refinement wire protocol.

POST /refine accepts {image: base64 PNG, source_prompt?, target_prompt?,
n_min?, n_max?, num_samples, seed?}; omitted editing parameters fall back to
the configured defaults, and the response echoes the parameters that were
actually used. GET /health reports the serving mode.

Errors: 400 malformed request, 413 image too large, 503 model not loaded.
Request handling is stateless; heavy jobs serialize through a bounded
semaphore (max_concurrent_jobs).
"""

from __future__ import annotations

import argparse
import base64
import binascii
import threading

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .backends import ModelNotLoaded, decode_png, make_backend
from .config import ServiceConfig, load_config


class RefineRequest(BaseModel):
    image: str = Field(min_length=1)
    source_prompt: str | None = None
    target_prompt: str | None = None
    n_min: int | None = Field(default=None, ge=0)
    n_max: int | None = Field(default=None, ge=0)
    num_samples: int = Field(default=1, ge=1)
    seed: int = 0


class RefineResponse(BaseModel):
    images: list[str]
    backend: str
    params: dict


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    backend = make_backend(config)
    jobs = threading.Semaphore(config.max_concurrent_jobs)
    app = FastAPI(title="refiner-service", version="0.1.0")

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/health")
    def health():
        return {"status": "ok", "mode": config.mode}

    @app.post("/refine", response_model=RefineResponse)
    def refine(req: RefineRequest):
        try:
            png = base64.b64decode(req.image, validate=True)
        except (binascii.Error, ValueError):
            return JSONResponse(status_code=400, content={"detail": "image is not valid base64"})
        try:
            img = decode_png(png)
        except ValueError as exc:
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        if max(img.size) > config.max_image_side:
            return JSONResponse(
                status_code=413,
                content={"detail": f"image side exceeds {config.max_image_side}"},
            )
        params = {
            "source_prompt": req.source_prompt or config.source_prompt,
            "target_prompt": req.target_prompt or config.target_prompt,
            "n_min": req.n_min if req.n_min is not None else config.n_min,
            "n_max": req.n_max if req.n_max is not None else config.n_max,
            "num_samples": req.num_samples,
            "seed": req.seed,
        }
        with jobs:
            try:
                outputs = backend.refine(png, **params)
            except ModelNotLoaded as exc:
                return JSONResponse(status_code=503, content={"detail": str(exc)})
        return RefineResponse(
            images=[base64.b64encode(o).decode("ascii") for o in outputs],
            backend=backend.name,
            params=params,
        )

    return app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="refiner-service", description=__doc__)
    parser.add_argument("--config", default=None, help="YAML or JSON config file")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8571)
    args = parser.parse_args(argv)
    import uvicorn

    uvicorn.run(create_app(load_config(args.config)), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
