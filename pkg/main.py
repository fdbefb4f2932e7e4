"""
SPDE Volatility Lab - Main FastAPI Application
"""

import asyncio
import logging
import os

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field
from starlette.middleware.gzip import GZipMiddleware

from config import settings, setup_logging
from services.errors import ConfigError, LabError
from services.experiment_config import config_from_dict, config_hash, parse_config
from services.experiments import COMMANDS, experiment_runner

setup_logging()
logger = logging.getLogger("API")

# ─── App Init ─────────────────────────────────────────────────
app = FastAPI(
    title="SPDE Volatility Lab",
    description="Volatility estimation and feasible inference for Hilbert-space SPDEs",
    version=settings.CODE_VERSION,
)

# Middleware
app.add_middleware(GZipMiddleware, minimum_size=500)

# Run artifacts
os.makedirs(settings.OUTPUT_DIR, exist_ok=True)
app.mount("/runs", StaticFiles(directory=settings.OUTPUT_DIR), name="runs")


# ─── Request bodies ───────────────────────────────────────────
class ConfigBody(BaseModel):
    """An experiment as TOML text or as an already-parsed table."""

    toml: str | None = None
    config: dict | None = None

    def load(self):
        if self.toml is not None:
            return parse_config(self.toml)
        if self.config is not None:
            return config_from_dict(self.config)
        raise ConfigError("send either 'toml' or 'config'")


class CommandBody(ConfigBody):
    threads: int | None = Field(None, ge=1)
    seed: int | None = Field(None, ge=0)
    replications: int | None = Field(None, ge=1)
    n_grid: list[int] | None = None
    which: str | None = None
    control: bool = False


def _response(result) -> dict:
    return {
        "command": result.command,
        "passed": result.passed,
        "directory": result.directory.name,
        "report": result.report,
    }


async def _run(command: str, body: CommandBody) -> dict:
    cfg = body.load() if command != "counterexample" else None
    # campaigns are CPU bound, keep them off the event loop
    result = await asyncio.to_thread(
        experiment_runner.run,
        command,
        cfg,
        threads=body.threads,
        which=body.which,
        replications=body.replications,
        seed=body.seed,
        control=body.control,
        n_grid=body.n_grid,
    )
    return _response(result)


# ─── Health check ─────────────────────────────────────────────
@app.get("/health")
async def health_check():
    return {"status": "ok", "version": settings.CODE_VERSION}


# ═══════════════════════════════════════════════════════════════
#  API ROUTES
# ═══════════════════════════════════════════════════════════════


@app.get("/api/commands")
async def api_commands():
    return {"commands": list(COMMANDS)}


@app.post("/api/config/validate")
async def api_config_validate(body: ConfigBody):
    """Validate an experiment and return its normalized form and hash."""
    cfg = body.load()
    return {"ok": True, "config_hash": config_hash(cfg), "config": cfg.model_dump(mode="json")}


@app.post("/api/regime-report")
async def api_regime_report(body: CommandBody):
    return await _run("regime-report", body)


@app.post("/api/estimate")
async def api_estimate(body: CommandBody):
    return await _run("estimate", body)


@app.post("/api/commands/{command}")
async def api_command(command: str, body: CommandBody):
    if command not in COMMANDS:
        raise HTTPException(status_code=404, detail=f"Unknown command {command}")
    return await _run(command, body)


# ═══════════════════════════════════════════════════════════════
#  ERROR HANDLERS
# ═══════════════════════════════════════════════════════════════


@app.exception_handler(ConfigError)
async def config_error_handler(request: Request, exc: ConfigError):
    logger.warning(f"{request.url.path}: {exc}")
    return JSONResponse(
        status_code=422,
        content={"error": "config", "detail": str(exc), "location": exc.location, "line": exc.line},
    )


@app.exception_handler(LabError)
async def lab_error_handler(request: Request, exc: LabError):
    logger.warning(f"{request.url.path}: {exc}")
    return JSONResponse(status_code=400, content={"error": type(exc).__name__, "detail": str(exc)})


# ═══════════════════════════════════════════════════════════════
#  RUN
# ═══════════════════════════════════════════════════════════════

if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "main:app",
        host=settings.HOST,
        port=settings.PORT,
        reload=settings.DEBUG,
    )
