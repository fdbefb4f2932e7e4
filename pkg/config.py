"""
SPDE Volatility Lab - Configuration centralisée
"""

import logging
import os
from dotenv import load_dotenv

load_dotenv()


class Settings:
    # App
    DEBUG = os.getenv("DEBUG", "false").lower() == "true"
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
    CODE_VERSION = os.getenv("CODE_VERSION", "1.0.0")

    # Server
    HOST = os.getenv("HOST", "0.0.0.0")
    PORT = int(os.getenv("PORT", "8000"))

    # Campaigns
    THREADS = int(os.getenv("THREADS", "1"))
    DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "20240611"))

    # Numerical policy
    QUADRATURE_NODES = int(os.getenv("QUADRATURE_NODES", "201"))
    DEGENERACY_FLOOR = float(os.getenv("DEGENERACY_FLOOR", "1e-14"))
    KINV_RESIDUAL_TOL = float(os.getenv("KINV_RESIDUAL_TOL", "1e-8"))
    FBM_JITTER = float(os.getenv("FBM_JITTER", "1e-12"))
    FBM_MAX_POINTS = int(os.getenv("FBM_MAX_POINTS", "4096"))
    REGIME_TOLERANCE = float(os.getenv("REGIME_TOLERANCE", "0.05"))
    DIVERGENCE_TOLERANCE = float(os.getenv("DIVERGENCE_TOLERANCE", "0.10"))

    # Paths
    BASE_DIR = os.path.dirname(os.path.abspath(__file__))
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", os.path.join(BASE_DIR, "runs"))
    CONFIG_DIR = os.getenv("CONFIG_DIR", os.path.join(BASE_DIR, "configs"))


settings = Settings()


def setup_logging(level: str | None = None) -> None:
    """Configure the tagged root logger once per process."""
    if level is None:
        level = "DEBUG" if settings.DEBUG else settings.LOG_LEVEL
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="[%(name)s] %(message)s",
    )
