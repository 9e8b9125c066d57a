"""
Runtime settings loaded from the environment (.env supported)
"""
import logging
import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel, Field

load_dotenv()


class Settings(BaseModel):
    """Numerical floors and runtime knobs shared by every service"""

    variance_floor: float = Field(1e-6, gt=0)
    prob_clamp: float = Field(1e-6, gt=0, lt=0.5)
    propensity_clamp: float = Field(0.01, ge=0, lt=0.5)
    log_level: str = "INFO"
    jobs: int = Field(1, ge=1)
    report_dir: str = "reports"


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Read settings once; call get_settings.cache_clear() after changing env vars"""
    return Settings(
        variance_floor=float(os.getenv("PROXY_VARIANCE_FLOOR", "1e-6")),
        prob_clamp=float(os.getenv("PROXY_PROB_CLAMP", "1e-6")),
        propensity_clamp=float(os.getenv("PROXY_PROPENSITY_CLAMP", "0.01")),
        log_level=os.getenv("PROXY_LOG_LEVEL", "INFO"),
        jobs=int(os.getenv("PROXY_JOBS", "1")),
        report_dir=os.getenv("PROXY_REPORT_DIR", "reports"),
    )


def setup_logging(level: str = None) -> None:
    """Configure the root logger for CLI and server entry points"""
    level = level or get_settings().log_level
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
