import os
from functools import lru_cache
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# app/backend/core/config.py -> repo root is 3 levels up from "core"
BASE_DIR = Path(__file__).resolve().parents[3]
DEFAULT_DATA_DIR = BASE_DIR / "data"


class Settings(BaseSettings):
    # --- execution ---
    DCL_THREADS: int = Field(default=1, ge=1)     # потолок параллелизма воркеров
    DCL_DETERMINISTIC: bool = False               # упорядоченные редукции
    DCL_LOG_LEVEL: str = "INFO"
    DCL_PROGRESS: bool = True                     # tqdm-прогресс при обучении

    # --- data paths ---
    DATA_DIR: str = str(DEFAULT_DATA_DIR)
    MNIST_DIR: str = str(DEFAULT_DATA_DIR / "mnist")      # можно переопределить через .env
    DATASETS_DIR: str = str(DEFAULT_DATA_DIR / "datasets")
    RUNS_DIR: str = str(DEFAULT_DATA_DIR / "runs")

    # pydantic v2: конфиг модели
    model_config = SettingsConfigDict(
        env_file=".env",
        extra="ignore",   # игнорируем любые другие лишние ключи из .env
    )


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()


def force_deterministic() -> Settings:
    """Switch the process to ordered, single-worker reductions."""
    os.environ["DCL_DETERMINISTIC"] = "true"
    get_settings.cache_clear()
    return get_settings()
