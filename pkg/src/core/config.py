from pathlib import Path
from pydantic_settings import BaseSettings
from functools import lru_cache

class Settings(BaseSettings):
    app_name: str = "GNPP Lab"
    data_dir: Path = Path("data")
    out_dir: Path = Path("runs")
    log_level: str = "INFO"

    # Training defaults for the small-dataset protocols
    seed: int = 0
    batch_size: int = 100
    momentum: float = 0.9
    weight_decay: float = 5e-4

    heatmap_std_factor: float = 0.25

    gradcheck_epsilon: float = 1e-5
    gradcheck_tolerance: float = 1e-4
    gradcheck_samples: int = 12

    class Config:
        env_file = ".env"
        env_prefix = "GNPP_"

@lru_cache()
def get_settings() -> Settings:
    return Settings()
