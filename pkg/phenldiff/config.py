from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    OUTPUT_ROOT: str = "runs"
    DEVICE: str = "cpu"
    LOG_LEVEL: str = "INFO"
    NUM_WORKERS: int = 0
    DETERMINISTIC: bool = True

    model_config = SettingsConfigDict(env_prefix="PHENLDIFF_", env_file=".env", extra="ignore")


settings = Settings()
