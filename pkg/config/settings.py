#settings.py
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field, model_validator
from typing import Literal, Optional


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        case_sensitive=False
    )

    ENVIRONMENT: Literal["development", "staging", "production"] = "development"

    LOG_LEVEL: Optional[str] = None

    OUTPUT_DIR: str = Field(default="results")
    JOBS: int = Field(default=1, ge=1)
    ORACLE_FIXTURES_DIR: str = Field(default="tests/fixtures/oracle")

    @model_validator(mode="after")
    def resolve_log_level(self):
        if self.LOG_LEVEL:
            self.LOG_LEVEL = self.LOG_LEVEL.upper()
            return self

        self.LOG_LEVEL = "WARNING" if self.is_production else "INFO"
        return self

    @property
    def is_development(self) -> bool:
        return self.ENVIRONMENT == "development"

    @property
    def is_production(self) -> bool:
        return self.ENVIRONMENT == "production"


settings = Settings()
