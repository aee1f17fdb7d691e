#experiment.py
import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from src.exceptions.custom_exceptions import InvalidConfigException
from src.schemas.experiment import ExperimentConfig

logger = logging.getLogger(__name__)

SECTIONS = ("synth", "nuisance", "train", "sweep")


def parse_override(assignment: str) -> tuple[str, str, Any]:
    """Split 'section.key=value'; the value is read as a TOML literal, else kept as a string."""
    target, sep, raw = assignment.partition("=")
    section, dot, key = target.strip().partition(".")
    if not sep or not dot or not key:
        raise InvalidConfigException(f"override '{assignment}' must look like section.key=value", keys=[target])
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    merged = {section: dict(values) for section, values in raw.items()}
    for assignment in overrides:
        section, key, value = parse_override(assignment)
        merged.setdefault(section, {})[key] = value
    return merged


def _offending_keys(error: ValidationError) -> list[str]:
    keys = {".".join(str(part) for part in item["loc"]) for item in error.errors()}
    return sorted(key for key in keys if key)


def build_config(raw: dict) -> ExperimentConfig:
    unknown = [section for section in raw if section not in SECTIONS]
    if unknown:
        raise InvalidConfigException(f"unknown config sections: {', '.join(sorted(unknown))}", keys=sorted(unknown))
    try:
        return ExperimentConfig(**raw)
    except ValidationError as e:
        keys = _offending_keys(e)
        reasons = "; ".join(item["msg"] for item in e.errors())
        raise InvalidConfigException(f"invalid config ({', '.join(keys) or 'experiment'}): {reasons}", keys=keys) from e


def load_experiment(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as handle:
                raw = tomllib.load(handle)
        except FileNotFoundError as e:
            raise InvalidConfigException(f"config file '{path}' not found") from e
        except tomllib.TOMLDecodeError as e:
            raise InvalidConfigException(f"config file '{path}' is not valid TOML: {e}") from e
        logger.info(f"Loaded experiment config from {path}")
    return build_config(apply_overrides(raw, overrides))


def config_hash(config: ExperimentConfig) -> str:
    """Hash of everything that determines results; parallelism and output location are left out."""
    payload = config.model_dump(mode="json", exclude={"sweep": {"jobs", "output_dir"}})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
