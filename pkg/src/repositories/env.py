#env.py
import json
import logging
from pathlib import Path

from pydantic import ValidationError

from src.exceptions.custom_exceptions import InvalidInputException, ParseException
from src.models.policy import Policy, policy_adapter
from src.repositories.base import BaseRepository
from src.schemas.oracle import DiscreteEnv, OracleFixture
from src.schemas.synth import SynthEnv

logger = logging.getLogger(__name__)


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise InvalidInputException(f"file '{path}' not found") from e
    except json.JSONDecodeError as e:
        raise ParseException(f"'{path}' is not valid JSON: {e.msg}", row=e.lineno) from e


def load_policy(path: str | Path) -> Policy:
    """Policy spec file: a JSON object with a 'kind' tag and the variant's parameters."""
    try:
        return policy_adapter.validate_python(_read_json(Path(path)))
    except ValidationError as e:
        raise ParseException(f"invalid policy spec '{path}': {e.errors()[0]['msg']}") from e


def load_fixture(path: str | Path) -> OracleFixture:
    payload = _read_json(Path(path))
    payload.setdefault("name", Path(path).stem)
    try:
        return OracleFixture(**payload)
    except ValidationError as e:
        raise ParseException(f"invalid oracle fixture '{path}': {e.errors()[0]['msg']}") from e


def load_fixtures(directory: str | Path) -> list[OracleFixture]:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        logger.warning(f"No oracle fixtures found in {directory}")
    return [load_fixture(path) for path in paths]


def fixture_to_dict(fixture: OracleFixture) -> dict:
    return {
        "name": fixture.name,
        "expect": fixture.expect,
        "env": fixture.env.to_dict(),
        "target": fixture.target.tolist(),
        "delta": fixture.delta.tolist(),
    }


class EnvRepository(BaseRepository):
    async def save_synth_env(self, env: SynthEnv, name: str = "env.json") -> Path:
        return await self.write_json(name, env.to_dict())

    async def load_synth_env(self, name: str = "env.json") -> SynthEnv:
        return SynthEnv(**await self.read_json(name))

    async def save_discrete_env(self, env: DiscreteEnv, name: str) -> Path:
        return await self.write_json(name, env.to_dict())

    async def load_discrete_env(self, name: str) -> DiscreteEnv:
        return DiscreteEnv(**await self.read_json(name))

    async def save_fixture(self, fixture: OracleFixture) -> Path:
        return await self.write_json(f"{fixture.name}.json", fixture_to_dict(fixture))
