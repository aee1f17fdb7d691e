from pydantic import BaseModel as PydanticBaseModel, ConfigDict


class BaseSchema(PydanticBaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ArraySchema(PydanticBaseModel):
    """Immutable container for numpy-backed fields."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)
