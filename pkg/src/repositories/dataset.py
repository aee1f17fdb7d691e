#dataset.py
import asyncio
import logging
import re
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from src.exceptions.custom_exceptions import InvalidInputException, ParseException
from src.repositories.base import BaseRepository
from src.schemas.dataset import LaggedDataset

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
CURRENT_COLUMN = re.compile(r"^x_(\d+)$")
LAG_COLUMN = re.compile(r"^lag(.+)_(\d+)$")
REQUIRED_COLUMNS = ("action", "reward")
METADATA_PREFIX = "#"
METADATA_LINE = re.compile(r"^#\s*num_actions\s*=\s*(\d+)\s*$")


def dataset_columns(d: int, lag_labels: list[str], with_propensity: bool) -> list[str]:
    columns = [f"x_{j}" for j in range(d)]
    for label in lag_labels:
        columns.extend(f"lag{label}_{j}" for j in range(d))
    columns.extend(REQUIRED_COLUMNS)
    if with_propensity:
        columns.append("propensity")
    return columns


def _layout(header: list[str]) -> tuple[int, list[str]]:
    """Return (d, lag labels) from the header, checking every block has d ordered columns."""
    current = [int(CURRENT_COLUMN.match(c).group(1)) for c in header if CURRENT_COLUMN.match(c)]
    if not current:
        raise ParseException("no current-context columns", column="x_0")
    d = len(current)
    if sorted(current) != list(range(d)):
        raise ParseException(f"current-context columns must be x_0..x_{d - 1}", column="x_0")
    labels: list[str] = []
    indices: dict[str, list[int]] = {}
    for column in header:
        match = LAG_COLUMN.match(column)
        if match:
            label = match.group(1)
            if label not in indices:
                labels.append(label)
                indices[label] = []
            indices[label].append(int(match.group(2)))
    for label in labels:
        if sorted(indices[label]) != list(range(d)):
            raise ParseException(f"lag '{label}' must have columns lag{label}_0..lag{label}_{d - 1}", column=f"lag{label}_0")
    return d, labels


def _numeric_column(frame: pd.DataFrame, column: str, allow_missing: bool = False) -> np.ndarray:
    raw = frame[column].str.strip()
    values = pd.to_numeric(raw, errors="coerce")
    blank = (raw == "") if allow_missing else pd.Series(False, index=raw.index)
    invalid = values.isna() & ~blank
    if invalid.any():
        row = int(np.flatnonzero(invalid.to_numpy())[0])
        raise ParseException(f"non-numeric value '{frame[column].iloc[row]}'", row=row + 1, column=column)
    return values.to_numpy(dtype=float)


def _read_metadata(path: str | Path) -> tuple[Optional[int], int]:
    """Return (num_actions, lines to skip) from an optional leading '# num_actions=K' line."""
    with open(path, encoding="utf-8") as handle:
        first = handle.readline().strip()
    if not first.startswith(METADATA_PREFIX):
        return None, 0
    match = METADATA_LINE.match(first)
    if match is None or int(match.group(1)) < 1:
        raise ParseException(f"malformed metadata line '{first}'")
    return int(match.group(1)), 1


def load_csv(path: str | Path, num_actions: Optional[int] = None) -> LaggedDataset:
    """Read the dataset CSV.

    num_actions comes from the argument, then the file's metadata line, then max(action) + 1.
    """
    try:
        stored, skip = _read_metadata(path)
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skiprows=skip)
    except FileNotFoundError as e:
        raise InvalidInputException(f"dataset '{path}' not found") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ParseException(f"cannot read '{path}': {e}") from e
    header = list(frame.columns)
    for column in REQUIRED_COLUMNS:
        if column not in header:
            raise ParseException(f"missing required column '{column}'", column=column)
    if frame.shape[0] == 0:
        raise ParseException("dataset has no rows", row=1)
    d, labels = _layout(header)

    x = np.column_stack([_numeric_column(frame, f"x_{j}") for j in range(d)])
    lags = np.zeros((frame.shape[0], len(labels), d))
    for k, label in enumerate(labels):
        lags[:, k, :] = np.column_stack([_numeric_column(frame, f"lag{label}_{j}") for j in range(d)])
    actions = _numeric_column(frame, "action")
    fractional = np.flatnonzero((actions != np.round(actions)) | (actions < 0))
    if fractional.size:
        raise ParseException("action must be a nonnegative integer", row=int(fractional[0]) + 1, column="action")
    rewards = _numeric_column(frame, "reward")
    propensities = None
    if "propensity" in header:
        propensities = _numeric_column(frame, "propensity", allow_missing=True)
        outside = np.flatnonzero(~np.isnan(propensities) & ((propensities <= 0.0) | (propensities > 1.0)))
        if outside.size:
            raise ParseException("propensity must lie in (0, 1]", row=int(outside[0]) + 1, column="propensity")

    actions = actions.astype(np.int64)
    if num_actions is None:
        num_actions = stored
    count = num_actions if num_actions is not None else int(actions.max()) + 1
    too_large = np.flatnonzero(actions >= count)
    if too_large.size:
        raise ParseException(f"action exceeds {count - 1}", row=int(too_large[0]) + 1, column="action")
    logger.info(f"Loaded {frame.shape[0]} samples (d={d}, K={len(labels)}) from {path}")
    return LaggedDataset(
        x=x,
        x_lags=lags,
        actions=actions,
        rewards=rewards,
        num_actions=count,
        propensities=propensities,
        lag_labels=labels,
    )


def save_csv(dataset: LaggedDataset, path: str | Path) -> Path:
    with_propensity = dataset.propensities is not None
    columns = dataset_columns(dataset.d, dataset.lag_labels, with_propensity)
    blocks = [dataset.x] + [dataset.lag(k) for k in range(dataset.num_lags)]
    frame = pd.DataFrame(np.hstack(blocks), columns=columns[: dataset.d * (1 + dataset.num_lags)])
    frame["action"] = dataset.actions
    frame["reward"] = dataset.rewards
    if with_propensity:
        frame["propensity"] = dataset.propensities
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"{METADATA_PREFIX} num_actions={dataset.num_actions}\n")
        frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return target


class DatasetRepository(BaseRepository):
    async def load(self, name: str, num_actions: Optional[int] = None) -> LaggedDataset:
        return await asyncio.to_thread(load_csv, self.path(name), num_actions)

    async def save(self, dataset: LaggedDataset, name: str) -> Path:
        await self.ensure_root()
        return await asyncio.to_thread(save_csv, dataset, self.path(name))
