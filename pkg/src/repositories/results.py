#results.py
import asyncio
import logging
from pathlib import Path
from typing import Sequence

import pandas as pd

from src.repositories.base import BaseRepository
from src.repositories.dataset import FLOAT_FORMAT

logger = logging.getLogger(__name__)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    frame = pd.DataFrame(list(rows), columns=list(columns) if columns else None)
    return frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


class ResultsRepository(BaseRepository):
    async def write_rows(self, name: str, rows: Sequence[dict], columns: Sequence[str] | None = None) -> Path:
        text = await asyncio.to_thread(rows_to_csv, rows, columns)
        target = await self.write_text(name, text)
        logger.info(f"Wrote {len(rows)} rows to {target}")
        return target

    async def write_report(self, name: str, payload: dict) -> Path:
        target = await self.write_json(name, payload)
        logger.info(f"Wrote {target}")
        return target

    async def read_rows(self, name: str) -> pd.DataFrame:
        return await asyncio.to_thread(pd.read_csv, self.path(name))
