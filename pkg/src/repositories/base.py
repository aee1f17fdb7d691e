import asyncio
import json
from pathlib import Path
from typing import Any


class BaseRepository:
    """Files under one root directory, written off the event loop."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    async def ensure_root(self) -> Path:
        await asyncio.to_thread(self.root.mkdir, parents=True, exist_ok=True)
        return self.root

    async def write_text(self, name: str, text: str) -> Path:
        await self.ensure_root()
        target = self.path(name)
        await asyncio.to_thread(target.write_text, text, encoding="utf-8")
        return target

    async def read_text(self, name: str) -> str:
        return await asyncio.to_thread(self.path(name).read_text, encoding="utf-8")

    async def write_json(self, name: str, payload: Any) -> Path:
        return await self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    async def read_json(self, name: str) -> Any:
        return json.loads(await self.read_text(name))

    async def exists(self, name: str) -> bool:
        return await asyncio.to_thread(self.path(name).exists)
