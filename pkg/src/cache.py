import hashlib
import json
import os
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from src.logger import get_logger

logger = get_logger(__name__)


class ResponseCache:
    """
    Content-addressed store of raw backend responses, persisted between runs.

    One JSON file per (backend identity, prompt):
    ``{"prompt_hash", "identity", "response", "timestamp"}``.
    Reads need no lock; a per-key lock makes sure concurrent identical
    requests reach the backend only once. A key lock lives only while its
    entry is being computed.
    """

    def __init__(self, cache_dir: str | Path = ".cache/responses"):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._locks_guard = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(identity: str, prompt: str) -> str:
        return hashlib.sha256(f"{identity}\x00{prompt}".encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def get(self, identity: str, prompt: str) -> str | None:
        path = self._path(self.key(identity, prompt))
        if not path.exists():
            return None
        try:
            with open(path, "r", encoding="utf-8") as file:
                return json.load(file)["response"]
        except (json.JSONDecodeError, KeyError) as e:
            logger.error(f"✖ Ignoring corrupt cache entry {path.name}: {e}")
            return None

    def put(self, identity: str, prompt: str, response: str) -> None:
        key = self.key(identity, prompt)
        entry = {
            "prompt_hash": key,
            "identity": identity,
            "response": response,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        path = self._path(key)
        tmp_path = path.with_suffix(f".{threading.get_ident()}.tmp")
        with open(tmp_path, "w", encoding="utf-8") as file:
            json.dump(entry, file, indent=2, ensure_ascii=False)
        os.replace(tmp_path, path)

    def get_or_compute(self, identity: str, prompt: str, compute: Callable[[], str]) -> str:
        cached = self.get(identity, prompt)
        if cached is not None:
            self._count(hit=True)
            return cached

        key = self.key(identity, prompt)
        with self._locks_guard:
            lock = self._key_locks.setdefault(key, threading.Lock())
        with lock:
            # another worker may have filled it while we waited
            cached = self.get(identity, prompt)
            if cached is not None:
                self._count(hit=True)
                return cached
            try:
                response = compute()
                self.put(identity, prompt, response)
            finally:
                # later callers read the entry from disk and need no lock
                with self._locks_guard:
                    self._key_locks.pop(key, None)
            self._count(hit=False)
            return response

    def _count(self, hit: bool) -> None:
        with self._locks_guard:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    @property
    def pending_keys(self) -> int:
        with self._locks_guard:
            return len(self._key_locks)

    def __len__(self) -> int:
        return sum(1 for _ in self.cache_dir.glob("*.json"))
