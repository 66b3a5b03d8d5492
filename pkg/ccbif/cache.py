from __future__ import annotations
import hashlib
import json
import logging
import time
from pathlib import Path

logger = logging.getLogger(__name__)


class CacheConfig:
    """Results on disk keyed by command and configuration; ``ttl=None`` never expires."""

    def __init__(self, ttl=None, cache_dir=None):
        self.ttl = ttl
        self.cache_dir = Path(cache_dir) if cache_dir else Path.home() / ".ccbif" / "cache"
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _cache_key(self, command, config):
        canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
        key_str = f"{command}:{canonical}"
        return hashlib.md5(key_str.encode()).hexdigest()

    def _cache_path(self, command, config):
        key = self._cache_key(command, config)
        return self.cache_dir / f"{key}.json"

    def get(self, command, config):
        cache_path = self._cache_path(command, config)
        if not cache_path.exists():
            return None

        try:
            with cache_path.open("r") as f:
                cached = json.load(f)

            if self.ttl is not None:
                if time.time() - cached["timestamp"] > self.ttl:
                    cache_path.unlink(missing_ok=True)
                    return None

            logger.info("cache hit for %s (%s)", command, cache_path.name)
            return cached["result"]
        except (json.JSONDecodeError, KeyError, OSError) as exc:
            logger.warning("dropping unreadable cache entry %s: %s", cache_path.name, exc)
            cache_path.unlink(missing_ok=True)
            return None

    def set(self, command, config, result):
        cache_path = self._cache_path(command, config)
        cached = {
            "timestamp": time.time(),
            "command": command,
            "config": config,
            "result": result,
        }
        try:
            with cache_path.open("w") as f:
                json.dump(cached, f, sort_keys=True)
        except (OSError, TypeError) as exc:
            logger.warning("could not write cache entry %s: %s", cache_path.name, exc)
            cache_path.unlink(missing_ok=True)
