"""Filesystem episode store with atomic visibility.

Layout: ``episodes/<id>/payload.jsonl`` and ``episodes/<id>/COMPLETE``.  Both
files are written to a temporary name and renamed into place; the marker
holds the payload's sha256 so a truncated or corrupted upload is detectable.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from pathlib import Path

from fleetrl.envsim import Episode
from fleetrl.errors import ReliabilityError

MARKER = "COMPLETE"
PAYLOAD = "payload.jsonl"


def atomic_write(path: Path, data: bytes) -> None:
    """Write-temp-then-rename; the temp name is unique per thread."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class EpisodeStore:
    def __init__(self, root, *, max_retries: int = 6, backoff: float = 0.01):
        self.root = Path(root)
        self.dir = self.root / "episodes"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.max_retries, self.backoff = max_retries, backoff
        # fault injection: number of upcoming payload writes that raise OSError
        self.fail_next_writes = 0
        self._lock = threading.Lock()

    def _maybe_fail(self) -> None:
        with self._lock:
            if self.fail_next_writes > 0:
                self.fail_next_writes -= 1
                raise OSError("injected store write failure")

    def payload_path(self, episode_id: str) -> Path:
        return self.dir / episode_id / PAYLOAD

    def marker_path(self, episode_id: str) -> Path:
        return self.dir / episode_id / MARKER

    def _retry(self, fn):
        delay = self.backoff
        for attempt in range(self.max_retries + 1):
            try:
                return fn()
            except OSError:
                if attempt == self.max_retries:
                    raise
                time.sleep(delay)
                delay = min(delay * 2, 1.0)

    def put(self, ep: Episode, meta: dict | None = None) -> str:
        """Persist the payload, then the completion marker.  Returns the payload hash."""
        data = (ep.to_json() + "\n").encode()
        digest = sha256(data)

        def write_payload():
            self._maybe_fail()
            atomic_write(self.payload_path(ep.episode_id), data)

        self._retry(write_payload)
        marker = {"sha256": digest, "length": ep.length, "success": bool(ep.success),
                  "source": ep.source, "task_id": ep.task_id, "policy_version": ep.policy_version,
                  **(meta or {})}
        self._retry(lambda: atomic_write(self.marker_path(ep.episode_id), json.dumps(marker).encode()))
        return digest

    def is_complete(self, episode_id: str) -> bool:
        return self.marker_path(episode_id).exists()

    def marker(self, episode_id: str) -> dict:
        return json.loads(self.marker_path(episode_id).read_text())

    def verify(self, episode_id: str) -> bool:
        """Marker present, parseable, and matching the payload bytes."""
        try:
            m = self.marker(episode_id)
            return m["sha256"] == sha256(self.payload_path(episode_id).read_bytes())
        except (OSError, ValueError, KeyError):
            return False

    def get(self, episode_id: str) -> Episode:
        if not self.is_complete(episode_id):
            raise ReliabilityError(f"episode {episode_id} is not complete")
        return Episode.from_json(self.payload_path(episode_id).read_text())

    def complete_ids(self, prefix: str = "") -> list[str]:
        return sorted(p.parent.name for p in self.dir.glob(f"{prefix}*/{MARKER}"))

    def all_ids(self) -> list[str]:
        return sorted(p.name for p in self.dir.iterdir() if p.is_dir())
