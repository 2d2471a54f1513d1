"""Two-tier dataset namespace: a slow tier standing in for tape, a fast disk pool.

Datasets are addressed by name.  ``request`` stages a copy into the pool on
first use (after an optional artificial latency) and evicts unpinned files,
least recently accessed first, when the pool would overflow.  ``sweep``
drops unpinned files idle for longer than the eviction age.

The manifest is a tab separated text file, one dataset per line::

    name <TAB> slow_path <TAB> pinned(0/1) <TAB> last_access <TAB> fast_path or '-'
"""

from __future__ import annotations

import os
import shutil
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

DAY = 86400.0
MANIFEST_HEADER = "# evtag filestore manifest v1"


class FilestoreError(Exception):
    pass


class DuplicateNameError(FilestoreError):
    pass


class UnknownNameError(FilestoreError, KeyError):
    pass


class CapacityError(FilestoreError):
    pass


@dataclass(frozen=True)
class PoolConfig:
    capacity: int
    eviction_age: float = 3 * DAY
    latency: float = 0.0

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise ValueError("pool capacity must be positive")


@dataclass
class Dataset:
    name: str
    slow_path: Path
    pinned: bool = False
    last_access: float = 0.0
    fast_path: Path | None = None
    size: int = 0

    @property
    def staged(self) -> bool:
        return self.fast_path is not None


class Namespace:
    """Location-independent names over the slow tier and the disk pool."""

    def __init__(
        self,
        pool_dir: str | os.PathLike[str],
        config: PoolConfig,
        *,
        manifest: str | os.PathLike[str] | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.pool_dir = Path(pool_dir)
        self.pool_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.manifest = Path(manifest) if manifest else None
        self.clock = clock
        self.entries: dict[str, Dataset] = {}
        self.slow_bytes_read = 0
        self.evictions: list[str] = []
        self._lock = threading.RLock()
        if self.manifest and self.manifest.exists():
            self._load()

    # persistence

    def _load(self) -> None:
        for line in self.manifest.read_text().splitlines():
            if not line or line.startswith("#"):
                continue
            name, slow, pinned, last, fast = line.split("\t")
            slow_path = Path(slow)
            fast_path = None if fast == "-" else Path(fast)
            if fast_path is not None and not fast_path.exists():
                fast_path = None
            size = slow_path.stat().st_size if slow_path.exists() else 0
            self.entries[name] = Dataset(name, slow_path, pinned == "1", float(last), fast_path, size)

    def save(self) -> None:
        if self.manifest is None:
            return
        lines = [MANIFEST_HEADER]
        for d in self.entries.values():
            fast = str(d.fast_path) if d.fast_path else "-"
            lines.append(f"{d.name}\t{d.slow_path}\t{int(d.pinned)}\t{d.last_access!r}\t{fast}")
        tmp = self.manifest.with_suffix(self.manifest.suffix + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        os.replace(tmp, self.manifest)

    # queries

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> Dataset:
        try:
            return self.entries[name]
        except KeyError:
            raise UnknownNameError(f"no dataset named {name!r}") from None

    @property
    def staged_bytes(self) -> int:
        return sum(d.size for d in self.entries.values() if d.staged)

    def list(self) -> list[Dataset]:
        return sorted(self.entries.values(), key=lambda d: d.name)

    # operations

    def register(self, name: str, slow_path: str | os.PathLike[str], pinned: bool = False) -> None:
        if not name or name.startswith("/") or ".." in Path(name).parts:
            raise FilestoreError(f"invalid dataset name {name!r}")
        slow_path = Path(slow_path).resolve()
        with self._lock:
            if name in self.entries:
                raise DuplicateNameError(f"dataset {name!r} already registered")
            if not slow_path.is_file():
                raise FilestoreError(f"slow-tier file {slow_path} does not exist")
            self.entries[name] = Dataset(name, slow_path, pinned, self.clock(), None, slow_path.stat().st_size)
            self.save()

    def request(self, name: str) -> Path:
        with self._lock:
            d = self[name]
            now = self.clock()
            if d.staged:
                d.last_access = now
                self.save()
                return d.fast_path
            self._make_room(d)
            if self.config.latency > 0:
                time.sleep(self.config.latency)
            dest = self.pool_dir / name
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(d.slow_path, dest)
            self.slow_bytes_read += d.size
            d.fast_path = dest
            d.last_access = now
            self.save()
            return dest

    def _make_room(self, incoming: Dataset) -> None:
        free = self.config.capacity - self.staged_bytes
        if incoming.size <= free:
            return
        victims = sorted(
            (d for d in self.entries.values() if d.staged and not d.pinned),
            key=lambda d: (d.last_access, d.name),
        )
        if incoming.size > free + sum(v.size for v in victims):
            raise CapacityError(
                f"cannot stage {incoming.name} ({incoming.size} bytes): "
                f"pool capacity {self.config.capacity}, {self.staged_bytes - sum(v.size for v in victims)} bytes pinned"
            )
        for v in victims:
            if incoming.size <= free:
                break
            free += v.size
            self._evict(v)

    def _evict(self, d: Dataset) -> None:
        if d.fast_path is not None and d.fast_path.exists():
            d.fast_path.unlink()
        d.fast_path = None
        self.evictions.append(d.name)

    def sweep(self, now: float | None = None) -> list[str]:
        with self._lock:
            now = self.clock() if now is None else now
            gone = []
            for d in sorted(self.entries.values(), key=lambda d: (d.last_access, d.name)):
                if d.staged and not d.pinned and now - d.last_access > self.config.eviction_age:
                    self._evict(d)
                    gone.append(d.name)
            if gone:
                self.save()
            return gone


def open_namespace(root: str | os.PathLike[str], capacity: int | None = None, **kwargs) -> Namespace:
    """Namespace persisted under ``root`` (``manifest.tsv`` plus ``pool/``)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cap_file = root / "capacity"
    if capacity is None:
        capacity = int(cap_file.read_text()) if cap_file.exists() else 1 << 40
    cap_file.write_text(str(capacity))
    config = PoolConfig(capacity, kwargs.pop("eviction_age", 3 * DAY), kwargs.pop("latency", 0.0))
    return Namespace(root / "pool", config, manifest=root / "manifest.tsv", **kwargs)
