"""Tag database: per-run containers of fixed-layout tag records in a federation.

On-disk layout of a federation directory::

    catalog.txt      text catalog (files, containers, schema hash), replaced atomically
    schema.json      the schema the records were written with
    db0001.tdb ...   database files, each a header followed by containers

Database file header (28 bytes, little-endian)::

    magic "TAGD" | version u16 | schema_version u16 | schema_hash 16 bytes | record_size u32

Container::

    magic "CONT" | run u32 | n_records u32 | record_size u32      16 bytes
    slab         n_records * record_size bytes (schema dtype rows)
    footer       n_files u32 | (len u16, utf-8 file id) * n_files |
                 footer_length u32 | magic "TNOC"

The footer holds the event-store file ids that ``loc_file`` in each record
indexes into.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from . import query as q
from .event_directory import FetchErrors, encode_flags, read_event
from .event_store import EventRecord, RecordLocation, StoreError, StoreReader
from .schema import OFFLINE_GROUP, TagSchema, default_schema
from .synth import (
    TAG_MAP,
    PhysicsSummary,
    decode_summary,
    flag_fn as default_flag_fn,
    rule_holds,
    rule_mask,
    summary_row,
)

DB_MAGIC = b"TAGD"
DB_VERSION = 1
DB_HEADER = struct.Struct("<4sHH16sI")
CONT_HEADER = struct.Struct("<4sIII")
CONT_MAGIC = b"CONT"
FOOTER_MAGIC = b"TNOC"
CATALOG_VERSION = 1
DEFAULT_SIZE_CAP = 200_000_000


class TagDBError(Exception):
    pass


class DuplicateRunError(TagDBError):
    pass


class UnsortedTagsError(TagDBError, ValueError):
    pass


class ConsistencyError(TagDBError):
    pass


class SchemaMismatchError(ConsistencyError):
    pass


class ReadOnlyError(TagDBError):
    pass


# records

@dataclass(frozen=True)
class TagRecord:
    """One event's tag values; absent variables are simply not in ``values``."""

    run: int
    event: int
    location: RecordLocation
    values: Mapping[str, float] = field(default_factory=dict)
    bits: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def get(self, name: str):
        return self.values.get(name)

    @property
    def present(self) -> set[str]:
        return set(self.values) | set(self.bits)


class TagHit(NamedTuple):
    run: int
    event: int
    location: RecordLocation


@dataclass
class QueryStats:
    scanned: int = 0
    matched: int = 0
    variables: int = 0


def derive_tag(
    event: EventRecord,
    schema: TagSchema,
    flag_fn: Callable[[EventRecord], Sequence[bool]] = default_flag_fn,
    location: RecordLocation | None = None,
) -> TagRecord:
    """Fill a tag record from the physics summary carried in an event payload."""
    summary: PhysicsSummary = decode_summary(event.payload)
    values = {}
    for name, source, rule in TAG_MAP:
        if name in schema and rule_holds(rule, summary):
            values[name] = float(np.float32(getattr(summary, source)))
    bits = {g.name: (0,) * (g.width // 32) for g in schema.bitgroups}
    if OFFLINE_GROUP in schema:
        bits[OFFLINE_GROUP] = encode_flags(flag_fn(event)).words
    return TagRecord(event.run, event.event, location or RecordLocation("", 0), values, bits)


def event_values(event: EventRecord, names: Iterable[str]) -> TagRecord:
    """Tag record holding only ``names``, read straight off the event payload.

    This is what an analysis job does when it has to test a value predicate
    on every event itself.
    """
    row = summary_row(event.payload)
    wanted = set(names)
    values = {}
    for name, source, rule in TAG_MAP:
        if name in wanted and rule_mask(rule, row):
            values[name] = float(row[source])
    bits = {}
    if OFFLINE_GROUP in wanted:
        bits[OFFLINE_GROUP] = tuple(int(w) for w in row["flags"])
    return TagRecord(event.run, event.event, RecordLocation("", 0), values, bits)


def summaries_to_array(
    rows: np.ndarray,
    schema: TagSchema,
    run: int,
    events: np.ndarray,
    loc_file: np.ndarray | int,
    loc_offset: np.ndarray,
) -> np.ndarray:
    """Vectorised equivalent of :func:`derive_tag` for a whole run of summaries."""
    n = len(rows)
    arr = np.zeros(n, dtype=schema.dtype)
    arr["run"] = run
    arr["event"] = events
    arr["loc_file"] = loc_file
    arr["loc_offset"] = loc_offset
    presence = np.zeros((n, schema.presence_bytes), dtype=np.uint8)
    for name, source, rule in TAG_MAP:
        if name not in schema:
            continue
        on = rule_mask(rule, rows)
        arr[name] = np.where(on, rows[source], 0)
        idx = schema.index[name]
        presence[:, idx >> 3] |= on.astype(np.uint8) << np.uint8(idx & 7)
    for g in schema.bitgroups:
        idx = schema.index[g.name]
        presence[:, idx >> 3] |= np.uint8(1 << (idx & 7))
    if OFFLINE_GROUP in schema:
        arr[OFFLINE_GROUP] = rows["flags"]
    arr["presence"] = presence
    return arr


def records_to_array(records: Sequence[TagRecord], schema: TagSchema) -> tuple[np.ndarray, list[str]]:
    files: dict[str, int] = {}
    arr = np.zeros(len(records), dtype=schema.dtype)
    for i, rec in enumerate(records):
        row = arr[i]
        row["run"] = rec.run
        row["event"] = rec.event
        row["loc_file"] = files.setdefault(rec.location.file_id, len(files))
        row["loc_offset"] = rec.location.offset
        pres = row["presence"]
        for name, value in rec.values.items():
            if value is None:
                continue
            desc = schema[name]
            if desc.is_bitgroup:
                raise TagDBError(f"{name} is a flag group; put it in bits")
            row[name] = value
            idx = schema.index[name]
            pres[idx >> 3] |= 1 << (idx & 7)
        for name, words in rec.bits.items():
            if not schema[name].is_bitgroup:
                raise TagDBError(f"{name} is not a flag group")
            row[name] = words
            idx = schema.index[name]
            pres[idx >> 3] |= 1 << (idx & 7)
    return arr, list(files)


def row_to_record(row: np.void, schema: TagSchema, file_ids: Sequence[str]) -> TagRecord:
    pres = row["presence"]
    values, bits = {}, {}
    for idx, v in enumerate(schema.variables):
        if not (pres[idx >> 3] >> (idx & 7)) & 1:
            continue
        if v.is_bitgroup:
            bits[v.name] = tuple(int(w) for w in row[v.name])
        elif v.width == 1:
            values[v.name] = float(row[v.name]) if v.kind == "float32" else int(row[v.name])
        else:
            values[v.name] = tuple(row[v.name].tolist())
    loc = RecordLocation(file_ids[int(row["loc_file"])], int(row["loc_offset"]))
    return TagRecord(int(row["run"]), int(row["event"]), loc, values, bits)


# federation

@dataclass(frozen=True)
class ContainerRef:
    run: int
    db_file: str
    index: int
    offset: int
    length: int
    n_records: int


@dataclass
class DbFile:
    file_id: str
    size: int
    schema_version: int


@dataclass(frozen=True)
class ExportTable:
    columns: tuple[str, ...]
    rows: list[tuple]

    def __len__(self) -> int:
        return len(self.rows)

    def to_text(self, delimiter: str = ",", missing: str = "NA") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([missing if v is None else _fmt(v) for v in row])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _container_bytes(arr: np.ndarray, file_ids: Sequence[str], run: int, record_size: int) -> bytes:
    footer = bytearray(struct.pack("<I", len(file_ids)))
    for fid in file_ids:
        raw = fid.encode()
        footer += struct.pack("<H", len(raw)) + raw
    footer += struct.pack("<I", len(footer) + 8) + FOOTER_MAGIC
    return CONT_HEADER.pack(CONT_MAGIC, run, len(arr), record_size) + arr.tobytes() + bytes(footer)


def _parse_footer(buf: memoryview, start: int) -> list[str]:
    (n,) = struct.unpack_from("<I", buf, start)
    pos = start + 4
    out = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        out.append(bytes(buf[pos + 2 : pos + 2 + ln]).decode())
        pos += 2 + ln
    if bytes(buf[pos + 4 : pos + 8]) != FOOTER_MAGIC:
        raise ConsistencyError("container footer is corrupt")
    return out


class Federation:
    """Catalog-coordinated set of size-capped database files, one container per run."""

    def __init__(self, path: Path, schema: TagSchema, size_cap: int, writable: bool):
        self.path = path
        self.schema = schema
        self.size_cap = size_cap
        self.writable = writable
        self.db_files: dict[str, DbFile] = {}
        self.containers: dict[int, ContainerRef] = {}
        self._handles: dict[str, object] = {}
        self._buffer = bytearray()
        self.bytes_read = 0

    # catalog

    @property
    def catalog_path(self) -> Path:
        return self.path / "catalog.txt"

    def _catalog_text(self) -> str:
        lines = [
            "# evtag federation catalog",
            f"version {CATALOG_VERSION}",
            f"schema {self.schema.hash} {self.schema.version}",
            f"size_cap {self.size_cap}",
        ]
        for f in self.db_files.values():
            lines.append(f"dbfile {f.file_id} {f.size} {f.schema_version}")
        for c in sorted(self.containers.values(), key=lambda c: c.run):
            lines.append(f"container {c.run} {c.db_file} {c.index} {c.offset} {c.length} {c.n_records}")
        return "\n".join(lines) + "\n"

    def _write_catalog(self) -> None:
        tmp = self.path / "catalog.txt.tmp"
        with open(tmp, "w") as fh:
            fh.write(self._catalog_text())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.catalog_path)

    @property
    def runs(self) -> list[int]:
        return sorted(self.containers)

    @property
    def n_records(self) -> int:
        return sum(c.n_records for c in self.containers.values())

    def lookup(self, run: int) -> ContainerRef:
        try:
            return self.containers[run]
        except KeyError:
            raise KeyError(f"run {run} not in federation") from None

    def containers_in(self, run_range: tuple[int, int] | None = None) -> list[ContainerRef]:
        refs = sorted(self.containers.values(), key=lambda c: c.run)
        if run_range is not None:
            lo, hi = run_range
            refs = [c for c in refs if lo <= c.run <= hi]
        return refs

    # reading

    def _handle(self, file_id: str):
        fh = self._handles.get(file_id)
        if fh is None:
            fh = self._handles[file_id] = open(self.path / file_id, "rb")
        return fh

    def read_container(self, ref: ContainerRef | int, *, reuse_buffer: bool = False) -> tuple[np.ndarray, list[str]]:
        """Return the container's record slab and its event-store file ids.

        With ``reuse_buffer`` the slab lives in a buffer shared by later
        reads, so it is only valid until the next call.
        """
        if not isinstance(ref, ContainerRef):
            ref = self.lookup(ref)
        fh = self._handle(ref.db_file)
        fh.seek(ref.offset)
        if reuse_buffer:
            if len(self._buffer) < ref.length:
                self._buffer = bytearray(ref.length)
            buf = memoryview(self._buffer)[: ref.length]
        else:
            buf = bytearray(ref.length)
        got = fh.readinto(buf)
        self.bytes_read += got
        if got != ref.length:
            raise ConsistencyError(f"{ref.db_file}: container for run {ref.run} is truncated")
        magic, run, n, rsize = CONT_HEADER.unpack_from(buf, 0)
        if magic != CONT_MAGIC or run != ref.run or n != ref.n_records or rsize != self.schema.record_size:
            raise ConsistencyError(f"{ref.db_file}: container header mismatch for run {ref.run}")
        arr = np.frombuffer(buf, self.schema.dtype, count=n, offset=CONT_HEADER.size)
        file_ids = _parse_footer(memoryview(buf), CONT_HEADER.size + n * rsize)
        return arr, file_ids

    def records(self, run: int) -> list[TagRecord]:
        arr, file_ids = self.read_container(run)
        return [row_to_record(row, self.schema, file_ids) for row in arr]

    def iter_records(self) -> Iterator[TagRecord]:
        for run in self.runs:
            yield from self.records(run)

    def _masks(
        self, ast: q.Node, run_range: tuple[int, int] | None, stats: QueryStats | None
    ) -> Iterator[tuple[ContainerRef, np.ndarray, np.ndarray, list[str]]]:
        mask_fn = q.compile_mask(ast, self.schema)
        if stats is not None:
            stats.variables = q.count_variables(ast)
        for ref in self.containers_in(run_range):
            arr, file_ids = self.read_container(ref, reuse_buffer=True)
            mask = mask_fn(arr)
            if stats is not None:
                stats.scanned += len(arr)
                stats.matched += int(np.count_nonzero(mask))
            yield ref, arr, mask, file_ids

    def scan(
        self,
        ast: q.Node,
        run_range: tuple[int, int] | None = None,
        stats: QueryStats | None = None,
    ) -> Iterator[tuple[ContainerRef, np.ndarray, list[str]]]:
        """Yield ``(container, matching rows, file ids)`` per container, in run order."""
        for ref, arr, mask, file_ids in self._masks(ast, run_range, stats):
            yield ref, arr[mask], file_ids

    def count(self, ast: q.Node, run_range: tuple[int, int] | None = None) -> QueryStats:
        stats = QueryStats()
        for _ in self._masks(ast, run_range, stats):
            pass
        return stats

    def query(
        self,
        ast: q.Node,
        run_range: tuple[int, int] | None = None,
        stats: QueryStats | None = None,
    ) -> list[TagHit]:
        hits = []
        for _, arr, mask, file_ids in self._masks(ast, run_range, stats):
            cols = [arr[c][mask].tolist() for c in ("run", "event", "loc_file", "loc_offset")]
            hits += [
                TagHit(r, e, RecordLocation(file_ids[f], o)) for r, e, f, o in zip(*cols)
            ]
        return hits

    def export_columns(self, variables: Sequence[str], ast: q.Node = q.TRUE) -> ExportTable:
        cols = [v for v in variables if v not in ("run", "event")]
        for v in cols:
            if v not in self.schema:
                raise KeyError(f"unknown variable {v!r}")
        columns = ("run", "event", *cols)
        out = []
        for _, rows, _ in self.scan(ast):
            if not len(rows):
                continue
            pres = rows["presence"]
            series = []
            for v in cols:
                desc = self.schema[v]
                idx = self.schema.index[v]
                present = ((pres[:, idx >> 3] >> (idx & 7)) & 1).astype(bool).tolist()
                if desc.is_bitgroup:
                    vals = [" ".join(f"{w:08X}" for w in ws) for ws in rows[v].tolist()]
                elif desc.width > 1:
                    vals = [tuple(w) for w in rows[v].tolist()]
                else:
                    vals = rows[v].tolist()
                series.append([x if p else None for x, p in zip(vals, present)])
            for i, (r, e) in enumerate(zip(rows["run"].tolist(), rows["event"].tolist())):
                out.append((r, e, *(s[i] for s in series)))
        return ExportTable(columns, out)

    # writing

    def _require_writable(self) -> None:
        if not self.writable:
            raise ReadOnlyError("federation opened read-only")

    def ingest_run(
        self,
        run: int,
        tags: Sequence[TagRecord] | np.ndarray,
        file_ids: Sequence[str] | None = None,
    ) -> ContainerRef:
        """Store all tag records of one run as a new container.

        ``tags`` is either a list of :class:`TagRecord` or a structured array in
        the schema layout together with the ``file_ids`` its ``loc_file``
        column indexes.
        """
        self._require_writable()
        if run in self.containers:
            raise DuplicateRunError(f"run {run} already in federation")
        if isinstance(tags, np.ndarray):
            if tags.dtype != self.schema.dtype:
                raise TagDBError("record array does not match the federation schema")
            arr, file_ids = tags, list(file_ids or [])
        else:
            arr, file_ids = records_to_array(tags, self.schema)
        if len(arr):
            if np.any(arr["run"] != run):
                raise TagDBError(f"tag records for run {run} carry other run numbers")
            ev = arr["event"].astype(np.int64)
            if np.any(np.diff(ev) <= 0):
                raise UnsortedTagsError(f"events of run {run} are not strictly increasing")
            if len(file_ids) <= int(arr["loc_file"].max()):
                raise TagDBError("loc_file index outside the file id table")

        blob = _container_bytes(arr, file_ids, run, self.schema.record_size)
        current = list(self.db_files.values())[-1] if self.db_files else None
        if current is None or current.size + len(blob) > self.size_cap:
            current = self._new_db_file()
        path = self.path / current.file_id
        with open(path, "r+b") as fh:
            fh.truncate(current.size)  # drop bytes left by an interrupted ingest
            fh.seek(current.size)
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        index = sum(1 for c in self.containers.values() if c.db_file == current.file_id)
        ref = ContainerRef(run, current.file_id, index, current.size, len(blob), len(arr))
        current.size += len(blob)
        self.containers[run] = ref
        self._drop_handle(current.file_id)
        self._write_catalog()
        return ref

    def _new_db_file(self) -> DbFile:
        file_id = f"db{len(self.db_files) + 1:04d}.tdb"
        header = DB_HEADER.pack(
            DB_MAGIC, DB_VERSION, self.schema.version, bytes.fromhex(self.schema.hash), self.schema.record_size
        )
        with open(self.path / file_id, "wb") as fh:
            fh.write(header)
        db = DbFile(file_id, len(header), self.schema.version)
        self.db_files[file_id] = db
        return db

    def _drop_handle(self, file_id: str) -> None:
        fh = self._handles.pop(file_id, None)
        if fh is not None:
            fh.close()

    def update_columns(
        self,
        runs: Iterable[int],
        variables: Sequence[str],
        updater: Callable[[TagRecord], Mapping[str, object] | object],
    ) -> int:
        """Rewrite only the named variables of every record in ``runs``, in place.

        ``updater`` returns a mapping ``name -> new value`` (``None`` marks the
        value missing); with a single variable it may return the bare value.
        Keys it leaves out keep their old value.
        """
        self._require_writable()
        variables = list(variables)
        for v in variables:
            if v not in self.schema:
                raise KeyError(f"unknown variable {v!r}")
        runs = list(runs)
        refs = [self.lookup(r) for r in runs]
        count = 0
        for ref in refs:
            self._drop_handle(ref.db_file)
            arr, file_ids = self.read_container(ref)
            self._drop_handle(ref.db_file)
            if not len(arr):
                continue
            mm = np.memmap(
                self.path / ref.db_file,
                dtype=self.schema.dtype,
                mode="r+",
                offset=ref.offset + CONT_HEADER.size,
                shape=(ref.n_records,),
            )
            try:
                for i in range(len(arr)):
                    new = updater(row_to_record(arr[i], self.schema, file_ids))
                    if not isinstance(new, Mapping):
                        if len(variables) != 1:
                            raise TagDBError("updater must return a mapping when updating several variables")
                        new = {variables[0]: new}
                    for name, value in new.items():
                        if name not in variables:
                            raise TagDBError(f"updater touched {name!r}, which is not being updated")
                        self._write_value(mm, i, name, value)
                    count += 1
                mm.flush()
            finally:
                del mm
        return count

    def _write_value(self, mm: np.memmap, i: int, name: str, value) -> None:
        idx = self.schema.index[name]
        byte, bit = idx >> 3, 1 << (idx & 7)
        pres = int(mm["presence"][i, byte])
        if value is None:
            if pres & bit:
                mm["presence"][i, byte] = pres & ~bit
            return
        if mm[name][i].tobytes() != np.asarray(value, dtype=mm.dtype[name].base).tobytes():
            mm[name][i] = value
        if not pres & bit:
            mm["presence"][i, byte] = pres | bit

    def close(self) -> None:
        for fid in list(self._handles):
            self._drop_handle(fid)

    def __enter__(self) -> "Federation":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def create_federation(
    path: str | os.PathLike[str],
    schema: TagSchema | None = None,
    size_cap: int = DEFAULT_SIZE_CAP,
) -> Federation:
    path = Path(path)
    schema = schema or default_schema()
    if (path / "catalog.txt").exists():
        raise TagDBError(f"a federation already exists at {path}")
    if size_cap <= 0:
        raise ValueError("size_cap must be positive")
    path.mkdir(parents=True, exist_ok=True)
    (path / "schema.json").write_text(schema.to_json())
    fed = Federation(path, schema, size_cap, writable=True)
    fed._write_catalog()
    return fed


def open_federation(path: str | os.PathLike[str], *, writable: bool = False) -> Federation:
    path = Path(path)
    cat = path / "catalog.txt"
    if not cat.exists():
        raise ConsistencyError(f"no catalog at {cat}")
    schema = TagSchema.from_json((path / "schema.json").read_text())
    schema_hash = None
    size_cap = DEFAULT_SIZE_CAP
    db_files: dict[str, DbFile] = {}
    containers: dict[int, ContainerRef] = {}
    for lineno, line in enumerate(cat.read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        if key == "version":
            if int(rest[0]) != CATALOG_VERSION:
                raise ConsistencyError(f"unsupported catalog version {rest[0]}")
        elif key == "schema":
            schema_hash = rest[0]
        elif key == "size_cap":
            size_cap = int(rest[0])
        elif key == "dbfile":
            db_files[rest[0]] = DbFile(rest[0], int(rest[1]), int(rest[2]))
        elif key == "container":
            run, fid, index, off, length, n = rest
            if int(run) in containers:
                raise ConsistencyError(f"catalog line {lineno}: run {run} listed twice")
            containers[int(run)] = ContainerRef(int(run), fid, int(index), int(off), int(length), int(n))
        else:
            raise ConsistencyError(f"catalog line {lineno}: unknown entry {key!r}")
    if schema_hash != schema.hash:
        raise SchemaMismatchError("schema.json does not match the catalog's schema hash")
    for f in db_files.values():
        fp = path / f.file_id
        if not fp.exists():
            raise ConsistencyError(f"database file {f.file_id} referenced by the catalog is missing")
        with open(fp, "rb") as fh:
            raw = fh.read(DB_HEADER.size)
        if len(raw) < DB_HEADER.size:
            raise ConsistencyError(f"database file {f.file_id} has no header")
        magic, _, version, digest, rsize = DB_HEADER.unpack(raw)
        if magic != DB_MAGIC:
            raise ConsistencyError(f"database file {f.file_id} has bad magic")
        if digest.hex() != schema.hash or version != f.schema_version or rsize != schema.record_size:
            raise SchemaMismatchError(f"database file {f.file_id} was written with a different schema")
        if fp.stat().st_size < f.size:
            raise ConsistencyError(f"database file {f.file_id} is shorter than the catalog records")
    for c in containers.values():
        if c.db_file not in db_files:
            raise ConsistencyError(f"run {c.run} points at unknown database file {c.db_file}")
    fed = Federation(path, schema, size_cap, writable)
    fed.db_files = db_files
    fed.containers = containers
    return fed


def fetch_events(
    hits: Iterable[TagHit],
    stores: Mapping[str, StoreReader] | Callable[[str], StoreReader],
    errors: FetchErrors | None = None,
) -> Iterator[EventRecord]:
    """Read the events behind tag hits, in hit order."""
    resolve = stores if callable(stores) else stores.__getitem__
    for hit in hits:
        try:
            reader = resolve(hit.location.file_id)
            yield read_event(reader, hit.location.offset, hit.run, hit.event)
        except (StoreError, KeyError) as exc:
            if errors is None:
                raise
            errors.add(hit, exc)


# Function-style entry points mirroring the Federation methods.
ingest_run = Federation.ingest_run
query = Federation.query
update_columns = Federation.update_columns
export_columns = Federation.export_columns
