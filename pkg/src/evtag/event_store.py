"""Append-only sequential record files with direct offset reads.

Binary layout (all integers little-endian)::

    file header   magic "EVST" | version u16 | flags u16            8 bytes
    record header total_length u32 | kind u8 | type_tag 4s |
                  run u32 | event u32 | payload_length u32 |
                  payload_crc32 u32                                 25 bytes
    payload       payload_length opaque bytes

``total_length`` always equals ``25 + payload_length``; the redundancy is
what lets :meth:`StoreReader.read_at` reject offsets that do not sit on a
record boundary.  Bit 0 of the file flags marks CRC-protected payloads; when
it is clear the CRC field is written as zero and never checked.
"""

from __future__ import annotations

import enum
import mmap
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

MAGIC = b"EVST"
VERSION = 1
FLAG_CRC = 0x1

FILE_HEADER = struct.Struct("<4sHH")
RECORD_HEADER = struct.Struct("<IB4sIIII")
FILE_HEADER_SIZE = FILE_HEADER.size
RECORD_HEADER_SIZE = RECORD_HEADER.size

DEFAULT_MAX_PAYLOAD = 1 << 20
U32_MAX = 0xFFFFFFFF


class RecordKind(enum.IntEnum):
    EVENT = 0
    NON_EVENT = 1


class StoreError(Exception):
    """Base class for event store failures."""


class StoreExistsError(StoreError):
    pass


class UnwritablePathError(StoreError):
    pass


class CorruptHeaderError(StoreError):
    pass


class TruncatedRecordError(StoreError):
    pass


class RecordBoundaryError(StoreError):
    pass


class ChecksumError(StoreError):
    pass


class PayloadTooLargeError(StoreError):
    pass


class InvalidRecordError(StoreError, ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    record_kind: RecordKind
    type_tag: str
    run: int
    event: int
    payload: bytes = b""

    @classmethod
    def event_record(cls, run: int, event: int, payload: bytes = b"", type_tag: str = "EVTF") -> "EventRecord":
        return cls(RecordKind.EVENT, type_tag, run, event, payload)

    @classmethod
    def non_event(cls, type_tag: str, payload: bytes = b"") -> "EventRecord":
        return cls(RecordKind.NON_EVENT, type_tag, 0, 0, payload)

    @property
    def is_event(self) -> bool:
        return self.record_kind == RecordKind.EVENT

    def validate(self, max_payload: int = DEFAULT_MAX_PAYLOAD) -> None:
        tag = self.type_tag.encode("ascii", errors="replace")
        if len(tag) != 4 or not tag.isascii() or not all(32 <= c < 127 for c in tag):
            raise InvalidRecordError(f"type_tag must be 4 printable ASCII characters, got {self.type_tag!r}")
        if self.record_kind == RecordKind.EVENT:
            if not (1 <= self.run <= U32_MAX and 1 <= self.event <= U32_MAX):
                raise InvalidRecordError(f"event record needs run, event >= 1 (got {self.run}, {self.event})")
        elif self.record_kind == RecordKind.NON_EVENT:
            if self.run != 0 or self.event != 0:
                raise InvalidRecordError("non-event records carry run = event = 0")
        else:  # pragma: no cover - enum guards this
            raise InvalidRecordError(f"unknown record kind {self.record_kind!r}")
        if len(self.payload) > max_payload:
            raise PayloadTooLargeError(f"payload of {len(self.payload)} bytes exceeds cap of {max_payload}")


class RecordLocation(NamedTuple):
    file_id: str
    offset: int


@dataclass(frozen=True)
class StoreConfig:
    max_payload: int = DEFAULT_MAX_PAYLOAD
    crc: bool = True

    def __post_init__(self) -> None:
        if not 0 <= self.max_payload <= U32_MAX - RECORD_HEADER_SIZE:
            raise ValueError(f"max_payload out of range: {self.max_payload}")


def _pack_header(record: EventRecord, crc: bool) -> bytes:
    payload = record.payload
    return RECORD_HEADER.pack(
        RECORD_HEADER_SIZE + len(payload),
        int(record.record_kind),
        record.type_tag.encode("ascii"),
        record.run,
        record.event,
        len(payload),
        zlib.crc32(payload) if crc else 0,
    )


class StoreWriter:
    """Single writer appending records at the end of a store file."""

    def __init__(self, path: Path, config: StoreConfig, file_id: str):
        self.path = path
        self.config = config
        self.file_id = file_id
        self._fh = open(path, "r+b")
        self._fh.seek(0, os.SEEK_END)
        self._end = self._fh.tell()
        self._committed = self._end
        self.records_written = 0

    @property
    def end_offset(self) -> int:
        return self._end

    @property
    def committed_offset(self) -> int:
        """Offset below which concurrent readers may safely read."""
        return self._committed

    def append(self, record: EventRecord) -> RecordLocation:
        record.validate(self.config.max_payload)
        offset = self._end
        header = _pack_header(record, self.config.crc)
        self._fh.write(header)
        self._fh.write(record.payload)
        self._end += len(header) + len(record.payload)
        self.records_written += 1
        return RecordLocation(self.file_id, offset)

    def flush(self) -> None:
        self._fh.flush()
        self._committed = self._end

    def close(self) -> None:
        if not self._fh.closed:
            self.flush()
            self._fh.close()

    def __enter__(self) -> "StoreWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def create_store(
    path: str | os.PathLike[str],
    config: StoreConfig | None = None,
    *,
    truncate: bool = False,
    file_id: str | None = None,
) -> StoreWriter:
    path = Path(path)
    config = config or StoreConfig()
    if path.exists() and not truncate:
        raise StoreExistsError(f"store already exists at {path} (pass truncate=True to overwrite)")
    try:
        with open(path, "wb") as fh:
            fh.write(FILE_HEADER.pack(MAGIC, VERSION, FLAG_CRC if config.crc else 0))
    except (PermissionError, IsADirectoryError, NotADirectoryError, FileNotFoundError) as exc:
        raise UnwritablePathError(f"unwritable path {path}: {exc}") from exc
    return StoreWriter(path, config, file_id or path.name)


@dataclass
class _Header:
    total_length: int
    kind: int
    type_tag: bytes
    run: int
    event: int
    payload_length: int
    crc: int

    @property
    def plausible(self) -> bool:
        return (
            self.total_length == RECORD_HEADER_SIZE + self.payload_length
            and self.kind in (RecordKind.EVENT, RecordKind.NON_EVENT)
            and all(32 <= c < 127 for c in self.type_tag)
            and ((self.kind == RecordKind.NON_EVENT) == (self.run == 0 and self.event == 0))
        )


class StoreReader:
    """Reader with an independent sequential cursor and direct offset reads.

    Both cursors work on one read-only memory map of the file.  ``bytes_read``
    counts every header and payload byte either cursor touches, so callers can
    assert that an operation never read the store.
    """

    def __init__(self, path: Path, file_id: str, crc: bool):
        self.path = path
        self.file_id = file_id
        self.crc = crc
        self.bytes_read = 0
        with open(path, "rb") as fh:
            self._mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        self.size = len(self._mm)
        self._pos = FILE_HEADER_SIZE

    # sequential cursor

    @property
    def position(self) -> int:
        return self._pos

    def rewind(self) -> None:
        self._pos = FILE_HEADER_SIZE

    def _header_at(self, offset: int) -> _Header | None:
        if offset >= self.size:
            return None
        if offset + RECORD_HEADER_SIZE > self.size:
            raise TruncatedRecordError(f"{self.file_id}: partial record header at offset {offset}")
        self.bytes_read += RECORD_HEADER_SIZE
        return _Header(*RECORD_HEADER.unpack_from(self._mm, offset))

    def _next_header(self) -> _Header | None:
        hdr = self._header_at(self._pos)
        if hdr is not None and not hdr.plausible:
            raise CorruptHeaderError(f"{self.file_id}: malformed record header at offset {self._pos}")
        return hdr

    def next_record(self) -> EventRecord | None:
        """Return the next record in file order, or None at end of store."""
        item = self.next_with_offset()
        return None if item is None else item[1]

    def next_with_offset(self) -> tuple[int, EventRecord] | None:
        start = self._pos
        hdr = self._next_header()
        if hdr is None:
            return None
        end = start + hdr.total_length
        if end > self.size:
            raise TruncatedRecordError(
                f"{self.file_id}: record at offset {start} truncated "
                f"({self.size - start - RECORD_HEADER_SIZE} of {hdr.payload_length} payload bytes)"
            )
        payload = self._mm[start + RECORD_HEADER_SIZE : end]
        self.bytes_read += len(payload)
        self._pos = end
        return start, self._decode(hdr, payload, start)

    def skip_record(self) -> tuple[int, int, int, int] | None:
        """Advance past one record reading only its header.

        Returns ``(offset, kind, run, event)`` or None at end of store.
        """
        start = self._pos
        hdr = self._next_header()
        if hdr is None:
            return None
        end = start + hdr.total_length
        if end > self.size:
            raise TruncatedRecordError(f"{self.file_id}: record at offset {start} runs past end of file")
        self._pos = end
        return start, hdr.kind, hdr.run, hdr.event

    def __iter__(self) -> Iterator[EventRecord]:
        while (item := self.next_with_offset()) is not None:
            yield item[1]

    def scan(self) -> Iterator[tuple[RecordLocation, EventRecord]]:
        """Iterate ``(location, record)`` pairs from the current position."""
        while (item := self.next_with_offset()) is not None:
            yield RecordLocation(self.file_id, item[0]), item[1]

    # direct cursor

    def read_at(self, location: RecordLocation | int) -> EventRecord:
        offset = location.offset if isinstance(location, RecordLocation) else int(location)
        if offset < FILE_HEADER_SIZE or offset + RECORD_HEADER_SIZE > self.size:
            raise RecordBoundaryError(f"{self.file_id}: offset {offset} outside record area (size {self.size})")
        hdr = self._header_at(offset)
        if not hdr.plausible:
            raise RecordBoundaryError(f"{self.file_id}: offset {offset} is not a record boundary")
        end = offset + hdr.total_length
        if end > self.size:
            raise TruncatedRecordError(f"{self.file_id}: record at offset {offset} runs past end of file")
        payload = self._mm[offset + RECORD_HEADER_SIZE : end]
        self.bytes_read += len(payload)
        return self._decode(hdr, payload, offset)

    def _decode(self, hdr: _Header, payload: bytes, offset: int) -> EventRecord:
        if self.crc and zlib.crc32(payload) != hdr.crc:
            raise ChecksumError(f"{self.file_id}: payload CRC mismatch for record at offset {offset}")
        return EventRecord(RecordKind(hdr.kind), hdr.type_tag.decode("ascii"), hdr.run, hdr.event, payload)

    def close(self) -> None:
        if not self._mm.closed:
            self._mm.close()

    def __enter__(self) -> "StoreReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_store(path: str | os.PathLike[str], *, file_id: str | None = None) -> StoreReader:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no store at {path}")
    with open(path, "rb") as fh:
        raw = fh.read(FILE_HEADER_SIZE)
    if len(raw) < FILE_HEADER_SIZE:
        raise CorruptHeaderError(f"{path}: file too short for a store header")
    magic, version, flags = FILE_HEADER.unpack(raw)
    if magic != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptHeaderError(f"{path}: unsupported store version {version}")
    return StoreReader(path, file_id or path.name, bool(flags & FLAG_CRC))
