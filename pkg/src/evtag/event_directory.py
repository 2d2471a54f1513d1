"""Event directories: per-event index rows of 128 packed flags plus store offsets.

The text format has three tables, each opened by ``TABLE <id>`` and closed
by ``END TABLE``; rows are comma separated and end with ``;``::

    TABLE 10   files      ID, 'name', '', '', '', 'options';
    TABLE 11   non-event  ID, 'name', OFF;
    TABLE 12   events     ID, 'TYPE', RUN, EVENT, X'w0', X'w1', X'w2', X'w3', OFF;

``/* ... */`` comments are ignored.  Hex words may have 1 to 8 digits and are
always written back with 8.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .event_store import EventRecord, RecordKind, StoreError, StoreReader
from .query import And, Compare, ConstFalse, ConstTrue, FlagTest, Node, Not, Or, TRUE, walk
from .schema import OFFLINE_GROUP

NFLAGS = 128
WORD_MASK = 0xFFFFFFFF


class DirectoryError(ValueError):
    pass


class DirectoryParseError(DirectoryError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class StaleOffsetError(StoreError):
    pass


@dataclass(frozen=True)
class FlagWords:
    words: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self) -> None:
        if len(self.words) != 4 or any(not 0 <= w <= WORD_MASK for w in self.words):
            raise ValueError(f"need four unsigned 32-bit words, got {self.words!r}")

    def __getitem__(self, i: int) -> int:
        return self.words[i]

    def __iter__(self):
        return iter(self.words)

    def test(self, bit: int) -> bool:
        return bool((self.words[bit >> 5] >> (bit & 31)) & 1)

    def as_int(self) -> int:
        return sum(w << (32 * i) for i, w in enumerate(self.words))

    @classmethod
    def from_int(cls, value: int) -> "FlagWords":
        return cls(tuple((value >> (32 * i)) & WORD_MASK for i in range(4)))


def encode_flags(bits: Sequence[bool]) -> FlagWords:
    if len(bits) != NFLAGS:
        raise ValueError(f"expected {NFLAGS} flags, got {len(bits)}")
    words = [0, 0, 0, 0]
    for i, b in enumerate(bits):
        if b:
            words[i >> 5] |= 1 << (i & 31)
    return FlagWords(tuple(words))


def decode_flags(words: FlagWords | Sequence[int]) -> list[bool]:
    words = tuple(words)
    return [bool((words[i >> 5] >> (i & 31)) & 1) for i in range(NFLAGS)]


@dataclass(frozen=True)
class FileRef:
    id: int
    name: str
    options: str = ""


@dataclass(frozen=True)
class MetaRef:
    id: int
    name: str
    offset: int


@dataclass(frozen=True)
class DirEntry:
    seq_id: int
    type_tag: str
    run: int
    event: int
    flags: FlagWords
    offset: int


@dataclass(frozen=True)
class EventDirectory:
    file_refs: tuple[FileRef, ...] = ()
    meta_refs: tuple[MetaRef, ...] = ()
    entries: tuple[DirEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    @cached_property
    def flag_array(self) -> np.ndarray:
        """(N, 4) uint32 array of flag words, in entry order."""
        arr = np.zeros((len(self.entries), 4), dtype=np.uint32)
        for i, e in enumerate(self.entries):
            arr[i] = e.flags.words
        return arr

    @property
    def store_name(self) -> str | None:
        return self.file_refs[0].name if self.file_refs else None


# building

def build_directory(
    reader: StoreReader,
    flag_fn: Callable[[EventRecord], Sequence[bool]],
    *,
    options: str = "",
) -> EventDirectory:
    metas: list[MetaRef] = []
    entries: list[DirEntry] = []
    seen: set[tuple[int, int]] = set()
    for loc, rec in reader.scan():
        if rec.record_kind == RecordKind.NON_EVENT:
            metas.append(MetaRef(len(metas) + 1, rec.type_tag, loc.offset))
            continue
        key = (rec.run, rec.event)
        if key in seen:
            raise DirectoryError(f"duplicate event run={rec.run} event={rec.event} at offset {loc.offset}")
        seen.add(key)
        flags = encode_flags(flag_fn(rec))
        entries.append(DirEntry(len(entries) + 1, rec.type_tag, rec.run, rec.event, flags, loc.offset))
    return EventDirectory((FileRef(1, reader.file_id, options),), tuple(metas), tuple(entries))


# text format

def _q(text: str) -> str:
    return "'" + text.replace("'", "''") + "'"


def serialize_directory(directory: EventDirectory) -> str:
    out = ["TABLE 10", " /* ZEDFILEX (ID, Name(4), Options) */"]
    for f in directory.file_refs:
        out.append(f" {f.id}, {_q(f.name)}, '' , '' , '' , ")
        out.append(f"    {_q(f.options)};")
    out += [" END TABLE", "", " TABLE 11", " /* ZEDMETAX (ID, Name, OFF) */"]
    for m in directory.meta_refs:
        out.append(f" {m.id}, {_q(m.name):<13}, {m.offset:5d};")
    out += [" END TABLE", "", " TABLE 12"]
    out.append(" /* ZEDIRX (ID, GAFTyp, Nr1, Nr2, TStam11, TStam12, TStam21, TStam22, OFF) */")
    for e in directory.entries:
        hexes = ", ".join(f"X'{w:08X}'" for w in e.flags.words)
        out.append(f"    {e.seq_id}, {_q(e.type_tag)}, {e.run:5d}, {e.event:4d}, {hexes}, {e.offset};")
    out += [" END TABLE", ""]
    return "\n".join(out)


_LEX = re.compile(
    r"""
    (?P<nl>\n)
  | (?P<ws>[ \t\r\f]+)
  | (?P<comment>/\*.*?\*/)
  | (?P<hex>[Xx]'(?P<hexdigits>[0-9A-Fa-f]*)')
  | (?P<str>'(?P<strbody>(?:[^']|'')*)')
  | (?P<int>\d+)
  | (?P<kw>END\s+TABLE|TABLE)
  | (?P<punct>[,;])
    """,
    re.VERBOSE | re.DOTALL,
)

TABLE_FILES, TABLE_META, TABLE_DIR = 10, 11, 12


def _lex(text: str) -> Iterator[tuple[str, object, int]]:
    pos, line = 0, 1
    while pos < len(text):
        m = _LEX.match(text, pos)
        if m is None:
            snippet = text[pos : pos + 20].split("\n", 1)[0]
            raise DirectoryParseError(f"unexpected text {snippet!r}", line)
        kind = m.lastgroup
        if kind == "hexdigits":  # pragma: no cover - inner group never wins lastgroup
            kind = "hex"
        tok_line = line
        line += m.group().count("\n")
        pos = m.end()
        if kind in ("nl", "ws", "comment"):
            continue
        if m.group("hex") is not None:
            digits = m.group("hexdigits")
            if not 1 <= len(digits) <= 8:
                raise DirectoryParseError(f"hex field needs 1-8 digits, got {m.group()!r}", tok_line)
            yield "hex", int(digits, 16), tok_line
        elif m.group("str") is not None:
            yield "str", m.group("strbody").replace("''", "'"), tok_line
        elif kind == "int":
            yield "int", int(m.group()), tok_line
        elif kind == "kw":
            yield ("end" if m.group().upper().startswith("END") else "table"), None, tok_line
        else:
            yield "punct", m.group(), tok_line


def _expect(row: list[tuple[str, object, int]], kinds: Sequence[str], table: int, line: int) -> list:
    got = [k for k, _, _ in row]
    if got != list(kinds):
        raise DirectoryParseError(f"malformed row in TABLE {table}: expected fields {list(kinds)}, got {got}", line)
    return [v for _, v, _ in row]


_ROW_KINDS = {
    TABLE_FILES: ("int", "str", "str", "str", "str", "str"),
    TABLE_META: ("int", "str", "int"),
    TABLE_DIR: ("int", "str", "int", "int", "hex", "hex", "hex", "hex", "int"),
}


def parse_directory(text: str) -> EventDirectory:
    files: list[FileRef] = []
    metas: list[MetaRef] = []
    entries: list[DirEntry] = []
    table: int | None = None
    table_line = 0
    row: list[tuple[str, object, int]] = []
    seen_tables: set[int] = set()
    last_id: dict[int, int] = {}
    toks = _lex(text)
    for kind, value, line in toks:
        if table is None:
            if kind != "table":
                raise DirectoryParseError("expected TABLE", line)
            nxt = next(toks, None)
            if nxt is None or nxt[0] != "int":
                raise DirectoryParseError("TABLE needs a numeric id", line)
            table, table_line = int(nxt[1]), line
            if table not in _ROW_KINDS:
                raise DirectoryParseError(f"unknown table id {table}", line)
            if table in seen_tables:
                raise DirectoryParseError(f"TABLE {table} appears twice", line)
            seen_tables.add(table)
            continue
        if kind == "end":
            if row:
                raise DirectoryParseError(f"row in TABLE {table} not terminated by ';'", row[0][2])
            table = None
            continue
        if kind == "table":
            raise DirectoryParseError(f"TABLE {table} (opened at line {table_line}) lacks END TABLE", line)
        if kind == "punct" and value == ",":
            continue
        if kind == "punct" and value == ";":
            if not row:
                raise DirectoryParseError("empty row", line)
            first_line = row[0][2]
            vals = _expect(row, _ROW_KINDS[table], table, first_line)
            row_id = vals[0]
            if row_id <= last_id.get(table, 0):
                raise DirectoryParseError(
                    f"out-of-order id {row_id} in TABLE {table} (previous {last_id[table]})", first_line
                )
            last_id[table] = row_id
            if table == TABLE_FILES:
                name = "".join(vals[1:5])
                files.append(FileRef(row_id, name, vals[5]))
            elif table == TABLE_META:
                metas.append(MetaRef(row_id, vals[1], vals[2]))
            else:
                if entries and vals[8] <= entries[-1].offset:
                    raise DirectoryParseError(f"offset {vals[8]} not increasing", first_line)
                entries.append(DirEntry(row_id, vals[1], vals[2], vals[3], FlagWords(tuple(vals[4:8])), vals[8]))
            row = []
            continue
        row.append((kind, value, line))
    if table is not None:
        raise DirectoryParseError(f"unterminated TABLE {table}: missing END TABLE", table_line)
    keys = [(e.run, e.event) for e in entries]
    if len(set(keys)) != len(keys):
        raise DirectoryError("duplicate (run, event) in directory")
    return EventDirectory(tuple(files), tuple(metas), tuple(entries))


# selection

def validate_flag_expr(expr: Node) -> Node:
    for node in walk(expr):
        if isinstance(node, Compare):
            raise DirectoryError(f"directories hold flags only; cannot test {node.name}")
        if isinstance(node, FlagTest):
            if node.group != OFFLINE_GROUP:
                raise DirectoryError(f"directories hold offline flags only, not {node.group}")
            if not 0 <= node.bit < NFLAGS:
                raise DirectoryError(f"flag index {node.bit} outside [0, {NFLAGS})")
    return expr


def flag_mask(expr: Node, words: np.ndarray) -> np.ndarray:
    """Evaluate a flag expression over an (N, 4) array of flag words."""
    if isinstance(expr, FlagTest):
        return ((words[:, expr.bit >> 5] >> np.uint32(expr.bit & 31)) & np.uint32(1)).astype(bool)
    if isinstance(expr, And):
        mask = flag_mask(expr.terms[0], words)
        for t in expr.terms[1:]:
            mask &= flag_mask(t, words)
        return mask
    if isinstance(expr, Or):
        mask = flag_mask(expr.terms[0], words)
        for t in expr.terms[1:]:
            mask |= flag_mask(t, words)
        return mask
    if isinstance(expr, Not):
        return ~flag_mask(expr.term, words)
    if isinstance(expr, ConstTrue):
        return np.ones(len(words), dtype=bool)
    if isinstance(expr, ConstFalse):
        return np.zeros(len(words), dtype=bool)
    raise TypeError(f"not a flag expression: {expr!r}")


def select_indices(directory: EventDirectory, expr: Node = TRUE, chunk_size: int = 1 << 20) -> np.ndarray:
    validate_flag_expr(expr)
    words = directory.flag_array
    parts = [
        np.flatnonzero(flag_mask(expr, words[lo : lo + chunk_size])) + lo
        for lo in range(0, len(words), chunk_size)
    ]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)


def select(directory: EventDirectory, expr: Node = TRUE, chunk_size: int = 1 << 20) -> list[DirEntry]:
    """Entries whose flags satisfy ``expr``, in directory order; never touches the store."""
    entries = directory.entries
    return [entries[i] for i in select_indices(directory, expr, chunk_size)]


@dataclass
class FetchErrors:
    """Collects per-entry failures so fetch iteration can continue past them."""

    items: list[tuple[object, Exception]] = field(default_factory=list)

    def add(self, key, exc: Exception) -> None:
        self.items.append((key, exc))

    def __len__(self) -> int:
        return len(self.items)

    def __bool__(self) -> bool:
        return bool(self.items)


def read_event(reader: StoreReader, offset: int, run: int, event: int) -> EventRecord:
    rec = reader.read_at(offset)
    if rec.record_kind != RecordKind.EVENT or (rec.run, rec.event) != (run, event):
        raise StaleOffsetError(
            f"{reader.file_id}: offset {offset} holds {rec.type_tag} run={rec.run} event={rec.event}, "
            f"expected run={run} event={event}"
        )
    return rec


def fetch(
    selection: Iterable[DirEntry],
    reader: StoreReader,
    errors: FetchErrors | None = None,
) -> Iterator[EventRecord]:
    """Read the selected events by offset, in selection order.

    With ``errors`` given, an entry whose offset no longer holds the indexed
    event is recorded there and iteration continues; otherwise it raises.
    """
    for entry in selection:
        try:
            yield read_event(reader, entry.offset, entry.run, entry.event)
        except StoreError as exc:
            if errors is None:
                raise
            errors.add(entry, exc)
