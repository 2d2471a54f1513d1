from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evtag import query as q
from evtag.event_directory import (
    DirectoryError,
    DirectoryParseError,
    DirEntry,
    EventDirectory,
    FetchErrors,
    FileRef,
    FlagWords,
    MetaRef,
    StaleOffsetError,
    build_directory,
    decode_flags,
    encode_flags,
    fetch,
    parse_directory,
    select,
    select_indices,
    serialize_directory,
    validate_flag_expr,
)
from evtag.event_store import EventRecord, RecordBoundaryError, open_store
from evtag.schema import default_schema
from evtag.synth import flag_fn

from conftest import write_store

GOLDEN = resources.files("evtag") / "data" / "run35762_excerpt.zed"


@pytest.fixture(scope="module")
def golden():
    return parse_directory(GOLDEN.read_text())


def test_golden_excerpt(golden):
    assert [(e.run, e.event) for e in golden.entries] == [(35762, ev) for ev in (16, 17, 20, 21, 22, 23)]
    assert [e.offset for e in golden.entries] == [62751, 90011, 102480, 131195, 142054, 151840]
    assert [e.seq_id for e in golden.entries] == [1, 2, 3, 4, 5, 6]
    assert {e.type_tag for e in golden.entries} == {"EVTF"}
    assert golden.meta_refs == (MetaRef(1, "HSYOUT", 137), MetaRef(2, "HEAD", 62751), MetaRef(3, "MDSTDFL00V0", 63757))
    (f,) = golden.file_refs
    assert f.name == "MDST2.D000331.T224552.R035762A.cz"
    assert f.options == "MEDIUM=COMP,DRIVER=FZ,FILFOR=EXCH,SFGET"
    assert golden.entries[2].flags == FlagWords((0x20000460, 0x2020, 0x12000000, 0x40000))


def test_golden_round_trip(golden):
    text = serialize_directory(golden)
    assert parse_directory(text) == golden
    assert serialize_directory(parse_directory(text)) == text


def test_flag_bit_order(golden):
    # word 0x468 has bits 3, 5, 6 and 10 set
    first = golden.entries[0].flags
    assert [i for i, b in enumerate(decode_flags(first)) if b][:4] == [3, 5, 6, 10]
    assert first.test(3) and not first.test(0) and not first.test(4)
    assert first.test(32 + 5) and first.test(32 + 6)


def test_golden_selection(golden):
    expr = q.all_of(q.flag(3), q.Not(q.flag(0)))
    assert [e.event for e in select(golden, expr)] == [16, 17, 21, 23]
    assert [e.event for e in select(golden, q.flag(29))] == [20, 22]
    assert [e.event for e in select(golden, q.any_of(q.flag(64 + 25), q.flag(96 + 18)))] == [20]
    assert len(select(golden, q.TRUE)) == 6 and select(golden, q.FALSE) == []


flags_st = st.lists(st.booleans(), min_size=128, max_size=128)


@given(flags_st)
def test_encode_decode_round_trip(bits):
    words = encode_flags(bits)
    assert decode_flags(words) == bits
    assert FlagWords.from_int(words.as_int()) == words
    assert all(words.test(i) == b for i, b in enumerate(bits))


entry_rows = st.lists(
    st.tuples(
        st.integers(1, 2**32 - 1),
        st.tuples(*[st.integers(0, 2**32 - 1)] * 4),
        st.integers(1, 10**6),
    ),
    max_size=20,
    unique_by=lambda t: t[0],
)
names = st.text(st.characters(min_codepoint=32, max_codepoint=126), max_size=30)


@given(entry_rows, names, names, st.lists(st.tuples(names, st.integers(0, 10**9)), max_size=4))
def test_text_round_trip_property(rows, fname, options, metas):
    offset = 8
    entries = []
    for i, (event, words, gap) in enumerate(rows):
        offset += gap
        entries.append(DirEntry(i + 1, "EVTF", 7, event, FlagWords(words), offset))
    d = EventDirectory(
        (FileRef(1, fname, options),),
        tuple(MetaRef(i + 1, n, off) for i, (n, off) in enumerate(metas)),
        tuple(entries),
    )
    assert parse_directory(serialize_directory(d)) == d


def test_short_hex_words():
    text = "TABLE 12\n 1, 'EVTF', 1, 2, X'1', X'ff', X'0', X'ABCDEF01', 40;\nEND TABLE\n"
    (e,) = parse_directory(text).entries
    assert e.flags.words == (1, 255, 0, 0xABCDEF01)


@pytest.mark.parametrize(
    "text, msg",
    [
        ("TABLE 13\nEND TABLE", "unknown table id 13"),
        ("TABLE 11\n 1, 'HEAD';\nEND TABLE", "malformed row"),
        ("TABLE 11\n 2, 'HEAD', 5;\n 1, 'HSYO', 9;\nEND TABLE", "out-of-order id"),
        ("TABLE 12\n 1, 'EVTF', 1, 2, X'0', X'0', X'0', X'0', 90;\n"
         " 2, 'EVTF', 1, 3, X'0', X'0', X'0', X'0', 80;\nEND TABLE", "not increasing"),
        ("TABLE 11\n 1, 'HEAD', 5;\n", "missing END TABLE"),
        ("TABLE 11\nEND TABLE\nTABLE 11\nEND TABLE", "twice"),
        ("TABLE 12\n 1, 'EVTF', 1, 2, X'123456789', X'0', X'0', X'0', 90;\nEND TABLE", "1-8 digits"),
        ("TABLE 11\n 1, 'HEAD', 5\nEND TABLE", "not terminated"),
        ("TABLE 10\nTABLE 11", "lacks END TABLE"),
        ("1, 'x';", "expected TABLE"),
        ("TABLE 11\n 1, 'HEAD', @;\nEND TABLE", "unexpected text"),
    ],
)
def test_parse_errors(text, msg):
    with pytest.raises(DirectoryParseError, match=msg):
        parse_directory(text)


def test_parse_error_line_number():
    text = "TABLE 11\n 1, 'HEAD', 5;\n\n 1, 'X', 9;\nEND TABLE\n"
    with pytest.raises(DirectoryParseError) as err:
        parse_directory(text)
    assert err.value.line == 4


def test_duplicate_event_rejected():
    text = (
        "TABLE 12\n 1, 'EVTF', 1, 2, X'0', X'0', X'0', X'0', 8;\n"
        " 2, 'EVTF', 1, 2, X'0', X'0', X'0', X'0', 90;\nEND TABLE"
    )
    with pytest.raises(DirectoryError, match="duplicate"):
        parse_directory(text)


def test_flag_expressions_only():
    schema = default_schema()
    with pytest.raises(DirectoryError):
        validate_flag_expr(q.parse_query("ET_TOTAL > 1", schema))
    with pytest.raises(DirectoryError):
        validate_flag_expr(q.parse_query("flag(FLT, 1)", schema))
    validate_flag_expr(q.parse_query("not (flag(1) or flag(127))", schema))


# directories built from a store


def _brute_flags(rows, expr):
    def bit(row, i):
        return (int(row["flags"][i // 32]) >> (i % 32)) & 1 == 1

    def ev(node, row):
        if isinstance(node, q.FlagTest):
            return bit(row, node.bit)
        if isinstance(node, q.And):
            return all(ev(t, row) for t in node.terms)
        if isinstance(node, q.Or):
            return any(ev(t, row) for t in node.terms)
        if isinstance(node, q.Not):
            return not ev(node.term, row)
        return isinstance(node, q.ConstTrue)

    return [i for i, row in enumerate(rows) if ev(expr, row)]


def test_build_directory(physics_store):
    reader, rows, offsets = physics_store
    d = build_directory(reader, flag_fn, options="MEDIUM=DISK")
    assert len(d) == len(rows) == 300
    assert [e.offset for e in d.entries] == offsets
    assert [e.seq_id for e in d.entries] == list(range(1, 301))
    assert len(d.meta_refs) == 18 and {m.name for m in d.meta_refs} == {"CALB"}
    assert d.file_refs == (FileRef(1, "phys.evt", "MEDIUM=DISK"),)
    assert d.store_name == "phys.evt"
    assert parse_directory(serialize_directory(d)) == d


@given(st.lists(st.integers(0, 127), min_size=1, max_size=3), st.integers(0, 2))
def test_selection_matches_brute_force(physics_store, bits, shape):
    reader, rows, _ = physics_store
    reader.rewind()
    d = build_directory(reader, flag_fn)
    leaves = [q.flag(b) for b in bits]
    expr = [q.all_of, q.any_of, lambda *t: q.Not(q.all_of(*t))][shape](*leaves)
    want = _brute_flags(rows, expr)
    assert select_indices(d, expr).tolist() == want
    assert select_indices(d, expr, chunk_size=7).tolist() == want


def test_selection_reads_no_store_bytes(physics_store):
    reader, rows, _ = physics_store
    d = build_directory(reader, flag_fn)
    reader.bytes_read = 0
    sel = select(d, q.flag(3))
    assert reader.bytes_read == 0
    assert len(sel) == int(np.sum(rows["n_elec_a"] >= 1))
    got = list(fetch(sel, reader))
    assert [(r.run, r.event) for r in got] == [(e.run, e.event) for e in sel]
    assert reader.bytes_read == sum(25 + len(r.payload) for r in got)


def test_fetch_isolates_stale_offsets(tmp_path):
    recs = [EventRecord.event_record(1, i, b"x" * 10) for i in range(1, 6)]
    offsets = write_store(tmp_path / "a.evt", recs)
    entries = [
        DirEntry(i + 1, "EVTF", 1, i + 1, FlagWords(), off) for i, off in enumerate(offsets)
    ]
    # entry 2 points at event 4's record, entry 4 at a non-boundary
    entries[1] = DirEntry(2, "EVTF", 1, 2, FlagWords(), offsets[3])
    entries[3] = DirEntry(4, "EVTF", 1, 4, FlagWords(), offsets[3] + 1)
    with open_store(tmp_path / "a.evt") as rd:
        errors = FetchErrors()
        got = [r.event for r in fetch(entries, rd, errors)]
        assert got == [1, 3, 5]
        assert [e.event for e, _ in errors.items] == [2, 4]
        assert isinstance(errors.items[0][1], StaleOffsetError)
        assert isinstance(errors.items[1][1], RecordBoundaryError)
        with pytest.raises(StaleOffsetError):
            list(fetch(entries, rd))


def test_fetch_rejects_non_event_record(tmp_path):
    offsets = write_store(tmp_path / "a.evt", [EventRecord.non_event("HEAD", b"h")])
    with open_store(tmp_path / "a.evt") as rd:
        with pytest.raises(StaleOffsetError):
            list(fetch([DirEntry(1, "EVTF", 1, 1, FlagWords(), offsets[0])], rd))


def test_build_rejects_duplicate_events(tmp_path):
    write_store(tmp_path / "a.evt", [EventRecord.event_record(1, 1), EventRecord.event_record(1, 1)])
    with open_store(tmp_path / "a.evt") as rd:
        with pytest.raises(DirectoryError, match="duplicate"):
            build_directory(rd, lambda r: [False] * 128)
