import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evtag import query as q
from evtag.event_directory import FetchErrors, StaleOffsetError, build_directory, select
from evtag.event_store import RecordLocation
from evtag.schema import TagSchema, VarDesc, default_schema, define_schema
from evtag.synth import flag_fn
from evtag.tagdb import (
    CONT_HEADER,
    DB_HEADER,
    ConsistencyError,
    DuplicateRunError,
    ReadOnlyError,
    SchemaMismatchError,
    TagDBError,
    TagHit,
    TagRecord,
    UnsortedTagsError,
    create_federation,
    derive_tag,
    fetch_events,
    open_federation,
    records_to_array,
    summaries_to_array,
)


def _tags(reader, schema):
    reader.rewind()
    return [derive_tag(rec, schema, flag_fn, loc) for loc, rec in reader.scan() if rec.is_event]


@pytest.fixture
def fed_with_tags(tmp_path, physics_store):
    reader, rows, offsets = physics_store
    schema = default_schema()
    tags = _tags(reader, schema)
    fed = create_federation(tmp_path / "fed", schema)
    fed.ingest_run(7, tags)
    return fed, tags, reader


def test_vectorised_tags_match_per_event_derivation(physics_store):
    reader, rows, offsets = physics_store
    schema = default_schema()
    slow, file_ids = records_to_array(_tags(reader, schema), schema)
    events = np.array([t for t in range(10, 610, 2)], dtype=np.uint32)
    fast = summaries_to_array(rows, schema, 7, events, 0, np.array(offsets, dtype=np.uint64))
    assert file_ids == ["phys.evt"]
    assert fast.tobytes() == slow.tobytes()


def test_presence_follows_physics(physics_store):
    reader, rows, _ = physics_store
    tags = _tags(reader, default_schema())
    for t, row in zip(tags, rows):
        assert ("ELEC_E" in t.values) == (row["n_elec_a"] >= 1)
        assert ("ELEC2_E" in t.values) == (row["n_elec_a"] >= 2)
        assert ("JET1_ET2" in t.values) == (row["n_jets"] >= 2)
        assert "ET_TOTAL" in t.values and "E_FCAL" not in t.values
        assert t.bits["FLT"] == (0, 0) and t.bits["OFFLINE"] == tuple(int(w) for w in row["flags"])


def test_row_round_trip(fed_with_tags):
    fed, tags, _ = fed_with_tags
    assert fed.records(7) == tags
    assert list(fed.iter_records()) == tags


def test_catalog_and_reopen(fed_with_tags):
    fed, tags, _ = fed_with_tags
    ref = fed.lookup(7)
    assert (ref.db_file, ref.index, ref.offset, ref.n_records) == ("db0001.tdb", 0, DB_HEADER.size, 300)
    assert ref.length == CONT_HEADER.size + 300 * 996 + 4 + 2 + len("phys.evt") + 8
    fed.close()
    again = open_federation(fed.path)
    assert again.runs == [7] and again.n_records == 300
    assert again.records(7) == tags
    with pytest.raises(ReadOnlyError):
        again.ingest_run(8, [])


def test_ingest_validation(tmp_path, compact_schema):
    fed = create_federation(tmp_path / "f", compact_schema)
    loc = RecordLocation("s.evt", 8)
    rec = lambda run, ev: TagRecord(run, ev, loc, {"ET_TOTAL": 1.0})
    fed.ingest_run(1, [rec(1, 1), rec(1, 2)])
    with pytest.raises(DuplicateRunError):
        fed.ingest_run(1, [rec(1, 3)])
    with pytest.raises(UnsortedTagsError):
        fed.ingest_run(2, [rec(2, 5), rec(2, 5)])
    with pytest.raises(TagDBError, match="other run"):
        fed.ingest_run(3, [rec(4, 1)])
    with pytest.raises(TagDBError):
        create_federation(tmp_path / "f", compact_schema)
    assert fed.runs == [1]
    fed.ingest_run(5, [])
    assert fed.lookup(5).n_records == 0 and fed.records(5) == []


def _rows(schema, run, n):
    arr = np.zeros(n, schema.dtype)
    arr["run"] = run
    arr["event"] = np.arange(1, n + 1)
    return arr


def _placement_oracle(cap, blobs):
    """Expected (file number, offset) per container under append-or-open-new placement."""
    out, sizes = [], []
    for b in blobs:
        if not sizes or sizes[-1] + b > cap:
            sizes.append(DB_HEADER.size)
        out.append((len(sizes), sizes[-1]))
        sizes[-1] += b
    return out, sizes


@given(st.lists(st.integers(0, 40), min_size=1, max_size=25), st.integers(200, 2000))
def test_size_cap_placement(tmp_path_factory, counts, cap):
    schema = define_schema([VarDesc("A")], strict=False)
    fed = create_federation(tmp_path_factory.mktemp("cap"), schema, size_cap=cap)
    blob = lambda n: CONT_HEADER.size + n * schema.record_size + 4 + 2 + 1 + 8
    want, sizes = _placement_oracle(cap, [blob(n) for n in counts])
    for run, n in enumerate(counts, 1):
        fed.ingest_run(run, _rows(schema, run, n), ["s"])
    got = [(int(fed.lookup(r).db_file[2:6]), fed.lookup(r).offset) for r in range(1, len(counts) + 1)]
    assert got == want
    for f, size in zip(fed.db_files.values(), sizes):
        assert (fed.path / f.file_id).stat().st_size == size == f.size
        n_cont = sum(c.db_file == f.file_id for c in fed.containers.values())
        assert size <= cap or n_cont == 1
    re = open_federation(fed.path)
    assert [len(re.read_container(r)[0]) for r in re.runs] == counts


def test_interrupted_ingest_leftovers_are_dropped(tmp_path, compact_schema):
    fed = create_federation(tmp_path / "f", compact_schema)
    fed.ingest_run(1, _rows(compact_schema, 1, 3), ["s"])
    with open(fed.path / "db0001.tdb", "ab") as fh:
        fh.write(b"half-written container")
    re = open_federation(fed.path, writable=True)
    re.ingest_run(2, _rows(compact_schema, 2, 2), ["s"])
    assert (fed.path / "db0001.tdb").stat().st_size == re.db_files["db0001.tdb"].size
    assert [len(re.read_container(r)[0]) for r in (1, 2)] == [3, 2]


def test_open_consistency_errors(tmp_path, compact_schema):
    fed = create_federation(tmp_path / "f", compact_schema)
    fed.ingest_run(1, _rows(compact_schema, 1, 3), ["s"])
    fed.close()
    p = fed.path
    schema_text = (p / "schema.json").read_text()

    other = define_schema([VarDesc("B")], strict=False)
    (p / "schema.json").write_text(other.to_json())
    with pytest.raises(SchemaMismatchError):
        open_federation(p)
    (p / "schema.json").write_text(schema_text)

    data = (p / "db0001.tdb").read_bytes()
    (p / "db0001.tdb").write_bytes(data[:-5])
    with pytest.raises(ConsistencyError, match="shorter"):
        open_federation(p)
    (p / "db0001.tdb").unlink()
    with pytest.raises(ConsistencyError, match="db0001.tdb referenced by the catalog is missing"):
        open_federation(p)
    (p / "db0001.tdb").write_bytes(data)

    cat = (p / "catalog.txt").read_text()
    (p / "catalog.txt").write_text(cat.replace("version 1", "version 9"))
    with pytest.raises(ConsistencyError, match="version"):
        open_federation(p)
    (p / "catalog.txt").write_text(cat + "container 2 db0009.tdb 0 28 10 0\n")
    with pytest.raises(ConsistencyError, match="unknown database file"):
        open_federation(p)
    (p / "catalog.txt").write_text(cat)
    assert open_federation(p).runs == [1]
    with pytest.raises(ConsistencyError):
        open_federation(tmp_path / "nowhere")


def test_corrupt_container_header(tmp_path, compact_schema):
    fed = create_federation(tmp_path / "f", compact_schema)
    ref = fed.ingest_run(1, _rows(compact_schema, 1, 3), ["s"])
    with open(fed.path / ref.db_file, "r+b") as fh:
        fh.seek(ref.offset)
        fh.write(b"XXXX")
    with pytest.raises(ConsistencyError, match="header"):
        open_federation(fed.path).read_container(1)


QUERIES = [
    "ET_TOTAL > 30",
    "ELEC_E > 10 and not flag(0)",
    "flag(3) or MU_P > 5",
    "not (VTX_Z < 0) and NTRK_PRIM >= 8",
    "ELEC2_E > 0 or ELECB2_E > 0",
    "false",
]


@pytest.mark.parametrize("text", QUERIES)
def test_query_matches_record_oracle(fed_with_tags, text):
    fed, tags, _ = fed_with_tags
    ast = q.parse_query(text, fed.schema)
    want = [TagHit(t.run, t.event, t.location) for t in tags if q.evaluate(ast, t)]
    assert fed.query(ast) == want
    stats = fed.count(ast)
    assert (stats.scanned, stats.matched) == (300, len(want))
    assert fed.query(ast, run_range=(8, 9)) == []


def test_flag_query_equals_directory_select(fed_with_tags):
    fed, _, reader = fed_with_tags
    reader.rewind()
    d = build_directory(reader, flag_fn)
    for text in ("flag(3)", "flag(0) and not flag(1)", "flag(5) or flag(100)"):
        ast = q.parse_query(text, fed.schema)
        assert [(h.run, h.event, h.location.offset) for h in fed.query(ast)] == [
            (e.run, e.event, e.offset) for e in select(d, ast)
        ]


def test_fetch_events(fed_with_tags):
    fed, _, reader = fed_with_tags
    hits = fed.query(q.parse_query("ELEC_E > 20", fed.schema))
    events = list(fetch_events(hits, {"phys.evt": reader}))
    assert [(e.run, e.event) for e in events] == [(h.run, h.event) for h in hits]
    bad = [
        hits[0],
        TagHit(hits[1].run, hits[1].event + 1, hits[1].location),
        TagHit(7, 1, RecordLocation("gone.evt", 8)),
        hits[2],
    ]
    errors = FetchErrors()
    got = [e.event for e in fetch_events(bad, lambda fid: {"phys.evt": reader}[fid], errors)]
    assert got == [hits[0].event, hits[2].event]
    assert isinstance(errors.items[0][1], StaleOffsetError) and isinstance(errors.items[1][1], KeyError)
    with pytest.raises(StaleOffsetError):
        list(fetch_events(bad, {"phys.evt": reader}))


def test_export_columns(fed_with_tags):
    fed, tags, _ = fed_with_tags
    ast = q.parse_query("ET_TOTAL > 10", fed.schema)
    table = fed.export_columns(["ELEC_E", "NMU", "FLT"], ast)
    assert table.columns == ("run", "event", "ELEC_E", "NMU", "FLT")
    chosen = [t for t in tags if q.evaluate(ast, t)]
    assert [r[:2] for r in table.rows] == [(t.run, t.event) for t in chosen]
    assert [r[2] for r in table.rows] == [t.values.get("ELEC_E") for t in chosen]
    text = table.to_text()
    lines = text.splitlines()
    assert lines[0] == "run,event,ELEC_E,NMU,FLT"
    assert len(lines) == len(chosen) + 1
    assert any(",NA," in line for line in lines[1:])
    assert all(line.endswith(",00000000 00000000") for line in lines[1:])
    with pytest.raises(KeyError):
        fed.export_columns(["NOPE"])


def test_vector_variable_export(tmp_path, compact_schema):
    fed = create_federation(tmp_path / "f", compact_schema)
    rec = TagRecord(1, 1, RecordLocation("s", 8), {"VEC3": (1.0, 2.5, -3.0), "NTRK_PRIM": 4})
    fed.ingest_run(1, [rec])
    assert fed.records(1)[0].values == {"VEC3": (1.0, 2.5, -3.0), "NTRK_PRIM": 4}
    assert fed.export_columns(["VEC3", "NTRK_PRIM"]).to_text(";").splitlines()[1] == "1;1;1.0 2.5 -3.0;4"


# partial update


def _snapshot(fed):
    return {f: (fed.path / f).read_bytes() for f in fed.db_files}


def _changed(before, after):
    out = {}
    for f, old in before.items():
        new = after[f]
        assert len(old) == len(new)
        diff = np.flatnonzero(np.frombuffer(old, np.uint8) != np.frombuffer(new, np.uint8))
        if len(diff):
            out[f] = diff
    return out


def test_update_confined_to_variable_slots(tmp_path, physics_store):
    reader, rows, offsets = physics_store
    schema = default_schema()
    fed = create_federation(tmp_path / "f", schema)
    ev = np.arange(10, 610, 2, dtype=np.uint32)
    for run in (7, 8, 9):
        fed.ingest_run(run, summaries_to_array(rows, schema, run, ev, 0, np.array(offsets, np.uint64)), ["s"])
    before = _snapshot(fed)
    catalog = fed.catalog_path.read_text()

    def scale(t):
        v = t.values.get("ELEC_E")
        return None if v is not None and v < 8 else (2.0 * v if v is not None else 1.0)

    assert fed.update_columns([8], ["ELEC_E"], scale) == 300
    changed = _changed(before, _snapshot(fed))
    assert list(changed) == ["db0001.tdb"]
    ref = fed.lookup(8)
    base = ref.offset + CONT_HEADER.size
    allowed = set()
    lo, hi = schema.field_span("ELEC_E")
    plo, _ = schema.presence_span("ELEC_E")
    for i in range(300):
        start = base + i * schema.record_size
        allowed.update(range(start + lo, start + hi))
        allowed.add(start + plo)
    assert set(changed["db0001.tdb"].tolist()) <= allowed
    assert fed.catalog_path.read_text() == catalog

    # the oracle: apply the same rule to the original values
    new_vals = {}
    for row, e in zip(rows, ev):
        old = float(row["elec_a_e"]) if row["n_elec_a"] >= 1 else None
        new_vals[int(e)] = None if old is not None and old < 8 else (2.0 * old if old is not None else 1.0)
    for text in ("ELEC_E > 30", "ELEC_E == 1", "not ELEC_E > 0"):
        ast = q.parse_query(text, schema)
        want = [
            e for e, v in new_vals.items()
            if q.evaluate(ast, TagRecord(8, e, RecordLocation("s", 0), {} if v is None else {"ELEC_E": float(np.float32(v))}))
        ]
        assert [h.event for h in fed.query(ast, run_range=(8, 8))] == want
    untouched = [(t.event, t.values, t.bits) for t in fed.records(7)]
    assert untouched == [(t.event, t.values, t.bits) for t in fed.records(9)]
    assert [v for _, v, _ in untouched] != [t.values for t in fed.records(8)]


def test_update_errors(tmp_path, compact_schema):
    fed = create_federation(tmp_path / "f", compact_schema)
    fed.ingest_run(1, _rows(compact_schema, 1, 3), ["s"])
    with pytest.raises(KeyError):
        fed.update_columns([1], ["NOPE"], lambda t: 1)
    with pytest.raises(KeyError):
        fed.update_columns([2], ["CAL_E"], lambda t: 1)
    with pytest.raises(TagDBError, match="not being updated"):
        fed.update_columns([1], ["CAL_E"], lambda t: {"ET_TOTAL": 1.0})
    with pytest.raises(TagDBError, match="mapping"):
        fed.update_columns([1], ["CAL_E", "ET_TOTAL"], lambda t: 1.0)
    assert fed.update_columns([1], ["CAL_E", "ET_TOTAL"], lambda t: {"CAL_E": float(t.event)}) == 3
    assert [r.values for r in fed.records(1)] == [{"CAL_E": 1.0}, {"CAL_E": 2.0}, {"CAL_E": 3.0}]


def test_schema_json_round_trip_in_federation(tmp_path, compact_schema):
    fed = create_federation(tmp_path / "f", compact_schema)
    assert TagSchema.from_json((fed.path / "schema.json").read_text()) == compact_schema
    assert open_federation(fed.path).schema.hash == compact_schema.hash
