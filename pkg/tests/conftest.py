import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evtag.event_store import EventRecord, StoreConfig, create_store, open_store
from evtag.schema import VarDesc, define_schema
from evtag.synth import PhysicsModel, event_payload, generate_summaries

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow],
)
settings.load_profile("default")


# acceptance summary: one PASS/FAIL line per criterion

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False
    elif rep.skipped:
        entry["ok"] = False
        entry["notes"].append("skipped")
    for key, value in item.user_properties:
        if key == "measured":
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {n}: {status}  {e['title']}" + (f"  [{notes}]" if notes else ""))


# shared fixtures


@pytest.fixture
def compact_schema():
    return define_schema(
        [
            VarDesc("ET_TOTAL"),
            VarDesc("CAL_E"),
            VarDesc("ELEC_E"),
            VarDesc("NTRK_PRIM", "int32"),
            VarDesc("VEC3", "float32", 3),
            VarDesc("OFFLINE", "bitgroup", 128),
        ],
        strict=False,
    )


def write_store(path, records, crc=True):
    """Write records, returning their offsets."""
    with create_store(path, StoreConfig(crc=crc), truncate=True) as w:
        return [w.append(r).offset for r in records]


@pytest.fixture
def physics_store(tmp_path):
    """A 300-event store with interleaved non-events; returns (reader, rows, offsets)."""
    rng = np.random.default_rng(11)
    rows = generate_summaries(rng, 300, PhysicsModel())
    recs, event_idx = [], []
    for i, row in enumerate(rows):
        if i % 17 == 5:
            recs.append(EventRecord.non_event("CALB", b"calib" * 3))
        event_idx.append(len(recs))
        recs.append(EventRecord.event_record(7, 10 + 2 * i, event_payload(row, 400, rng)))
    offsets = write_store(tmp_path / "phys.evt", recs)
    reader = open_store(tmp_path / "phys.evt", file_id="phys.evt")
    yield reader, rows, [offsets[j] for j in event_idx]
    reader.close()
