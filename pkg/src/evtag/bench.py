"""Synthetic datasets and the timing scenarios run over them.

A dataset directory holds::

    spec.json        the DatasetSpec it was generated from
    tape/            slow-tier store files, one per run
    fs/              filestore namespace (manifest + disk pool)
    dirs/            one event directory text file per run
    tagdb/           the tag database federation

Scenarios read events (payloads are checksummed, nothing else is done with
them) and report process CPU time split into an index phase and a fetch
phase.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import query as q
from .event_directory import EventDirectory, build_directory, fetch, parse_directory, select, serialize_directory
from .event_store import EventRecord, StoreConfig, StoreReader, create_store, open_store
from .filestore import Namespace, open_namespace
from .schema import TagSchema, default_schema
from .synth import PhysicsModel, event_payload, flag_fn, generate_summaries
from .tagdb import (
    DEFAULT_SIZE_CAP,
    Federation,
    QueryStats,
    create_federation,
    derive_tag,
    event_values,
    fetch_events,
    open_federation,
    summaries_to_array,
)

log = logging.getLogger(__name__)

NON_EVENT_TAGS = ("HEAD", "CALB", "TEST", "HSYO")
FIRST_RUN = 35762


@dataclass(frozen=True)
class DatasetSpec:
    n_events: int = 50_000
    n_runs: int = 5
    payload_bytes: int = 25_000
    seed: int = 1
    first_run: int = FIRST_RUN
    non_event_fraction: float = 0.05
    model: PhysicsModel = field(default_factory=PhysicsModel)

    def __post_init__(self) -> None:
        if self.n_events < 0 or self.n_runs < 1 or self.payload_bytes < 0:
            raise ValueError(f"invalid dataset spec {self}")
        if not 0.0 <= self.non_event_fraction < 1.0:
            raise ValueError("non_event_fraction must be in [0, 1)")

    @classmethod
    def profile(cls, name: str, **overrides) -> "DatasetSpec":
        base = {"default": {}, "small": {"n_events": 5_000, "payload_bytes": 5_000}}[name]
        return cls(**{**base, **overrides})

    def events_per_run(self) -> list[int]:
        base, extra = divmod(self.n_events, self.n_runs)
        return [base + (i < extra) for i in range(self.n_runs)]

    def to_json(self) -> str:
        d = asdict(self)
        d["model"]["flag_probs"] = {str(k): v for k, v in self.model.flag_probs.items()}
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSpec":
        d = json.loads(text)
        m = d.pop("model")
        m["flag_probs"] = {int(k): v for k, v in m["flag_probs"].items()}
        return cls(**d, model=PhysicsModel(**m))


def store_name(run: int) -> str:
    return f"mdst/R{run:06d}.evt"


class Dataset:
    """Handle on a generated dataset directory; caches readers and directories."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.spec = DatasetSpec.from_json((self.root / "spec.json").read_text())
        self.namespace: Namespace = open_namespace(self.root / "fs")
        self._readers: dict[str, StoreReader] = {}
        self._dirs: dict[int, EventDirectory] = {}
        self._fed: Federation | None = None

    @property
    def runs(self) -> list[int]:
        return [self.spec.first_run + i for i in range(self.spec.n_runs)]

    def reader(self, name: str) -> StoreReader:
        rd = self._readers.get(name)
        if rd is None:
            rd = self._readers[name] = open_store(self.namespace.request(name), file_id=name)
        return rd

    def run_reader(self, run: int) -> StoreReader:
        return self.reader(store_name(run))

    def directory_path(self, run: int) -> Path:
        return self.root / "dirs" / f"R{run:06d}.zed"

    def directory(self, run: int) -> EventDirectory:
        d = self._dirs.get(run)
        if d is None:
            d = self._dirs[run] = parse_directory(self.directory_path(run).read_text())
        return d

    @property
    def federation(self) -> Federation:
        if self._fed is None:
            self._fed = open_federation(self.root / "tagdb")
        return self._fed

    def stage_all(self) -> None:
        for run in self.runs:
            self.run_reader(run)
            self.directory(run)

    def close(self) -> None:
        for rd in self._readers.values():
            rd.close()
        self._readers.clear()
        if self._fed is not None:
            self._fed.close()
            self._fed = None


def _run_events(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.cumsum(1 + rng.poisson(0.3, n)).astype(np.uint32) if n else np.zeros(0, np.uint32)


def generate(
    spec: DatasetSpec,
    root: str | Path,
    *,
    build_dirs: bool = True,
    build_tagdb: bool = True,
    schema: TagSchema | None = None,
    size_cap: int = DEFAULT_SIZE_CAP,
) -> Dataset:
    """Write store files, register them, and build the directory and tag access paths."""
    root = Path(root)
    (root / "tape").mkdir(parents=True, exist_ok=True)
    (root / "dirs").mkdir(exist_ok=True)
    (root / "spec.json").write_text(spec.to_json())
    schema = schema or default_schema()
    capacity = max(1 << 30, 4 * spec.n_events * (spec.payload_bytes + 64))
    ns = open_namespace(root / "fs", capacity)
    fed = create_federation(root / "tagdb", schema, size_cap) if build_tagdb else None
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_runs)
    f = spec.non_event_fraction
    config = StoreConfig(max_payload=max(spec.payload_bytes, 1 << 16))
    for i, n_ev in enumerate(spec.events_per_run()):
        run = spec.first_run + i
        rng = np.random.default_rng(seeds[i])
        rows = generate_summaries(rng, n_ev, spec.model)
        events = _run_events(rng, n_ev)
        n_non = int(round(n_ev * f / (1.0 - f)))
        is_event = np.ones(n_ev + n_non, dtype=bool)
        is_event[rng.choice(n_ev + n_non, n_non, replace=False)] = False
        name = store_name(run)
        offsets = np.zeros(n_ev, dtype=np.uint64)
        with create_store(root / "tape" / f"R{run:06d}.evt", config, truncate=True, file_id=name) as w:
            k = 0
            for j, ev in enumerate(is_event):
                if ev:
                    payload = event_payload(rows[k], spec.payload_bytes, rng)
                    offsets[k] = w.append(EventRecord.event_record(run, int(events[k]), payload)).offset
                    k += 1
                else:
                    tag = NON_EVENT_TAGS[j % len(NON_EVENT_TAGS)]
                    w.append(EventRecord.non_event(tag, rng.bytes(spec.payload_bytes)))
        if name not in ns:
            ns.register(name, w.path, pinned=True)
        if fed is not None:
            fed.ingest_run(run, summaries_to_array(rows, schema, run, events, 0, offsets), [name])
    if fed is not None:
        fed.close()
    ds = Dataset(root)
    if build_dirs:
        build_directories(ds)
    return ds


def build_directories(ds: Dataset) -> None:
    for run in ds.runs:
        rd = ds.run_reader(run)
        rd.rewind()
        d = build_directory(rd, flag_fn)
        ds.directory_path(run).write_text(serialize_directory(d))
        ds._dirs[run] = d


def build_tagdb_from_stores(ds: Dataset, schema: TagSchema | None = None, size_cap: int = DEFAULT_SIZE_CAP) -> Federation:
    """Rebuild the federation by reading every event and deriving its tag record."""
    schema = schema or default_schema()
    fed = create_federation(ds.root / "tagdb", schema, size_cap)
    for run in ds.runs:
        rd = ds.run_reader(run)
        rd.rewind()
        tags = [derive_tag(rec, schema, flag_fn, loc) for loc, rec in rd.scan() if rec.is_event]
        fed.ingest_run(run, tags)
    return fed


def generate_tag_federation(
    path: str | Path,
    n_records: int,
    *,
    n_runs: int = 10,
    seed: int = 7,
    schema: TagSchema | None = None,
    model: PhysicsModel = PhysicsModel(),
    size_cap: int = DEFAULT_SIZE_CAP,
) -> Federation:
    """A tag-only federation (no event store behind it) for query-rate studies."""
    schema = schema or default_schema()
    fed = create_federation(path, schema, size_cap)
    seeds = np.random.SeedSequence(seed).spawn(n_runs)
    base, extra = divmod(n_records, n_runs)
    for i in range(n_runs):
        n = base + (i < extra)
        run = FIRST_RUN + i
        rng = np.random.default_rng(seeds[i])
        rows = generate_summaries(rng, n, model)
        events = _run_events(rng, n)
        offsets = 8 + np.arange(n, dtype=np.uint64) * np.uint64(25_025)
        fed.ingest_run(run, summaries_to_array(rows, schema, run, events, 0, offsets), [store_name(run)])
    return fed


# scenarios

@dataclass
class ScenarioResult:
    name: str
    scanned: int
    selected: int
    cpu: float
    wall: float
    index_cpu: float = 0.0
    fetch_cpu: float = 0.0
    checksum: int = 0
    params: dict = field(default_factory=dict)

    @property
    def cpu_per_scanned(self) -> float:
        return self.cpu / self.scanned if self.scanned else 0.0

    @property
    def cpu_per_selected(self) -> float:
        return self.cpu / self.selected if self.selected else 0.0

    @property
    def index_cpu_per_scanned(self) -> float:
        return self.index_cpu / self.scanned if self.scanned else 0.0

    @property
    def fetch_cpu_per_selected(self) -> float:
        return self.fetch_cpu / self.selected if self.selected else 0.0

    @property
    def rate(self) -> float:
        """Scanned events per CPU second."""
        return self.scanned / self.cpu if self.cpu > 0 else float("inf")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioResult":
        return cls(**d)


class _Clock:
    def __init__(self):
        self.cpu0 = time.process_time()
        self.wall0 = time.perf_counter()
        self.index = 0.0
        self.fetch = 0.0

    def phase(self, attr: str, fn: Callable):
        t = time.process_time()
        out = fn()
        setattr(self, attr, getattr(self, attr) + time.process_time() - t)
        return out

    def result(self, name: str, scanned: int, selected: int, checksum: int, **params) -> ScenarioResult:
        cpu = time.process_time() - self.cpu0
        wall = time.perf_counter() - self.wall0
        return ScenarioResult(name, scanned, selected, cpu, wall, self.index, self.fetch, checksum, params)


def _checksum(records: Iterable[EventRecord], acc: int = 1) -> tuple[int, int]:
    n = 0
    for rec in records:
        acc = zlib.adler32(rec.payload, acc)
        n += 1
    return n, acc


def sequential_read(ds: Dataset, name: str = "sequential-read-all") -> ScenarioResult:
    readers = [ds.run_reader(r) for r in ds.runs]
    for rd in readers:
        rd.rewind()
    clock = _Clock()
    acc, n_ev = 1, 0
    for rd in readers:
        for rec in rd:
            acc = zlib.adler32(rec.payload, acc)
            n_ev += rec.is_event
    clock.fetch = time.process_time() - clock.cpu0
    return clock.result(name, n_ev, n_ev, acc)


def directory_select(ds: Dataset, expr: q.Node = q.TRUE, name: str = "directory-select") -> ScenarioResult:
    dirs = [(ds.directory(r), ds.run_reader(r)) for r in ds.runs]
    clock = _Clock()
    acc, scanned, selected = 1, 0, 0
    for d, rd in dirs:
        entries = clock.phase("index", lambda: select(d, expr))
        n, acc = clock.phase("fetch", lambda: _checksum(fetch(entries, rd), acc))
        scanned += len(d)
        selected += n
    return clock.result(name, scanned, selected, acc, expr=q.format_query(expr))


def directory_fallback(ds: Dataset, ast: q.Node, name: str = "directory-fallback") -> ScenarioResult:
    """A value predicate with no matching flag: read every event and test it."""
    schema = ds.federation.schema
    q.validate(ast, schema)
    names = q.referenced_names(ast)
    dirs = [(ds.directory(r), ds.run_reader(r)) for r in ds.runs]
    clock = _Clock()
    acc, scanned, selected = 1, 0, 0
    for d, rd in dirs:
        entries = clock.phase("index", lambda: select(d, q.TRUE))
        t = time.process_time()
        for rec in fetch(entries, rd):
            acc = zlib.adler32(rec.payload, acc)
            scanned += 1
            selected += q.evaluate(ast, event_values(rec, names))
        clock.fetch += time.process_time() - t
    return clock.result(name, scanned, selected, acc, query=q.format_query(ast))


def tag_query(ds: Dataset, ast: q.Node, name: str = "tag-query") -> ScenarioResult:
    fed = ds.federation
    readers = {store_name(r): ds.run_reader(r) for r in ds.runs}
    stats = QueryStats()
    clock = _Clock()
    hits = clock.phase("index", lambda: fed.query(ast, stats=stats))
    n, acc = clock.phase("fetch", lambda: _checksum(fetch_events(hits, readers)))
    return clock.result(name, stats.scanned, n, acc, query=q.format_query(ast))


def tag_query_only(fed: Federation, ast: q.Node, name: str = "tag-query-only", **params) -> ScenarioResult:
    clock = _Clock()
    stats = clock.phase("index", lambda: fed.count(ast))
    return clock.result(name, stats.scanned, stats.matched, 0, query=q.format_query(ast), n_variables=stats.variables, **params)


SCENARIOS = (
    "sequential-read-all",
    "directory-no-selection",
    "directory-select-half",
    "directory-select-twentieth",
    "directory-select",
    "directory-fallback",
    "tag-query",
    "tag-query-only",
)
HALF_EXPR = "flag(0)"
TWENTIETH_EXPR = "flag(1)"
ELECTRON_EXPR = "flag(3)"
ET_QUERY = "ET_TOTAL > 30.0"


def run_scenario(ds: Dataset, scenario: str, query: str | None = None, repeat: int = 1) -> ScenarioResult:
    """Run one named scenario ``repeat`` times and keep the fastest run.

    Counts are identical across repeats; only timings vary.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    schema = ds.federation.schema
    ds.stage_all()

    def once() -> ScenarioResult:
        if scenario == "sequential-read-all":
            return sequential_read(ds)
        if scenario == "directory-no-selection":
            return directory_select(ds, q.TRUE, scenario)
        if scenario == "directory-select-half":
            return directory_select(ds, q.parse_query(HALF_EXPR, schema), scenario)
        if scenario == "directory-select-twentieth":
            return directory_select(ds, q.parse_query(TWENTIETH_EXPR, schema), scenario)
        if scenario == "directory-select":
            return directory_select(ds, q.parse_query(query or ELECTRON_EXPR, schema), scenario)
        if scenario == "directory-fallback":
            return directory_fallback(ds, q.parse_query(query or ET_QUERY, schema), scenario)
        if scenario == "tag-query":
            return tag_query(ds, q.parse_query(query or ET_QUERY, schema), scenario)
        return tag_query_only(ds.federation, q.parse_query(query or "true", schema), scenario)

    results = [once() for _ in range(max(1, repeat))]
    first = results[0]
    for r in results[1:]:
        if (r.scanned, r.selected) != (first.scanned, first.selected):
            raise RuntimeError(f"{scenario}: counts changed between repeats")
    return min(results, key=lambda r: r.cpu)


# query-rate sweeps

SWEEP_TERMS = (
    "ET_TOTAL >= 0",
    "CAL_E >= 0",
    "MISS_ET >= 0",
    "NTRK_PRIM >= 0",
    "FNC_E >= 0",
    "LPS_XL > 0",
)
SIZE_QUERY = "ET_TOTAL > 10 and NTRK_PRIM > 2"


def sweep_query(k: int) -> str:
    return " and ".join(SWEEP_TERMS[:k]) if k else "true"


def _interleaved(points: Sequence[tuple[Federation, q.Node, dict]], repeat: int) -> list[ScenarioResult]:
    # rounds visit every point in turn so slow drift in machine load is shared
    best: list[ScenarioResult | None] = [None] * len(points)
    for _ in range(max(1, repeat)):
        for i, (fed, ast, params) in enumerate(points):
            r = tag_query_only(fed, ast, **params)
            if best[i] is None or r.cpu < best[i].cpu:
                best[i] = r
    return best


def variables_sweep(fed: Federation, max_vars: int = 6, repeat: int = 3) -> list[ScenarioResult]:
    points = [
        (fed, q.parse_query(sweep_query(k), fed.schema), dict(series="rate_vs_query_variables", x=k))
        for k in range(max_vars + 1)
    ]
    return _interleaved(points, repeat)


def size_sweep(feds: Sequence[Federation], repeat: int = 3) -> list[ScenarioResult]:
    points = [
        (fed, q.parse_query(SIZE_QUERY, fed.schema), dict(series="rate_vs_db_size", x=fed.n_records))
        for fed in feds
    ]
    return _interleaved(points, repeat)


# reports

REPORT_FORMATS = ("table", "csv", "plotdata")
_COLUMNS = ("scenario", "events_scanned", "events_selected", "cpu_s", "wall_s", "ms_per_scanned", "ms_per_selected")


def _row(r: ScenarioResult) -> tuple:
    return (
        r.name,
        r.scanned,
        r.selected,
        f"{r.cpu:.3f}",
        f"{r.wall:.3f}",
        f"{1e3 * r.cpu_per_scanned:.4f}",
        f"{1e3 * r.cpu_per_selected:.4f}",
    )


def emit_report(results: Sequence[ScenarioResult], fmt: str = "table") -> str:
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; choose from {', '.join(REPORT_FORMATS)}")
    if not results:
        raise ValueError("no results to report")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_COLUMNS)
        w.writerows(_row(r) for r in results)
        return buf.getvalue()
    if fmt == "table":
        head = ("Selection", "Events scanned", "Events selected", "CPU [s]", "Wall [s]", "ms/scanned", "ms/selected")
        rows = [head] + [_row(r) for r in results]
        widths = [max(len(str(row[i])) for row in rows) for i in range(len(head))]
        line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
        fmt_row = lambda row: "| " + " | ".join(str(c).ljust(w) for c, w in zip(row, widths)) + " |"
        return "\n".join([line, fmt_row(head), line, *(fmt_row(r) for r in rows[1:]), line]) + "\n"
    series: dict[str, list[ScenarioResult]] = {}
    for r in results:
        if "x" not in r.params:
            raise ValueError(f"result {r.name!r} has no sweep coordinate for plotdata")
        series.setdefault(r.params.get("series", r.name), []).append(r)
    out = []
    for label, rs in series.items():
        out.append(f"# {label}: x rate_events_per_cpu_s")
        out += [f"{r.params['x']} {r.rate:.1f}" for r in rs]
    return "\n".join(out) + "\n"


def save_results(results: Sequence[ScenarioResult], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in results], indent=1))


def load_results(path: str | Path) -> list[ScenarioResult]:
    return [ScenarioResult.from_dict(d) for d in json.loads(Path(path).read_text())]
