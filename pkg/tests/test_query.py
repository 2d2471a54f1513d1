import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evtag import query as q
from evtag.event_store import RecordLocation
from evtag.schema import default_schema
from evtag.tagdb import TagRecord, records_to_array


@pytest.fixture(scope="module")
def schema():
    return default_schema()


def test_parse_shapes(schema):
    ast = q.parse_query("ET_TOTAL > 30 and not flag(3) or flag(FLT, 7)", schema)
    assert ast == q.Or(
        (
            q.And((q.Compare("ET_TOTAL", ">", 30.0), q.Not(q.FlagTest("OFFLINE", 3)))),
            q.FlagTest("FLT", 7),
        )
    )
    assert q.parse_query("(true)", schema) == q.TRUE
    assert q.parse_query("FALSE", schema) == q.FALSE
    assert q.parse_query("et_total<=-1.5e1", schema) == q.Compare("ET_TOTAL", "<=", -15.0)


@pytest.mark.parametrize(
    "text, pos",
    [
        ("ET_TOTAL >", 10),
        ("ET_TOTAL > 3 and", 16),
        ("(flag(1)", 8),
        ("ET_TOTAL ? 3", 9),
        ("flag(1) flag(2)", 8),
        ("ET_TOTAL 3", 9),
        ("", 0),
    ],
)
def test_syntax_errors_report_position(schema, text, pos):
    with pytest.raises(q.QuerySyntaxError) as err:
        q.parse_query(text, schema)
    assert err.value.position == pos


def test_name_and_range_errors(schema):
    with pytest.raises(q.UnknownNameError):
        q.parse_query("NOPE > 1", schema)
    with pytest.raises(q.UnknownNameError):
        q.parse_query("flag(NOPE, 1)", schema)
    with pytest.raises(q.UnknownNameError):
        q.parse_query("OFFLINE > 1", schema)
    with pytest.raises(q.BitRangeError):
        q.parse_query("flag(OFFLINE, 128)", schema)
    with pytest.raises(q.BitRangeError):
        q.parse_query("flag(TLT, 352)", schema)
    assert q.parse_query("flag(TLT, 351)", schema) == q.FlagTest("TLT", 351)
    with pytest.raises(q.QuerySyntaxError):
        q.parse_query("flag(1.5)", schema)
    with pytest.raises(q.BitRangeError):
        q.validate(q.flag(200), schema)
    with pytest.raises(q.UnknownNameError):
        q.validate(q.Compare("OFFLINE", ">", 1), schema)


def test_count_variables(schema):
    cases = {
        "true": 0,
        "ET_TOTAL > 1": 1,
        "ET_TOTAL > 1 and ET_TOTAL < 5": 1,
        "flag(1) and flag(2) and not flag(3)": 1,
        "flag(1) or flag(FLT, 2)": 2,
        "ET_TOTAL > 1 and CAL_E > 2 or MISS_ET < 3 and flag(0)": 4,
    }
    for text, n in cases.items():
        assert q.count_variables(q.parse_query(text, schema)) == n


def test_load_queries(tmp_path):
    p = tmp_path / "queries.txt"
    p.write_text("# cuts\nET_TOTAL > 30   # high ET\n\n flag(3)\n")
    assert q.load_queries(p) == ["ET_TOTAL > 30", "flag(3)"]


# random records and expressions

NAMES = ("ET_TOTAL", "CAL_E", "ELEC_E", "NTRK_PRIM")
THRESHOLDS = (-1.0, 0.0, 2.5, 10.0, 30.0)


def ast_strategy(flag_only=False):
    leaves = [st.builds(q.flag, st.integers(0, 127)), st.just(q.TRUE), st.just(q.FALSE)]
    if not flag_only:
        leaves.append(
            st.builds(q.Compare, st.sampled_from(NAMES), st.sampled_from(sorted(q.OPS)), st.sampled_from(THRESHOLDS))
        )
    return st.recursive(
        st.one_of(leaves),
        lambda kids: st.one_of(
            st.builds(q.Not, kids),
            st.builds(lambda ts: q.And(tuple(ts)), st.lists(kids, min_size=2, max_size=3)),
            st.builds(lambda ts: q.Or(tuple(ts)), st.lists(kids, min_size=2, max_size=3)),
        ),
        max_leaves=8,
    )


def random_records(rng, n):
    recs = []
    for i in range(n):
        values = {}
        for name in NAMES:
            if rng.random() < 0.8:
                values[name] = float(np.float32(rng.choice([0.0, 2.5, 10.0, 30.0, rng.normal(10, 15)])))
        words = tuple(int(w) for w in rng.integers(0, 2**32, 4, dtype=np.uint64))
        bits = {"OFFLINE": words}
        recs.append(TagRecord(1, i + 1, RecordLocation("f", 8 + i), values, bits))
    return recs


def to_python(ast) -> str:
    """Translate to a Python boolean expression over ``v`` (values) and ``w`` (flag words)."""
    if isinstance(ast, q.Compare):
        return f"(v.get({ast.name!r}) is not None and v[{ast.name!r}] {ast.op} {ast.value!r})"
    if isinstance(ast, q.FlagTest):
        return f"(w[{ast.bit // 32}] & {1 << (ast.bit % 32)} != 0)"
    if isinstance(ast, q.And):
        return "(" + " and ".join(map(to_python, ast.terms)) + ")"
    if isinstance(ast, q.Or):
        return "(" + " or ".join(map(to_python, ast.terms)) + ")"
    if isinstance(ast, q.Not):
        return f"(not {to_python(ast.term)})"
    return "True" if isinstance(ast, q.ConstTrue) else "False"


def oracle_all(ast, recs) -> list[bool]:
    fn = eval(f"lambda v, w: {to_python(ast)}")
    return [bool(fn(r.values, r.bits["OFFLINE"])) for r in recs]


@pytest.fixture(scope="module")
def sample(schema):
    recs = random_records(np.random.default_rng(5), 10_000)
    arr, _ = records_to_array(recs, schema)
    return recs, arr


@given(ast_strategy())
def test_evaluate_matches_oracle_and_mask(schema, sample, ast):
    recs, arr = sample
    sub = recs[:500]
    expected = oracle_all(ast, sub)
    assert [q.evaluate(ast, r) for r in sub] == expected
    assert q.compile_mask(ast, schema)(arr[:500]).tolist() == expected


def test_mask_over_ten_thousand_records(schema, sample):
    recs, arr = sample
    rng = np.random.default_rng(9)
    for _ in range(25):
        ast = _random_ast(rng, 3)
        mask = q.compile_mask(ast, schema)(arr)
        assert mask.tolist() == oracle_all(ast, recs)


def _random_ast(rng, depth):
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.5:
            return q.flag(int(rng.integers(128)))
        return q.Compare(str(rng.choice(NAMES)), str(rng.choice(sorted(q.OPS))), float(rng.choice(THRESHOLDS)))
    kind = rng.integers(3)
    if kind == 0:
        return q.Not(_random_ast(rng, depth - 1))
    terms = tuple(_random_ast(rng, depth - 1) for _ in range(int(rng.integers(2, 4))))
    return q.And(terms) if kind == 1 else q.Or(terms)


@given(ast_strategy())
def test_format_round_trip(schema, ast):
    assert q.parse_query(q.format_query(ast), schema) == ast


@given(st.floats(allow_nan=False, allow_infinity=False, width=32))
def test_number_round_trip(schema, x):
    ast = q.Compare("ET_TOTAL", ">=", x)
    assert q.parse_query(q.format_query(ast), schema) == ast


@given(ast_strategy(), ast_strategy())
def test_de_morgan(schema, sample, a, b):
    _, arr = sample
    arr = arr[:300]
    lhs = q.compile_mask(q.Not(q.And((a, b))), schema)(arr)
    rhs = q.compile_mask(q.Or((q.Not(a), q.Not(b))), schema)(arr)
    assert np.array_equal(lhs, rhs)


def test_missing_value_semantics(schema):
    rec = TagRecord(1, 1, RecordLocation("f", 8), {}, {"OFFLINE": (0, 0, 0, 0)})
    for op in q.OPS:
        assert not q.evaluate(q.Compare("ELEC_E", op, 1.0), rec)
    assert q.evaluate(q.parse_query("not ELEC_E > 1", schema), rec)
    arr, _ = records_to_array([rec], schema)
    assert not q.compile_mask(q.parse_query("ELEC_E != 1", schema), schema)(arr)[0]


def test_float32_storage_comparison(schema):
    # values are stored as float32; a comparison sees the stored value
    x = float(np.float32(0.1))
    rec = TagRecord(1, 1, RecordLocation("f", 8), {"CAL_E": x}, {"OFFLINE": (0,) * 4})
    arr, _ = records_to_array([rec], schema)
    ast = q.Compare("CAL_E", "==", x)
    assert q.evaluate(ast, rec) and q.compile_mask(ast, schema)(arr)[0]
    assert not math.isclose(x, 0.1, rel_tol=1e-12)
