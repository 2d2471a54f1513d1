"""Predicate language over tag variables and flag bits.

Grammar (keywords case-insensitive)::

    expr     := and_expr ("or" and_expr)*
    and_expr := not_expr ("and" not_expr)*
    not_expr := "not" not_expr | atom
    atom     := "(" expr ")" | "true" | "false"
              | "flag" "(" [GROUP ","] INT ")"
              | NAME OP NUMBER
    OP       := "<" | "<=" | ">" | ">=" | "==" | "!="

``flag(N)`` without a group tests the offline selection flags, i.e. the same
128 bits an event directory carries.  Comparisons against a missing value are
false; ``not`` is applied afterwards, so ``not (X > 1)`` is true for a record
where X is missing.
"""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Union

import numpy as np

from .schema import OFFLINE_GROUP, TagSchema

OPS: dict[str, Callable[[float, float], bool]] = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}


@dataclass(frozen=True)
class Compare:
    name: str
    op: str
    value: float


@dataclass(frozen=True)
class FlagTest:
    group: str
    bit: int


@dataclass(frozen=True)
class And:
    terms: tuple["Node", ...]


@dataclass(frozen=True)
class Or:
    terms: tuple["Node", ...]


@dataclass(frozen=True)
class Not:
    term: "Node"


@dataclass(frozen=True)
class ConstTrue:
    pass


@dataclass(frozen=True)
class ConstFalse:
    pass


Node = Union[Compare, FlagTest, And, Or, Not, ConstTrue, ConstFalse]
TRUE = ConstTrue()
FALSE = ConstFalse()


def flag(bit: int, group: str = OFFLINE_GROUP) -> FlagTest:
    return FlagTest(group, bit)


def all_of(*terms: Node) -> Node:
    return terms[0] if len(terms) == 1 else And(tuple(terms))


def any_of(*terms: Node) -> Node:
    return terms[0] if len(terms) == 1 else Or(tuple(terms))


class QueryError(ValueError):
    pass


class QuerySyntaxError(QueryError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        pointer = f"\n  {text}\n  {' ' * position}^" if text else ""
        super().__init__(f"{message} at position {position}{pointer}")


class UnknownNameError(QueryError):
    pass


class BitRangeError(QueryError):
    pass


# parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<op><=|>=|==|!=|<|>)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),])
    """,
    re.VERBOSE,
)
_KEYWORDS = {"and", "or", "not", "true", "false", "flag"}


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            word = m.group()
            if kind == "name" and word.lower() in _KEYWORDS:
                kind = word.lower()
            toks.append(_Tok(kind, word, pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, schema: TagSchema):
        self.text = text
        self.schema = schema
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def take(self, kind: str, what: str | None = None) -> _Tok:
        tok = self.tok
        if tok.kind != kind or (what is not None and tok.text != what):
            expected = what or kind
            found = tok.text or "end of input"
            raise QuerySyntaxError(f"expected {expected}, found {found!r}", tok.pos, self.text)
        self.i += 1
        return tok

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "eof":
            raise QuerySyntaxError(f"unexpected {self.tok.text!r}", self.tok.pos, self.text)
        return node

    def expr(self) -> Node:
        terms = [self.and_expr()]
        while self.tok.kind == "or":
            self.i += 1
            terms.append(self.and_expr())
        return terms[0] if len(terms) == 1 else Or(tuple(terms))

    def and_expr(self) -> Node:
        terms = [self.not_expr()]
        while self.tok.kind == "and":
            self.i += 1
            terms.append(self.not_expr())
        return terms[0] if len(terms) == 1 else And(tuple(terms))

    def not_expr(self) -> Node:
        if self.tok.kind == "not":
            self.i += 1
            return Not(self.not_expr())
        return self.atom()

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "punct" and tok.text == "(":
            self.i += 1
            node = self.expr()
            self.take("punct", ")")
            return node
        if tok.kind == "true":
            self.i += 1
            return TRUE
        if tok.kind == "false":
            self.i += 1
            return FALSE
        if tok.kind == "flag":
            return self.flag_test()
        if tok.kind == "name":
            return self.comparison()
        raise QuerySyntaxError(f"unexpected {tok.text or 'end of input'!r}", tok.pos, self.text)

    def flag_test(self) -> FlagTest:
        self.take("flag")
        self.take("punct", "(")
        group = OFFLINE_GROUP
        group_tok = None
        if self.tok.kind == "name":
            group_tok = self.take("name")
            self.take("punct", ",")
        bit_tok = self.take("number")
        self.take("punct", ")")
        if group_tok is not None:
            group = self._resolve(group_tok)
        if group not in self.schema or not self.schema[group].is_bitgroup:
            pos = group_tok.pos if group_tok else bit_tok.pos
            raise UnknownNameError(f"{group!r} is not a flag group of this schema (position {pos})")
        if not re.fullmatch(r"\d+", bit_tok.text):
            raise QuerySyntaxError("flag index must be a non-negative integer", bit_tok.pos, self.text)
        bit = int(bit_tok.text)
        width = self.schema[group].width
        if bit >= width:
            raise BitRangeError(f"flag index {bit} out of range for {group} (0..{width - 1})")
        return FlagTest(group, bit)

    def comparison(self) -> Compare:
        name_tok = self.take("name")
        name = self._resolve(name_tok)
        desc = self.schema[name]
        if desc.is_bitgroup:
            raise UnknownNameError(f"{name} is a flag group; use flag({name}, N)")
        if desc.width != 1:
            raise UnknownNameError(f"{name} has {desc.width} slots; only single-slot variables compare")
        op = self.take("op").text
        value = float(self.take("number").text)
        return Compare(name, op, value)

    def _resolve(self, tok: _Tok) -> str:
        try:
            return self.schema.resolve(tok.text)
        except KeyError:
            raise UnknownNameError(f"unknown variable {tok.text!r} at position {tok.pos}") from None


def parse_query(text: str, schema: TagSchema) -> Node:
    return _Parser(text, schema).parse()


def validate(ast: Node, schema: TagSchema) -> Node:
    """Check names and bit ranges of a hand-built AST; returns it unchanged."""
    for node in walk(ast):
        if isinstance(node, Compare):
            if node.name not in schema or schema[node.name].is_bitgroup:
                raise UnknownNameError(f"unknown scalar variable {node.name!r}")
            if node.op not in OPS:
                raise QueryError(f"unknown operator {node.op!r}")
        elif isinstance(node, FlagTest):
            if node.group not in schema or not schema[node.group].is_bitgroup:
                raise UnknownNameError(f"unknown flag group {node.group!r}")
            if not 0 <= node.bit < schema[node.group].width:
                raise BitRangeError(f"flag index {node.bit} out of range for {node.group}")
    return ast


def load_queries(path: str | Path) -> list[str]:
    """Read a query file: one query per line, '#' starts a comment."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


# inspection

def walk(ast: Node) -> Iterator[Node]:
    yield ast
    if isinstance(ast, (And, Or)):
        for t in ast.terms:
            yield from walk(t)
    elif isinstance(ast, Not):
        yield from walk(ast.term)


def referenced_names(ast: Node) -> set[str]:
    names = set()
    for node in walk(ast):
        if isinstance(node, Compare):
            names.add(node.name)
        elif isinstance(node, FlagTest):
            names.add(node.group)
    return names


def count_variables(ast: Node) -> int:
    return len(referenced_names(ast))


def format_query(ast: Node) -> str:
    if isinstance(ast, Compare):
        return f"{ast.name} {ast.op} {ast.value!r}"
    if isinstance(ast, FlagTest):
        return f"flag({ast.group}, {ast.bit})"
    if isinstance(ast, And):
        return "(" + " and ".join(format_query(t) for t in ast.terms) + ")"
    if isinstance(ast, Or):
        return "(" + " or ".join(format_query(t) for t in ast.terms) + ")"
    if isinstance(ast, Not):
        return f"not {format_query(ast.term)}"
    if isinstance(ast, ConstTrue):
        return "true"
    if isinstance(ast, ConstFalse):
        return "false"
    raise TypeError(f"not a query node: {ast!r}")


# evaluation

def evaluate(ast: Node, record) -> bool:
    """Evaluate against one tag record (anything with ``values`` and ``bits`` mappings)."""
    if isinstance(ast, Compare):
        value = record.values.get(ast.name)
        if value is None:
            return False
        return OPS[ast.op](float(value), ast.value)
    if isinstance(ast, FlagTest):
        words = record.bits[ast.group]
        return bool((words[ast.bit >> 5] >> (ast.bit & 31)) & 1)
    if isinstance(ast, And):
        return all(evaluate(t, record) for t in ast.terms)
    if isinstance(ast, Or):
        return any(evaluate(t, record) for t in ast.terms)
    if isinstance(ast, Not):
        return not evaluate(ast.term, record)
    if isinstance(ast, ConstTrue):
        return True
    if isinstance(ast, ConstFalse):
        return False
    raise TypeError(f"not a query node: {ast!r}")


_NP_OPS = {
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
    "==": np.equal,
    "!=": np.not_equal,
}


def compile_mask(ast: Node, schema: TagSchema) -> Callable[[np.ndarray], np.ndarray]:
    """Compile to a function mapping a record slab (structured array) to a bool mask."""
    validate(ast, schema)

    def build(node: Node):
        if isinstance(node, Compare):
            idx = schema.index[node.name]
            byte, bit = idx >> 3, np.uint8(1 << (idx & 7))
            op = _NP_OPS[node.op]
            name, value = node.name, node.value

            def compare(arr):
                present = (arr["presence"][:, byte] & bit) != 0
                return present & op(arr[name].astype(np.float64), value)

            return compare
        if isinstance(node, FlagTest):
            word, shift, group = node.bit >> 5, np.uint32(node.bit & 31), node.group
            return lambda arr: ((arr[group][:, word] >> shift) & np.uint32(1)).astype(bool)
        if isinstance(node, (And, Or)):
            parts = [build(t) for t in node.terms]
            is_and = isinstance(node, And)

            def combine(arr):
                mask = parts[0](arr)
                for part in parts[1:]:
                    # stop early once the outcome is fixed for every row
                    if is_and and not mask.any():
                        break
                    if not is_and and mask.all():
                        break
                    mask = (mask & part(arr)) if is_and else (mask | part(arr))
                return mask

            return combine
        if isinstance(node, Not):
            inner = build(node.term)
            return lambda arr: ~inner(arr)
        if isinstance(node, ConstTrue):
            return lambda arr: np.ones(len(arr), dtype=bool)
        if isinstance(node, ConstFalse):
            return lambda arr: np.zeros(len(arr), dtype=bool)
        raise TypeError(f"not a query node: {node!r}")

    return build(ast)
