"""Tag variable schema and its fixed binary record layout.

A tag record is one packed little-endian row::

    run u32 | event u32 | loc_file u32 | loc_offset u64 |
    presence bytes (one bit per variable) |
    one slot per scalar variable (float32 / int32, ``width`` slots) |
    bitgroups as ``width / 32`` uint32 words

The row is expressed as a numpy structured dtype so containers can be read
as whole slabs and single variables can be rewritten in place.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

KINDS = ("float32", "int32", "bitgroup")
HEADER_FIELDS = [("run", "<u4"), ("event", "<u4"), ("loc_file", "<u4"), ("loc_offset", "<u8")]
HEADER_SIZE = 20

# Required bitgroup sizes by name.
BITGROUP_SIZES = {"FLT": 64, "SLT": 192, "TLT": 352, "OFFLINE": 128, "MISC": 64}
OFFLINE_GROUP = "OFFLINE"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class VarDesc:
    name: str
    kind: str = "float32"
    width: int = 1
    group: str = ""

    @property
    def is_bitgroup(self) -> bool:
        return self.kind == "bitgroup"

    @property
    def nbytes(self) -> int:
        return self.width // 8 if self.is_bitgroup else 4 * self.width

    @property
    def dtype(self):
        if self.is_bitgroup:
            return ("<u4", (self.width // 32,))
        base = "<f4" if self.kind == "float32" else "<i4"
        return base if self.width == 1 else (base, (self.width,))


@dataclass(frozen=True)
class TagSchema:
    variables: tuple[VarDesc, ...]
    version: int = 1

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for v in self.variables:
            if v.name in seen:
                raise SchemaError(f"duplicate variable name {v.name!r}")
            seen.add(v.name)
            if v.name in ("run", "event", "loc_file", "loc_offset", "presence"):
                raise SchemaError(f"variable name {v.name!r} is reserved")
            if v.kind not in KINDS:
                raise SchemaError(f"{v.name}: unknown kind {v.kind!r}")
            if v.width < 1:
                raise SchemaError(f"{v.name}: width must be positive")
            if v.is_bitgroup:
                if v.width % 32:
                    raise SchemaError(f"{v.name}: bitgroup width must be a multiple of 32")
                want = BITGROUP_SIZES.get(v.name)
                if want is not None and v.width != want:
                    raise SchemaError(f"bitgroup {v.name} must have {want} bits, got {v.width}")

    @cached_property
    def index(self) -> dict[str, int]:
        return {v.name: i for i, v in enumerate(self.variables)}

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def __getitem__(self, name: str) -> VarDesc:
        try:
            return self.variables[self.index[name]]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None

    def resolve(self, name: str) -> str:
        """Return the canonical name, matching case-insensitively as a fallback."""
        if name in self.index:
            return name
        matches = [v.name for v in self.variables if v.name.upper() == name.upper()]
        if len(matches) == 1:
            return matches[0]
        raise KeyError(f"unknown variable {name!r}")

    @property
    def scalars(self) -> list[VarDesc]:
        return [v for v in self.variables if not v.is_bitgroup]

    @property
    def bitgroups(self) -> list[VarDesc]:
        return [v for v in self.variables if v.is_bitgroup]

    @property
    def scalar_slots(self) -> int:
        return sum(v.width for v in self.scalars)

    @property
    def presence_bytes(self) -> int:
        return (len(self.variables) + 7) // 8

    @cached_property
    def dtype(self) -> np.dtype:
        fields = list(HEADER_FIELDS) + [("presence", "u1", (self.presence_bytes,))]
        fields += [(v.name, *([v.dtype] if isinstance(v.dtype, str) else v.dtype)) for v in self.variables]
        dt = np.dtype(fields)
        assert dt.itemsize == self.record_size
        return dt

    @property
    def record_size(self) -> int:
        return HEADER_SIZE + self.presence_bytes + sum(v.nbytes for v in self.variables)

    def field_span(self, name: str) -> tuple[int, int]:
        """Byte range ``[start, stop)`` of a variable within one record."""
        start = self.dtype.fields[name][1]
        return start, start + self[name].nbytes

    def presence_span(self, name: str) -> tuple[int, int]:
        start = self.dtype.fields["presence"][1] + self.index[name] // 8
        return start, start + 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "variables": [[v.name, v.kind, v.width, v.group] for v in self.variables],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "TagSchema":
        doc = json.loads(text)
        return cls(tuple(VarDesc(*row) for row in doc["variables"]), doc.get("version", 1))

    @cached_property
    def hash(self) -> str:
        canon = json.dumps([[v.name, v.kind, v.width] for v in self.variables], separators=(",", ":"))
        return hashlib.blake2b(canon.encode(), digest_size=16).hexdigest()


MIN_SCALAR_SLOTS = 201


def define_schema(descriptors: Iterable[VarDesc | Sequence], version: int = 1, *, strict: bool = True) -> TagSchema:
    """Build a schema from ``VarDesc`` objects or ``(name, kind, width, group)`` tuples.

    ``strict`` additionally demands a full tag layout: all five flag groups
    and more than 200 scalar slots.  Compact schemas for tests and tools pass
    ``strict=False``.
    """
    variables = tuple(d if isinstance(d, VarDesc) else VarDesc(*d) for d in descriptors)
    schema = TagSchema(variables, version)
    if strict:
        missing = [g for g in BITGROUP_SIZES if g not in schema or not schema[g].is_bitgroup]
        if missing:
            raise SchemaError(f"schema lacks flag groups {missing}")
        if schema.scalar_slots < MIN_SCALAR_SLOTS:
            raise SchemaError(f"schema has {schema.scalar_slots} scalar slots, need more than 200")
    return schema


def _numbered(prefix: str, n: int, start: int = 1) -> list[str]:
    return [f"{prefix}{i:02d}" for i in range(start, start + n)]


_ELEC_CAL = ["E", "ECORR", "THETA", "PHI", "X", "Y", "Z", "PROB", "EHAD", "ISOL", "NCELL", "ECLUS", "TIME"]
_ELEC_POS = ["SRTD_X", "SRTD_Y", "HES_X", "HES_Y", "TRK_THETA", "TRK_PHI", "TRK_P", "TRK_DCA", "PRES_E", "BPC_X", "BPC_Y"]
_ELEC2 = ["E", "THETA", "PHI", "PROB", "ISOL"]
_KIN = ["Q2", "X", "Y", "W", "YJB", "Q2DA", "XDA"]
_GLOBAL = ["CAL_E", "ET_TOTAL", "MISS_ET", "MISS_ET_PHI", "CAL_PX", "CAL_PY", "CAL_PZ", "CAL_EMPZ"] + _numbered("CAL_GLB", 18)
_VERTEX = ["NTRK_PRIM", "NTRK_SEC", "VTX_X", "VTX_Y", "VTX_Z", "VTX_CHI2", "NTRK_VTX", "NVTX_SEC", "SVTX_Z", "NTRK_TOT"]
_JET_FIELDS = ["N", "ET1", "ETA1", "PHI1", "ET2", "ETA2", "PHI2"]


def _default_groups() -> list[tuple[str, list[str]]]:
    groups = [
        ("elec_a1_cal", [f"ELEC_{s}" for s in _ELEC_CAL]),
        ("elec_a1_pos", [f"ELEC_{s}" for s in _ELEC_POS]),
        ("elec_a2", [f"ELEC2_{s}" for s in _ELEC2]),
        ("elec_b1_cal", [f"ELECB_{s}" for s in _ELEC_CAL]),
        ("elec_b1_pos", [f"ELECB_{s}" for s in _ELEC_POS]),
        ("elec_b2", [f"ELECB2_{s}" for s in _ELEC2]),
        ("kin_a", [f"KIN_A_{s}" for s in _KIN]),
        ("kin_b", [f"KIN_B_{s}" for s in _KIN]),
        ("cal_global", _GLOBAL),
        ("cal_parts", ["E_FCAL", "E_BCAL", "E_RCAL"]),
        ("had_4vec", [f"HAD{m}_{c}" for m in (1, 2) for c in ("PX", "PY", "PZ", "E")]),
        ("tracking", _VERTEX),
        ("tracking_et", ["TRK_ET", "TRK_PT", "TRK_PX", "TRK_PY", "TRK_EMPZ"]),
        ("lumi", _numbered("LUMI", 6)),
        ("muon_system", _numbered("MUSYS", 7)),
        ("muons", ["NMU", "MU_P", "MU_THETA", "MU_PHI", "MU_QUAL", "MU_ISOL"]),
        ("leading_proton", ["LPS_XL", "LPS_PT", "LPS_T"] + _numbered("LPS", 4, 4)),
        ("beampipe_cal", ["BPC_E"] + _numbered("BPC", 6, 2)),
        ("forward_neutron", ["FNC_E"] + _numbered("FNC", 4, 2)),
        ("low_angle", _numbered("LAT", 7)),
        ("jets", [f"JET{k}_{f}" for k in range(1, 5) for f in _JET_FIELDS]),
        ("charm", [f"{m}_{f}" for m in ("DSTAR", "D0", "DS") for f in ("N", "M", "DM", "PT", "ETA")]),
    ]
    return groups


# Group sizes, in order, that the default layout reproduces.
DEFAULT_GROUP_SIZES = (13, 11, 5, 13, 11, 5, 7, 7, 26, 3, 8, 10, 5, 6, 7, 6, 7, 7, 5, 7, 28, 15)


def default_schema() -> TagSchema:
    descs = [VarDesc(name, "bitgroup", width, "flags") for name, width in BITGROUP_SIZES.items()]
    for group, names in _default_groups():
        descs += [VarDesc(n, "float32", 1, group) for n in names]
    return define_schema(descs)
