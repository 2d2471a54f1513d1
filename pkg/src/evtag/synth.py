"""Synthetic reconstruction output: per-event physics summaries and flags.

An event payload starts with ``b"PSUM"`` followed by one packed
:data:`SUMMARY_DTYPE` row; the rest is filler so that events have a
realistic size.  Summaries are drawn vectorised per run from a seeded
generator, so the same seed always yields the same bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from .event_store import EventRecord

PAYLOAD_MAGIC = b"PSUM"

SUMMARY_DTYPE = np.dtype(
    [
        ("e_total", "<f4"),
        ("et", "<f4"),
        ("missing_et", "<f4"),
        ("missing_et_phi", "<f4"),
        ("n_elec_a", "<i4"),
        ("elec_a_e", "<f4"),
        ("elec_a_theta", "<f4"),
        ("elec_a_phi", "<f4"),
        ("elec2_a_e", "<f4"),
        ("n_elec_b", "<i4"),
        ("elec_b_e", "<f4"),
        ("elec_b_theta", "<f4"),
        ("elec_b_phi", "<f4"),
        ("elec2_b_e", "<f4"),
        ("q2_a", "<f4"),
        ("x_a", "<f4"),
        ("y_a", "<f4"),
        ("q2_b", "<f4"),
        ("x_b", "<f4"),
        ("y_b", "<f4"),
        ("vtx_x", "<f4"),
        ("vtx_y", "<f4"),
        ("vtx_z", "<f4"),
        ("n_trk_prim", "<i4"),
        ("n_trk_sec", "<i4"),
        ("n_jets", "<i4"),
        ("jet_et1", "<f4"),
        ("jet_et2", "<f4"),
        ("n_muons", "<i4"),
        ("muon_p", "<f4"),
        ("fnc_e", "<f4"),
        ("lps_xl", "<f4"),
        ("flags", "<u4", (4,)),
    ]
)
SUMMARY_SIZE = len(PAYLOAD_MAGIC) + SUMMARY_DTYPE.itemsize


class PayloadError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicsSummary:
    """Per-event quantities in GeV (energies) and cm (positions)."""

    e_total: float = 0.0
    et: float = 0.0
    missing_et: float = 0.0
    missing_et_phi: float = 0.0
    n_elec_a: int = 0
    elec_a_e: float = 0.0
    elec_a_theta: float = 0.0
    elec_a_phi: float = 0.0
    elec2_a_e: float = 0.0
    n_elec_b: int = 0
    elec_b_e: float = 0.0
    elec_b_theta: float = 0.0
    elec_b_phi: float = 0.0
    elec2_b_e: float = 0.0
    q2_a: float = 0.0
    x_a: float = 0.0
    y_a: float = 0.0
    q2_b: float = 0.0
    x_b: float = 0.0
    y_b: float = 0.0
    vtx_x: float = 0.0
    vtx_y: float = 0.0
    vtx_z: float = 0.0
    n_trk_prim: int = 0
    n_trk_sec: int = 0
    n_jets: int = 0
    jet_et1: float = 0.0
    jet_et2: float = 0.0
    n_muons: int = 0
    muon_p: float = 0.0
    fnc_e: float = 0.0
    lps_xl: float = 0.0
    flags: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self) -> None:
        if self.et < 0 or self.missing_et < 0:
            raise ValueError("transverse energies must be non-negative")
        if self.n_trk_prim < 0 or self.n_trk_sec < 0:
            raise ValueError("track counts must be non-negative")

    def to_row(self) -> np.ndarray:
        row = np.zeros(1, dtype=SUMMARY_DTYPE)
        for f in fields(self):
            row[f.name] = getattr(self, f.name)
        return row

    def to_bytes(self) -> bytes:
        return PAYLOAD_MAGIC + self.to_row().tobytes()

    @classmethod
    def from_row(cls, row) -> "PhysicsSummary":
        kw = {}
        for f in fields(cls):
            v = row[f.name]
            if f.name == "flags":
                kw[f.name] = tuple(int(w) for w in v)
            elif SUMMARY_DTYPE[f.name].kind == "i":
                kw[f.name] = int(v)
            else:
                kw[f.name] = float(v)
        return cls(**kw)


def decode_summary(payload: bytes) -> PhysicsSummary:
    return PhysicsSummary.from_row(summary_row(payload))


def summary_row(payload: bytes) -> np.void:
    if len(payload) < SUMMARY_SIZE or payload[:4] != PAYLOAD_MAGIC:
        raise PayloadError("payload does not start with a physics summary")
    return np.frombuffer(payload, SUMMARY_DTYPE, count=1, offset=len(PAYLOAD_MAGIC))[0]


def flag_fn(event: EventRecord) -> list[bool]:
    """The 128 offline selection flags computed at reconstruction time."""
    words = summary_row(event.payload)["flags"]
    return [bool((int(words[i >> 5]) >> (i & 31)) & 1) for i in range(128)]


# Tag variables filled from a summary: (variable, summary field, presence rule).
# Rules name the condition under which the variable exists for an event.
TAG_MAP: tuple[tuple[str, str, str], ...] = (
    ("CAL_E", "e_total", "always"),
    ("ET_TOTAL", "et", "always"),
    ("MISS_ET", "missing_et", "always"),
    ("MISS_ET_PHI", "missing_et_phi", "always"),
    ("ELEC_E", "elec_a_e", "elec_a"),
    ("ELEC_THETA", "elec_a_theta", "elec_a"),
    ("ELEC_PHI", "elec_a_phi", "elec_a"),
    ("ELEC2_E", "elec2_a_e", "elec2_a"),
    ("ELECB_E", "elec_b_e", "elec_b"),
    ("ELECB_THETA", "elec_b_theta", "elec_b"),
    ("ELECB_PHI", "elec_b_phi", "elec_b"),
    ("ELECB2_E", "elec2_b_e", "elec2_b"),
    ("KIN_A_Q2", "q2_a", "elec_a"),
    ("KIN_A_X", "x_a", "elec_a"),
    ("KIN_A_Y", "y_a", "elec_a"),
    ("KIN_B_Q2", "q2_b", "elec_b"),
    ("KIN_B_X", "x_b", "elec_b"),
    ("KIN_B_Y", "y_b", "elec_b"),
    ("VTX_X", "vtx_x", "vertex"),
    ("VTX_Y", "vtx_y", "vertex"),
    ("VTX_Z", "vtx_z", "vertex"),
    ("NTRK_PRIM", "n_trk_prim", "always"),
    ("NTRK_SEC", "n_trk_sec", "always"),
    ("JET1_N", "n_jets", "always"),
    ("JET1_ET1", "jet_et1", "jets1"),
    ("JET1_ET2", "jet_et2", "jets2"),
    ("NMU", "n_muons", "always"),
    ("MU_P", "muon_p", "muon"),
    ("FNC_E", "fnc_e", "always"),
    ("LPS_XL", "lps_xl", "always"),
)


def rule_holds(rule: str, s: PhysicsSummary) -> bool:
    if rule == "always":
        return True
    if rule == "elec_a":
        return s.n_elec_a >= 1
    if rule == "elec2_a":
        return s.n_elec_a >= 2
    if rule == "elec_b":
        return s.n_elec_b >= 1
    if rule == "elec2_b":
        return s.n_elec_b >= 2
    if rule == "vertex":
        return s.n_trk_prim > 0
    if rule == "jets1":
        return s.n_jets >= 1
    if rule == "jets2":
        return s.n_jets >= 2
    if rule == "muon":
        return s.n_muons >= 1
    raise ValueError(f"unknown presence rule {rule!r}")


_RULE_THRESHOLDS = {
    "elec_a": ("n_elec_a", 1),
    "elec2_a": ("n_elec_a", 2),
    "elec_b": ("n_elec_b", 1),
    "elec2_b": ("n_elec_b", 2),
    "vertex": ("n_trk_prim", 1),
    "jets1": ("n_jets", 1),
    "jets2": ("n_jets", 2),
    "muon": ("n_muons", 1),
}


def rule_mask(rule: str, rows: np.ndarray) -> np.ndarray:
    """Vectorised presence rule over summary rows (a structured array or one row)."""
    if rule == "always":
        return np.ones(np.shape(rows), dtype=bool)
    column, threshold = _RULE_THRESHOLDS[rule]
    return rows[column] >= threshold


# generation

# Flags 3, 4 and 5 are derived from the physics quantities; the rest are
# drawn independently with their configured probabilities.
FLAG_ELECTRON_A = 3
FLAG_ELECTRON_B = 4
FLAG_HIGH_ET = 5
HIGH_ET_CUT = 20.0
DERIVED_FLAGS = (FLAG_ELECTRON_A, FLAG_ELECTRON_B, FLAG_HIGH_ET)

# Flag 0 selects about 1 event in 2, flag 1 about 1 in 20, flag 3
# (electron candidate found) 11 in 25.
DEFAULT_FLAG_PROBS = {0: 0.5, 1: 0.05, FLAG_ELECTRON_A: 0.44}
DEFAULT_FLAG_PROB = 0.1
# Exponential E_T scale giving P(E_T > 30 GeV) = 2750 / 45000.
DEFAULT_ET_SCALE = 30.0 / math.log(45000 / 2750)


@dataclass(frozen=True)
class PhysicsModel:
    flag_probs: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_FLAG_PROBS))
    default_flag_prob: float = DEFAULT_FLAG_PROB
    et_scale: float = DEFAULT_ET_SCALE

    def __post_init__(self) -> None:
        for bit, p in self.flag_probs.items():
            if not 0 <= bit < 128 or not 0.0 <= p <= 1.0:
                raise ValueError(f"bad flag probability {bit}: {p}")
        if self.et_scale <= 0:
            raise ValueError("et_scale must be positive")

    def prob(self, bit: int) -> float:
        return self.flag_probs.get(bit, self.default_flag_prob)


def generate_summaries(rng: np.random.Generator, n: int, model: PhysicsModel = PhysicsModel()) -> np.ndarray:
    rows = np.zeros(n, dtype=SUMMARY_DTYPE)
    if n == 0:
        return rows
    u = rng.random

    has_elec = u(n) < model.prob(FLAG_ELECTRON_A)
    n_a = np.where(has_elec, 1 + (u(n) < 0.2), 0)
    n_b = np.where(has_elec, np.where(u(n) < 0.9, n_a, 0), (u(n) < 0.02).astype(int))
    rows["n_elec_a"] = n_a
    rows["n_elec_b"] = n_b

    et = rng.exponential(model.et_scale, n)
    rows["et"] = et
    rows["e_total"] = et * (1.0 + rng.exponential(1.0, n))
    rows["missing_et"] = rng.exponential(3.0, n)
    rows["missing_et_phi"] = rng.uniform(-math.pi, math.pi, n)

    for tag, count in (("a", n_a), ("b", n_b)):
        rows[f"elec_{tag}_e"] = np.where(count > 0, rng.uniform(5.0, 30.0, n), 0.0)
        rows[f"elec_{tag}_theta"] = np.where(count > 0, rng.uniform(0.2, 3.0, n), 0.0)
        rows[f"elec_{tag}_phi"] = np.where(count > 0, rng.uniform(-math.pi, math.pi, n), 0.0)
        rows[f"elec2_{tag}_e"] = np.where(count > 1, rng.uniform(2.0, 15.0, n), 0.0)
        rows[f"q2_{tag}"] = np.where(count > 0, rng.lognormal(3.0, 1.0, n), 0.0)
        rows[f"x_{tag}"] = np.where(count > 0, rng.uniform(1e-4, 0.5, n), 0.0)
        rows[f"y_{tag}"] = np.where(count > 0, rng.uniform(0.01, 0.95, n), 0.0)

    rows["n_trk_prim"] = rng.poisson(8.0, n)
    rows["n_trk_sec"] = rng.poisson(1.0, n)
    has_vtx = rows["n_trk_prim"] > 0
    rows["vtx_x"] = np.where(has_vtx, rng.normal(0.0, 0.1, n), 0.0)
    rows["vtx_y"] = np.where(has_vtx, rng.normal(0.0, 0.1, n), 0.0)
    rows["vtx_z"] = np.where(has_vtx, rng.normal(0.0, 12.0, n), 0.0)

    rows["n_jets"] = rng.poisson(1.2, n)
    rows["jet_et1"] = np.where(rows["n_jets"] >= 1, 4.0 + rng.exponential(8.0, n), 0.0)
    rows["jet_et2"] = np.where(rows["n_jets"] >= 2, 4.0 + rng.exponential(4.0, n), 0.0)
    rows["n_muons"] = rng.poisson(0.1, n)
    rows["muon_p"] = np.where(rows["n_muons"] >= 1, 2.0 + rng.exponential(5.0, n), 0.0)
    rows["fnc_e"] = rng.exponential(50.0, n)
    rows["lps_xl"] = rng.uniform(0.3, 1.0, n)

    words = np.zeros((n, 4), dtype=np.uint64)
    for bit in range(128):
        if bit == FLAG_ELECTRON_A:
            on = n_a >= 1
        elif bit == FLAG_ELECTRON_B:
            on = n_b >= 1
        elif bit == FLAG_HIGH_ET:
            on = rows["et"] > HIGH_ET_CUT
        else:
            on = u(n) < model.prob(bit)
        words[:, bit >> 5] |= on.astype(np.uint64) << np.uint64(bit & 31)
    rows["flags"] = words.astype(np.uint32)
    return rows


def event_payload(row: np.void | np.ndarray, payload_bytes: int, rng: np.random.Generator) -> bytes:
    head = PAYLOAD_MAGIC + np.asarray(row, dtype=SUMMARY_DTYPE).tobytes()
    pad = payload_bytes - len(head)
    return head + rng.bytes(pad) if pad > 0 else head
