"""Detection event streams and their frozen on-disk formats.

Binary format: packed little-endian records of
    int64 gate_index | int32 t_in_gate (units of tag_resolution) | uint8 cause
13 bytes per event, no header. Tag resolution, gating frequency and gate
count travel out-of-band (run config / CLI flags).

Text format: one `gate_index,t_ps,cause` line per event, no header.

Run summary: `key = value` text block, keys frozen below.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

CAUSE_PHOTON = 0
CAUSE_DARK = 1
CAUSE_AFTERPULSE = 2
CAUSE_UNLABELED = 3

CAUSE_NAMES = {
    CAUSE_PHOTON: "photon",
    CAUSE_DARK: "dark",
    CAUSE_AFTERPULSE: "afterpulse",
    CAUSE_UNLABELED: "unlabeled",
}
CAUSE_CODES = {name: code for code, name in CAUSE_NAMES.items()}

EVENT_DTYPE = np.dtype(
    [("gate_index", "<i8"), ("t_units", "<i4"), ("cause", "u1")]
)
assert EVENT_DTYPE.itemsize == 13


class DetectionEvent(NamedTuple):
    gate_index: int
    t_ps: float
    cause: str


@dataclass
class EventStream:
    """Column-oriented event record with run metadata.

    Invariants: gate_index strictly increasing, at most one event per gate,
    0 <= t_in_gate < gate period.
    """

    gate_index: np.ndarray          # int64
    t_units: np.ndarray             # int32, units of tag_resolution
    cause: np.ndarray               # uint8
    tag_resolution: float           # ps per unit
    f_gate: float                   # Hz
    n_gates: int

    def __post_init__(self):
        self.gate_index = np.asarray(self.gate_index, dtype=np.int64)
        self.t_units = np.asarray(self.t_units, dtype=np.int32)
        self.cause = np.asarray(self.cause, dtype=np.uint8)
        if not (len(self.gate_index) == len(self.t_units) == len(self.cause)):
            raise ValueError("event columns must have equal length")

    def __len__(self) -> int:
        return len(self.gate_index)

    def __iter__(self) -> Iterator[DetectionEvent]:
        for g, t, c in zip(self.gate_index, self.t_units, self.cause):
            yield DetectionEvent(int(g), float(t) * self.tag_resolution,
                                 CAUSE_NAMES[int(c)])

    @property
    def period_ps(self) -> float:
        return 1e12 / self.f_gate

    @property
    def t_ps(self) -> np.ndarray:
        return self.t_units.astype(np.float64) * self.tag_resolution

    def abs_time_ps(self) -> np.ndarray:
        """Absolute event times in ps from the start of the run."""
        return self.gate_index.astype(np.float64) * self.period_ps + self.t_ps

    def duration_s(self) -> float:
        return self.n_gates / self.f_gate

    def counts_by_cause(self) -> dict:
        return {
            name: int(np.count_nonzero(self.cause == code))
            for code, name in CAUSE_NAMES.items()
        }

    def restricted_to(self, mask: np.ndarray) -> "EventStream":
        return EventStream(
            self.gate_index[mask], self.t_units[mask], self.cause[mask],
            self.tag_resolution, self.f_gate, self.n_gates,
        )


def empty_stream(tag_resolution: float, f_gate: float, n_gates: int) -> EventStream:
    return EventStream(
        np.empty(0, np.int64), np.empty(0, np.int32), np.empty(0, np.uint8),
        tag_resolution, f_gate, n_gates,
    )


@dataclass
class RunSummary:
    """Aggregate outcome of one simulated run."""

    n_gates: int
    seed: int
    n_photon: int = 0
    n_dark: int = 0
    n_afterpulse: int = 0
    total_charge_pc: float = 0.0
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.counts:
            self.counts = {
                "photon": self.n_photon,
                "dark": self.n_dark,
                "afterpulse": self.n_afterpulse,
            }

    @property
    def n_events(self) -> int:
        return self.n_photon + self.n_dark + self.n_afterpulse


# -- binary event format -----------------------------------------------------

def write_events_binary(stream: EventStream, path) -> None:
    rec = np.empty(len(stream), dtype=EVENT_DTYPE)
    rec["gate_index"] = stream.gate_index
    rec["t_units"] = stream.t_units
    rec["cause"] = stream.cause
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def read_events_binary(path, tag_resolution: float, f_gate: float,
                       n_gates: int) -> EventStream:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) % EVENT_DTYPE.itemsize:
        raise ValueError(
            f"{path}: size {len(buf)} not a multiple of the "
            f"{EVENT_DTYPE.itemsize}-byte record"
        )
    rec = np.frombuffer(buf, dtype=EVENT_DTYPE)
    return EventStream(
        rec["gate_index"].copy(), rec["t_units"].copy(), rec["cause"].copy(),
        tag_resolution, f_gate, n_gates,
    )


# -- text event format --------------------------------------------------------

def write_events_text(stream: EventStream, path) -> None:
    with open(path, "w") as fh:
        for g, t, c in zip(stream.gate_index, stream.t_ps, stream.cause):
            fh.write(f"{int(g)},{t:.10g},{CAUSE_NAMES[int(c)]}\n")


def read_events_text(path, tag_resolution: float, f_gate: float,
                     n_gates: int) -> EventStream:
    gates, t_units, causes = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected gate_index,t_ps,cause")
            try:
                gates.append(int(parts[0]))
                t_units.append(int(round(float(parts[1]) / tag_resolution)))
                causes.append(CAUSE_CODES[parts[2]])
            except (ValueError, KeyError):
                raise ValueError(f"{path}:{lineno}: malformed event {line!r}") from None
    return EventStream(
        np.array(gates, np.int64), np.array(t_units, np.int32),
        np.array(causes, np.uint8), tag_resolution, f_gate, n_gates,
    )


def read_events_auto(path, tag_resolution: float, f_gate: float,
                     n_gates: int) -> EventStream:
    """Pick the reader from the file extension: .txt/.csv text, else binary."""
    p = str(path)
    if p.endswith((".txt", ".csv")):
        return read_events_text(path, tag_resolution, f_gate, n_gates)
    return read_events_binary(path, tag_resolution, f_gate, n_gates)


# -- run summary block ---------------------------------------------------------

_SUMMARY_KEYS = ("n_gates", "seed", "n_events", "n_photon", "n_dark",
                 "n_afterpulse", "total_charge_pc")


def summary_to_text(s: RunSummary) -> str:
    lines = [
        f"n_gates = {s.n_gates}",
        f"seed = {s.seed}",
        f"n_events = {s.n_events}",
        f"n_photon = {s.n_photon}",
        f"n_dark = {s.n_dark}",
        f"n_afterpulse = {s.n_afterpulse}",
        f"total_charge_pc = {s.total_charge_pc:.10g}",
    ]
    return "\n".join(lines) + "\n"


def summary_from_text(text: str) -> RunSummary:
    vals = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _SUMMARY_KEYS:
            raise ValueError(f"line {lineno}: unknown summary key {key!r}")
        vals[key] = val.strip()
    return RunSummary(
        n_gates=int(vals["n_gates"]),
        seed=int(vals["seed"]),
        n_photon=int(vals["n_photon"]),
        n_dark=int(vals["n_dark"]),
        n_afterpulse=int(vals["n_afterpulse"]),
        total_charge_pc=float(vals["total_charge_pc"]),
    )
