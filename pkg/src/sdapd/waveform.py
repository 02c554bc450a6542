"""Analog view of the gated APD output and the self-differencing subtraction.

The synthesized detector output is the capacitive response (proportional
to the time derivative of the periodic gate voltage; raised-cosine or
trapezoidal gate shapes) plus, for each avalanche, a difference-of-
exponentials current pulse whose area is proportional to its charge, plus
optional white noise. Subtracting the signal delayed by one gate period
cancels the periodic capacitive term exactly and leaves each avalanche as
a bipolar pair: the original pulse and an inverted replica one period
later.

The discriminator latches the first positive-going threshold crossing
inside each open gate window, one count per gate at most; it never
inspects the negative lobe, so inverted replicas cannot retrigger it.
This is where the external-circuit detection factor of the efficiency
chain becomes measurable: small-charge pulses stay below threshold.

All transformations are pure; concurrent use is unrestricted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .device import GateConfig
from .eventio import CAUSE_UNLABELED, EventStream

# capacitive response amplitude: mV per (V/ps) of gate-voltage slope
CAP_RESPONSE_COEFF = 2000.0
# avalanche pulse area per unit charge (mV*ps per pC)
PULSE_AREA_PER_CHARGE = 2.0e5
PULSE_RISE_PS = 50.0
PULSE_FALL_PS = 150.0

GATE_SHAPES = ("raised_cosine", "trapezoid")


@dataclass
class Waveform:
    """Uniformly sampled voltage trace (mV)."""

    sample_period: float            # ps
    samples: np.ndarray             # mV
    warmup_samples: int = 0         # leading samples lacking the delayed copy

    def __post_init__(self):
        if self.sample_period <= 0:
            raise ValueError("sample_period must be > 0")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def times_ps(self) -> np.ndarray:
        return np.arange(len(self.samples)) * self.sample_period


def _gate_slope_mv(gate: GateConfig, shape: str, edge_fraction: float,
                   t_ps: np.ndarray) -> np.ndarray:
    """Capacitive response over one period sampled at t_ps (mV)."""
    t_gate, v_pp = gate.t_gate, gate.v_pp
    out = np.zeros_like(t_ps)
    inside = t_ps < t_gate
    if shape == "raised_cosine":
        out[inside] = (
            v_pp * math.pi / t_gate * np.sin(2.0 * math.pi * t_ps[inside] / t_gate)
        )
    elif shape == "trapezoid":
        edge = edge_fraction * t_gate
        rising = t_ps < edge
        falling = inside & (t_ps >= t_gate - edge)
        out[rising] = v_pp / edge
        out[falling] = -v_pp / edge
    else:
        raise ValueError(f"unknown gate shape {shape!r}; pick from {GATE_SHAPES}")
    return CAP_RESPONSE_COEFF * out


def avalanche_pulse(t_ps: np.ndarray, charge_pc: float) -> np.ndarray:
    """Difference-of-exponentials current pulse, area ~ charge (mV)."""
    amp = PULSE_AREA_PER_CHARGE * charge_pc / (PULSE_FALL_PS - PULSE_RISE_PS)
    t = np.maximum(t_ps, 0.0)
    pulse = amp * (np.exp(-t / PULSE_FALL_PS) - np.exp(-t / PULSE_RISE_PS))
    pulse[t_ps < 0] = 0.0
    return pulse


def synthesize(
    gate: GateConfig,
    avalanches: Sequence[tuple[int, float, float]],
    n_periods: int | None = None,
    shape: str = "raised_cosine",
    edge_fraction: float = 0.1,
    sample_period: float = 5.0,
    noise_rms: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Waveform:
    """Synthesize the periodic detector output with embedded avalanches.

    ``avalanches`` holds (gate_index, t_in_gate_ps, charge_pc) triples;
    an avalanche time outside its open gate is rejected.
    """
    if not 0 < edge_fraction <= 0.5:
        raise ValueError("edge_fraction must lie in (0, 0.5]")
    spp = gate.period_ps / sample_period
    if abs(spp - round(spp)) > 1e-9 or round(spp) < 2:
        raise ValueError(
            f"sample_period {sample_period} ps must divide the gate period "
            f"{gate.period_ps} ps"
        )
    spp = round(spp)
    for g, t, q in avalanches:
        if not 0.0 <= t < gate.t_gate:
            raise ValueError(
                f"avalanche at gate {g} lies outside the open gate: t = {t} ps"
            )
        if q < 0:
            raise ValueError(f"avalanche charge must be >= 0, got {q}")
        if g < 0:
            raise ValueError(f"gate_index must be >= 0, got {g}")
    if n_periods is None:
        last = max((g for g, _, _ in avalanches), default=0)
        n_periods = max(4, last + 2)
    if avalanches and max(g for g, _, _ in avalanches) >= n_periods:
        raise ValueError("avalanche gate_index beyond the synthesized span")

    one_period = _gate_slope_mv(
        gate, shape, edge_fraction, np.arange(spp) * sample_period
    )
    samples = np.tile(one_period, n_periods)
    n = len(samples)
    for g, t, q in avalanches:
        if q == 0.0:
            continue
        start = int((g * gate.period_ps + t) // sample_period)
        stop = min(n, start + int(8 * PULSE_FALL_PS // sample_period) + 2)
        t_rel = np.arange(start, stop) * sample_period - (g * gate.period_ps + t)
        samples[start:stop] += avalanche_pulse(t_rel, q)
    if noise_rms > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        samples = samples + rng.normal(0.0, noise_rms, n)
    return Waveform(sample_period, samples)


def self_difference(w: Waveform, period_ps: float) -> Waveform:
    """Subtract the waveform delayed by one period: out(t) = w(t) - w(t - T).

    The first period has no delayed copy; it is emitted as w(t) minus a
    zero fill and flagged via ``warmup_samples``.
    """
    n = period_ps / w.sample_period
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ValueError(
            f"period {period_ps} ps must be an integer multiple of the "
            f"sample period {w.sample_period} ps"
        )
    n = round(n)
    out = w.samples.copy()
    out[n:] -= w.samples[:-n]
    return Waveform(w.sample_period, out, warmup_samples=n)


def discriminate(w: Waveform, threshold_mv: float, gate: GateConfig) -> EventStream:
    """First positive-going threshold crossing per open gate window.

    Gates inside the warm-up span are skipped. Events carry the
    ``unlabeled`` cause and the sample period as tag resolution.
    """
    if threshold_mv <= 0:
        raise ValueError(f"threshold must be > 0, got {threshold_mv}")
    spp = gate.period_ps / w.sample_period
    if abs(spp - round(spp)) > 1e-9:
        raise ValueError("waveform sampling does not align with the gate period")
    spp = round(spp)
    gate_samples = int(gate.t_gate // w.sample_period)
    n_gates = len(w.samples) // spp
    first_gate = -(-w.warmup_samples // spp)  # ceil
    s = w.samples
    above = s >= threshold_mv
    prev_below = np.empty_like(above)
    prev_below[0] = True
    np.logical_not(above[:-1], out=prev_below[1:])
    crossing = above & prev_below
    gates, t_units = [], []
    for k in range(first_gate, n_gates):
        w0 = k * spp
        idx = np.flatnonzero(crossing[w0:w0 + gate_samples])
        if idx.size:
            gates.append(k)
            t_units.append(int(idx[0]))
    return EventStream(
        np.array(gates, np.int64), np.array(t_units, np.int32),
        np.full(len(gates), CAUSE_UNLABELED, np.uint8),
        w.sample_period, gate.f_gate, n_gates,
    )


# -- two-column text export/import -------------------------------------------

def waveform_to_text(w: Waveform) -> str:
    lines = [f"{t:.10g} {v:.10g}" for t, v in zip(w.times_ps, w.samples)]
    return "\n".join(lines) + "\n"


def waveform_from_text(text: str) -> Waveform:
    times, values = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 't_ps mV', got {raw!r}")
        times.append(float(parts[0]))
        values.append(float(parts[1]))
    if len(times) < 2:
        raise ValueError("waveform import needs at least two samples")
    dt = np.diff(times)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=1e-9):
        raise ValueError("waveform import requires uniform sampling")
    return Waveform(float(dt[0]), np.asarray(values))


def save_waveform(w: Waveform, path) -> None:
    with open(path, "w") as fh:
        fh.write(waveform_to_text(w))


def load_waveform(path) -> Waveform:
    with open(path) as fh:
        return waveform_from_text(fh.read())
