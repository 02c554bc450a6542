"""Measurement mathematics for gated photon-counting streams.

Implements the characterization pipeline of a gated detector driven by a
slower pulsed laser: gate-phase histograms, non-paralyzable software dead
time, and the estimators for detection efficiency, per-gate dark
probability, afterpulse probability, expected count rate and RMS jitter,
with 1-sigma statistical uncertainties (binomial counts, delta-method
propagation).

Conventions:

* the illuminated gate phase is phase 0 (gate_index divisible by the
  gates-per-laser-period ratio);
* efficiency: eta = (1/mu) * ln[(1 - r_d/f_g) / (1 - r/f_l)] with r the
  count rate in illuminated gates and r_d the count rate in the
  non-illuminated gates, both per unit total acquisition time;
* afterpulse probability: net counts in non-illuminated gates per net
  photon-induced count, P_a = (C_ni - P_d*G_ni) / (C_il - P_d*G_il);
* dead time is greedy and non-paralyzable: an event is kept iff it is at
  least tau after the last kept event;
* the per-gate dark probability denominator excludes gates suppressed by
  the self-differencing dead time (an O(P_d^2) correction).

All operations are pure functions over immutable event collections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .eventio import EventStream


class EstimateUndefinedError(ValueError):
    """Raised when an estimator's inputs leave it undefined (e.g. the
    photon signal does not rise above the dark floor)."""


def _sig6(x: float) -> str:
    return f"{x:.6g}"


@dataclass
class GateHistogram:
    """Counts per gate-phase bin over one laser period."""

    bin_width: float          # ps
    counts: np.ndarray        # int64, length = gates_per_laser * bins_per_gate
    n_laser_periods: int
    gates_per_laser: int
    period_ps: float          # one gate period

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("histogram counts must be >= 0")

    @property
    def bins_per_gate(self) -> int:
        return len(self.counts) // self.gates_per_laser

    def __add__(self, other: "GateHistogram") -> "GateHistogram":
        if (
            self.bin_width != other.bin_width
            or len(self.counts) != len(other.counts)
            or self.gates_per_laser != other.gates_per_laser
        ):
            raise ValueError("histogram merge requires identical binning")
        return GateHistogram(
            self.bin_width, self.counts + other.counts,
            self.n_laser_periods + other.n_laser_periods,
            self.gates_per_laser, self.period_ps,
        )

    def to_csv(self) -> str:
        lines = ["bin_start_ps,count"]
        for k, c in enumerate(self.counts):
            lines.append(f"{_sig6(k * self.bin_width)},{int(c)}")
        return "\n".join(lines) + "\n"


def build_histogram(events: EventStream, f_gate: float, f_laser: float,
                    bin_width: float) -> GateHistogram:
    """Sort events into gate-phase bins over one laser period.

    The bin width must divide the gate period exactly; a non-divising
    width is rejected rather than silently rebinned.
    """
    ratio = f_gate / f_laser
    gates_per_laser = round(ratio)
    if gates_per_laser < 1 or abs(ratio - gates_per_laser) > 1e-9 * ratio:
        raise ValueError(f"f_gate/f_laser must be an integer >= 1, got {ratio!r}")
    period_ps = 1e12 / f_gate
    bins_per_gate = period_ps / bin_width
    if abs(bins_per_gate - round(bins_per_gate)) > 1e-9 or round(bins_per_gate) < 1:
        raise ValueError(
            f"bin width {bin_width} ps must divide the gate period {period_ps} ps"
        )
    bins_per_gate = round(bins_per_gate)
    if len(events) and np.any(np.diff(events.gate_index) <= 0):
        raise ValueError("event stream must be sorted by gate_index")
    n_bins = gates_per_laser * bins_per_gate
    counts = np.zeros(n_bins, np.int64)
    if len(events):
        phase = events.gate_index % gates_per_laser
        bin_in_gate = np.minimum(
            (events.t_ps / bin_width).astype(np.int64), bins_per_gate - 1
        )
        np.add.at(counts, phase * bins_per_gate + bin_in_gate, 1)
    return GateHistogram(
        bin_width, counts, events.n_gates // gates_per_laser,
        gates_per_laser, period_ps,
    )


def apply_dead_time(events: EventStream, tau_dead_ns: float) -> EventStream:
    """Greedy non-paralyzable dead time over absolute event times."""
    if tau_dead_ns < 0:
        raise ValueError(f"dead time must be >= 0, got {tau_dead_ns}")
    if tau_dead_ns == 0 or len(events) == 0:
        return events
    t_abs = events.abs_time_ps()
    if np.any(np.diff(t_abs) < 0):
        raise ValueError("event stream must be time-ordered")
    tau_ps = tau_dead_ns * 1e3
    keep = np.zeros(len(events), bool)
    last = -math.inf
    for i, t in enumerate(t_abs.tolist()):
        if t >= last + tau_ps:
            keep[i] = True
            last = t
    return events.restricted_to(keep)


def spde(r: float, r_d: float, mu: float, f_l: float, f_g: float) -> float:
    """Detection efficiency from illuminated/non-illuminated count rates."""
    if mu <= 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    if r >= f_l:
        raise ValueError(f"illuminated rate {r} must be below f_laser {f_l}")
    if r_d >= f_g:
        raise ValueError(f"non-illuminated rate {r_d} must be below f_gate {f_g}")
    return math.log((1.0 - r_d / f_g) / (1.0 - r / f_l)) / mu


def expected_rate(mu: float, eta: float, p_d: float, f_l: float) -> float:
    """Expected detection rate R = f_l * [1 - e^(-mu*eta) * (1 - P_d)]."""
    return f_l * (1.0 - math.exp(-mu * eta) * (1.0 - p_d))


def dark_count_prob(events: EventStream, n_gates: int) -> tuple[float, float]:
    """Per-gate dark probability and its binomial 1-sigma from a dark run.

    The denominator excludes gates suppressed by the self-differencing
    dead time (each accepted event kills the next gate).
    """
    if n_gates <= 0:
        raise ValueError(f"n_gates must be > 0, got {n_gates}")
    n_events = len(events)
    n_suppressed = int(np.count_nonzero(events.gate_index < n_gates - 1))
    denom = n_gates - n_suppressed
    p = n_events / denom
    sigma = math.sqrt(max(p * (1.0 - p), 0.0) / denom)
    return p, sigma


def _phase_counts(events: EventStream, gates_per_laser: int) -> tuple[int, int]:
    """(counts in illuminated gates, counts in non-illuminated gates)."""
    if len(events) == 0:
        return 0, 0
    il = int(np.count_nonzero(events.gate_index % gates_per_laser == 0))
    return il, len(events) - il


def _phase_gates(n_gates: int, gates_per_laser: int) -> tuple[int, int]:
    g_il = (n_gates + gates_per_laser - 1) // gates_per_laser
    return g_il, n_gates - g_il


def afterpulse_prob(
    illum_run: EventStream,
    dark_run: EventStream | None,
    f_gate: float,
    f_laser: float,
    exclude_suppressed_gates: bool = False,
) -> tuple[float, float]:
    """Afterpulse probability and 1-sigma from an illuminated run.

    P_a = (C_ni - P_d*G_ni) / (C_il - P_d*G_il): net counts in the
    non-illuminated gate phases per net photon-induced count. P_d comes
    from the dark run (zero if none given). With
    ``exclude_suppressed_gates`` the gate totals drop the gates killed by
    the self-differencing dead time; by default suppressed gates stay in
    the totals (they simply cannot contain counts).
    """
    ratio = f_gate / f_laser
    gates_per_laser = round(ratio)
    if gates_per_laser < 1 or abs(ratio - gates_per_laser) > 1e-9 * ratio:
        raise ValueError(f"f_gate/f_laser must be an integer >= 1, got {ratio!r}")
    c_il, c_ni = _phase_counts(illum_run, gates_per_laser)
    g_il, g_ni = _phase_gates(illum_run.n_gates, gates_per_laser)
    if exclude_suppressed_gates and len(illum_run):
        next_gate = illum_run.gate_index[illum_run.gate_index < illum_run.n_gates - 1] + 1
        sup_il = int(np.count_nonzero(next_gate % gates_per_laser == 0))
        g_il -= sup_il
        g_ni -= len(next_gate) - sup_il
    if dark_run is not None and dark_run.n_gates > 0:
        p_d, p_d_sigma = dark_count_prob(dark_run, dark_run.n_gates)
    else:
        p_d, p_d_sigma = 0.0, 0.0
    num = c_ni - p_d * g_ni
    den = c_il - p_d * g_il
    if den <= 0:
        raise EstimateUndefinedError(
            "afterpulse probability undefined: photon signal does not exceed "
            f"the dark floor (net illuminated counts = {den:.3g})"
        )
    p_a = num / den
    # independent-count error propagation; counts treated as Poisson
    d_num = math.sqrt(max(c_ni, 1))
    d_den = math.sqrt(max(c_il, 1))
    var = (d_num / den) ** 2 + (num * d_den / den**2) ** 2
    var += ((g_ni * den - num * g_il) / den**2) ** 2 * p_d_sigma**2
    return p_a, math.sqrt(var)


def jitter_rms(t_in_gate_ps: np.ndarray) -> float:
    """Population RMS deviation of intra-gate timestamps about their mean."""
    t = np.asarray(t_in_gate_ps, dtype=np.float64)
    if t.size < 2:
        raise ValueError(f"jitter needs >= 2 events, got {t.size}")
    return float(np.sqrt(np.mean((t - t.mean()) ** 2)))


@dataclass
class CharacterizationResult:
    """One operating point's measured figures with 1-sigma uncertainties."""

    spde: float
    spde_sigma: float
    p_d: float
    p_d_sigma: float
    p_a: float
    p_a_sigma: float
    jitter_rms_ps: float
    jitter_sigma_ps: float
    r_illum_cps: float
    r_illum_sigma_cps: float
    r_dark_cps: float
    r_dark_sigma_cps: float

    CSV_HEADER = ("spde,spde_sigma,p_d,p_d_sigma,p_a,p_a_sigma,"
                  "jitter_rms_ps,jitter_sigma_ps,r_illum_cps,r_illum_sigma_cps,"
                  "r_dark_cps,r_dark_sigma_cps")

    def to_csv(self) -> str:
        vals = [
            self.spde, self.spde_sigma, self.p_d, self.p_d_sigma,
            self.p_a, self.p_a_sigma, self.jitter_rms_ps, self.jitter_sigma_ps,
            self.r_illum_cps, self.r_illum_sigma_cps,
            self.r_dark_cps, self.r_dark_sigma_cps,
        ]
        return self.CSV_HEADER + "\n" + ",".join(_sig6(v) for v in vals) + "\n"


def characterize(
    illum_run: EventStream,
    dark_run: EventStream | None,
    mu: float,
    f_laser: float,
    dead_time_ns: float = 0.0,
    exclude_suppressed_gates: bool = False,
) -> CharacterizationResult:
    """Full single-operating-point characterization.

    Applies the software dead time to both runs, splits counts by gate
    phase, and evaluates every estimator with propagated uncertainties.
    """
    f_gate = illum_run.f_gate
    if dead_time_ns > 0:
        illum_run = apply_dead_time(illum_run, dead_time_ns)
        if dark_run is not None:
            dark_run = apply_dead_time(dark_run, dead_time_ns)
    gates_per_laser = round(f_gate / f_laser)
    duration = illum_run.duration_s()
    c_il, c_ni = _phase_counts(illum_run, gates_per_laser)
    g_il, g_ni = _phase_gates(illum_run.n_gates, gates_per_laser)
    r = c_il / duration
    r_d = c_ni / duration
    eta = spde(r, r_d, mu, f_laser, f_gate)
    # delta method: eta depends on the two binomial phase counts
    p_il = c_il / g_il
    q_ni = c_ni / max(g_ni, 1)
    var_p = p_il * (1 - p_il) / g_il
    var_q = q_ni * (1 - q_ni) / max(g_ni, 1)
    # d eta / d p = 1/(mu (1-r/f_l)); d eta / d q via r_d/f_g = q * (g_ni/n_gates)
    scale_q = g_ni / illum_run.n_gates
    eta_var = (var_p / (1 - r / f_laser) ** 2
               + var_q * scale_q**2 / (1 - r_d / f_gate) ** 2) / mu**2
    if dark_run is not None:
        p_d, p_d_sigma = dark_count_prob(dark_run, dark_run.n_gates)
        r_dark = len(dark_run) / dark_run.duration_s()
        r_dark_sigma = math.sqrt(max(len(dark_run), 1)) / dark_run.duration_s()
    else:
        p_d, p_d_sigma, r_dark, r_dark_sigma = 0.0, 0.0, 0.0, 0.0
    p_a, p_a_sigma = afterpulse_prob(
        illum_run, dark_run, f_gate, f_laser,
        exclude_suppressed_gates=exclude_suppressed_gates,
    )
    il_mask = illum_run.gate_index % gates_per_laser == 0
    t_il = illum_run.t_ps[il_mask]
    if t_il.size >= 2:
        jit = jitter_rms(t_il)
        jit_sigma = jit / math.sqrt(2 * t_il.size)
    else:
        jit, jit_sigma = 0.0, 0.0
    return CharacterizationResult(
        spde=eta,
        spde_sigma=math.sqrt(eta_var),
        p_d=p_d,
        p_d_sigma=p_d_sigma,
        p_a=p_a,
        p_a_sigma=p_a_sigma,
        jitter_rms_ps=jit,
        jitter_sigma_ps=jit_sigma,
        r_illum_cps=r,
        r_illum_sigma_cps=math.sqrt(max(c_il, 1)) / duration,
        r_dark_cps=r_dark,
        r_dark_sigma_cps=r_dark_sigma,
    )
