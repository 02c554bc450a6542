"""Gate-granular Monte Carlo simulation of a gated self-differencing APD.

Per open gate the generative model is:

* primary photoelectrons ~ Poisson(mu * EQE) at the laser arrival offset
  (illuminated gates only);
* dark carriers ~ Poisson(dark_rate * t_gate), uniform over the gate;
* trap releases from earlier avalanches that fall inside the open window;
* every candidate carrier independently triggers an avalanche with
  probability P_avl; the earliest triggering carrier produces the single
  detection of that gate (ties resolved photon < dark < afterpulse);
* the detection timestamp is the carrier time plus a build-up jitter draw
  (normal, sigma = jitter_coeff / V_EX, truncated to the gate), quantized
  to the tag resolution;
* avalanche charge Q = charge_coeff * V_EX * (remaining gate time); the
  avalanche fills Poisson(trap_fill_coeff * Q) traps whose release delays
  are i.i.d. exponential with the de-trapping time constant;
* the immediately following gate is fully suppressed (the one-clock-cycle
  dead time of self-differencing);
* trap releases landing between gates, or in a suppressed gate, are
  discarded.

Two integration paths exist. ``naive`` loops each gate literally as above.
``fast`` draws one uniform per gate that can produce anything observable
and skips everything else; untriggered candidates have no observable effect
(no count, no charge, no traps, no suppression), so the skip decision uses
the thinned probability 1 - exp(-(lambda_ph + lambda_dk) * P_avl). The two
paths are distribution-identical (Poisson thinning); the test suite checks
this property. Runs are deterministic: a fixed RunConfig (seed included)
reproduces the event stream bit for bit on either path.

A single run is sequential (the trap queue is a causal chain). Parallelism
belongs one level up, across runs, with per-run seeds derived through
``numpy.random.SeedSequence`` spawning.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .device import (
    DeviceParams,
    GateConfig,
    OpticalConfig,
    avalanche_probability,
    dark_rate,
    detrap_tau,
    excess_voltage,
    gates_per_laser_period,
    jitter_sigma_ps,
)
from .eventio import (
    CAUSE_AFTERPULSE,
    CAUSE_DARK,
    CAUSE_PHOTON,
    EventStream,
    RunSummary,
    empty_stream,
)

_BLOCK_GATES = 1 << 22


@dataclass(frozen=True)
class RunConfig:
    """Everything one simulated acquisition needs."""

    device: DeviceParams
    gate: GateConfig
    optical: Optional[OpticalConfig]
    temperature: float            # degC
    n_gates: int
    seed: int
    illumination: bool = True
    tag_resolution: float = 100.0  # ps

    def __post_init__(self):
        if self.n_gates < 1:
            raise ValueError(f"n_gates must be >= 1, got {self.n_gates}")
        if self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed}")
        if self.tag_resolution <= 0.0:
            raise ValueError("tag_resolution must be > 0")
        if self.gate.period_ps / self.tag_resolution > 2**31:
            raise ValueError("gate period / tag_resolution overflows 32-bit tags")
        if self.illumination:
            if self.optical is None:
                raise ValueError("illumination on requires an OpticalConfig")
            gates_per_laser_period(self.gate, self.optical)  # integer-ratio check
            if not 0.0 <= self.optical.gate_offset < self.gate.t_gate:
                raise ValueError(
                    "gate_offset must lie inside the open gate "
                    f"[0, {self.gate.t_gate}) ps, got {self.optical.gate_offset}"
                )

    def replaced(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


class SaturationPoint(NamedTuple):
    mu: float
    rate_cps: float
    current_a: float


class _Model:
    """Derived per-run quantities shared by both integration paths."""

    def __init__(self, cfg: RunConfig):
        dev, gate = cfg.device, cfg.gate
        self.period = gate.period_ps
        self.t_gate = gate.t_gate
        self.v_ex = excess_voltage(dev, gate, cfg.temperature)
        self.p_avl = avalanche_probability(dev, self.v_ex, cfg.temperature)
        self.lam_ph = 0.0
        self.offset = 0.0
        self.gates_per_laser = 0
        if cfg.illumination and cfg.optical is not None:
            self.lam_ph = cfg.optical.mu * dev.eqe_max
            self.offset = cfg.optical.gate_offset
            self.gates_per_laser = gates_per_laser_period(gate, cfg.optical)
        self.lam_dk = dark_rate(dev, cfg.temperature, gate) * (gate.t_gate * 1e-12)
        self.sigma = jitter_sigma_ps(dev, self.v_ex)
        self.tau_ps = detrap_tau(dev, cfg.temperature) * 1e3
        self.kappa = dev.trap_fill_coeff
        # pC per ps of remaining gate
        self.q_slope = dev.charge_coeff * self.v_ex * 1e-3
        # thinned intensities: triggered-candidate rates
        self.a = self.lam_ph * self.p_avl
        self.b = self.lam_dk * self.p_avl
        self.p_click_il = -math.expm1(-(self.a + self.b))
        self.p_click_dk = -math.expm1(-self.b)
        self.rho = self.b / self.t_gate if self.t_gate > 0 else 0.0
        self.traps_possible = self.kappa > 0.0 and self.p_avl > 0.0

    def is_illuminated(self, gate_index):
        if self.gates_per_laser == 0:
            return np.zeros(np.shape(gate_index), bool) if np.ndim(gate_index) else False
        return gate_index % self.gates_per_laser == 0

    def charge_pc(self, t_trigger_ps):
        return self.q_slope * (self.t_gate - t_trigger_ps)


def _trunc_normal(u, mean, sigma, lo, hi):
    """Inverse-CDF truncated normal; u may be scalar or array."""
    if sigma <= 0.0:
        return np.broadcast_to(np.asarray(mean, float), np.shape(u)).copy() \
            if np.ndim(u) else float(mean)
    a = ndtr((lo - mean) / sigma)
    b = ndtr((hi - mean) / sigma)
    x = mean + sigma * ndtri(a + u * (b - a))
    return np.clip(x, lo, np.nextafter(hi, lo))


def _quantize(t_ps, tag_resolution):
    return np.floor(np.asarray(t_ps, float) / tag_resolution).astype(np.int32)


def simulate(cfg: RunConfig, method: str = "fast") -> tuple[EventStream, RunSummary]:
    """Run one acquisition; returns the event stream and its summary."""
    if method not in ("fast", "naive"):
        raise ValueError(f"unknown method {method!r}")
    model = _Model(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    if model.p_avl <= 0.0 or (model.a == 0.0 and model.b == 0.0):
        summary = RunSummary(n_gates=cfg.n_gates, seed=cfg.seed)
        return empty_stream(cfg.tag_resolution, cfg.gate.f_gate, cfg.n_gates), summary
    if method == "naive":
        cols = _run_naive(cfg, model, rng)
    elif model.traps_possible:
        cols = _run_walk(cfg, model, rng)
    else:
        cols = _run_vectorized(cfg, model, rng)
    gates, t_units, causes, total_charge = cols
    stream = EventStream(gates, t_units, causes, cfg.tag_resolution,
                         cfg.gate.f_gate, cfg.n_gates)
    summary = RunSummary(
        n_gates=cfg.n_gates,
        seed=cfg.seed,
        n_photon=int(np.count_nonzero(causes == CAUSE_PHOTON)),
        n_dark=int(np.count_nonzero(causes == CAUSE_DARK)),
        n_afterpulse=int(np.count_nonzero(causes == CAUSE_AFTERPULSE)),
        total_charge_pc=float(total_charge),
    )
    return stream, summary


# ---------------------------------------------------------------------------
# naive path: literal per-gate sampling, used as the distribution oracle

def _run_naive(cfg: RunConfig, m: _Model, rng) -> tuple:
    gates, t_units, causes = [], [], []
    total_charge = 0.0
    heap: list[float] = []
    last_event_gate = -2
    for g in range(cfg.n_gates):
        g_start = g * m.period
        window_rel = []
        while heap and heap[0] < g_start + m.t_gate:
            t_r = heapq.heappop(heap)
            if t_r >= g_start:
                window_rel.append(t_r - g_start)
        if g == last_event_gate + 1:
            continue
        n_ph = rng.poisson(m.lam_ph) if (m.lam_ph > 0 and m.is_illuminated(g)) else 0
        n_dk = rng.poisson(m.lam_dk) if m.lam_dk > 0 else 0
        n_cand = n_ph + n_dk + len(window_rel)
        if n_cand == 0:
            continue
        times = np.concatenate([
            np.full(n_ph, m.offset),
            rng.uniform(0.0, m.t_gate, n_dk) if n_dk else np.empty(0),
            np.asarray(window_rel, float),
        ])
        kinds = np.concatenate([
            np.full(n_ph, CAUSE_PHOTON, np.uint8),
            np.full(n_dk, CAUSE_DARK, np.uint8),
            np.full(len(window_rel), CAUSE_AFTERPULSE, np.uint8),
        ])
        triggered = rng.random(n_cand) < m.p_avl
        if not triggered.any():
            continue
        idx = np.flatnonzero(triggered)
        win = idx[np.argmin(times[idx])]
        t_trig = float(times[win])
        t_evt = float(_trunc_normal(rng.random(), t_trig, m.sigma, 0.0, m.t_gate))
        gates.append(g)
        t_units.append(int(t_evt // cfg.tag_resolution))
        causes.append(int(kinds[win]))
        q = m.charge_pc(t_trig)
        total_charge += q
        if m.traps_possible:
            n_traps = rng.poisson(m.kappa * q)
            if n_traps:
                delays = rng.exponential(m.tau_ps, n_traps)
                for d in delays:
                    heapq.heappush(heap, g_start + t_trig + d)
        last_event_gate = g
    return (np.array(gates, np.int64), np.array(t_units, np.int32),
            np.array(causes, np.uint8), total_charge)


# ---------------------------------------------------------------------------
# fast path, trap-free: fully vectorized per block

def _click_actives(m: _Model, rng, g0: int, g1: int):
    """Gate indices in [g0, g1) where at least one carrier triggers."""
    parts = []
    if m.lam_ph > 0 and m.gates_per_laser > 0 and m.p_click_il > 0:
        first = -(-g0 // m.gates_per_laser) * m.gates_per_laser
        il = np.arange(first, g1, m.gates_per_laser, dtype=np.int64)
        u = rng.random(len(il))
        parts.append(il[u < m.p_click_il])
    if m.b > 0 and m.p_click_dk > 0:
        u = rng.random(g1 - g0)
        dk = np.flatnonzero(u < m.p_click_dk).astype(np.int64) + g0
        if m.gates_per_laser > 0 and m.lam_ph > 0:
            dk = dk[dk % m.gates_per_laser != 0]
        parts.append(dk)
    if not parts:
        return np.empty(0, np.int64)
    if len(parts) == 1:
        return parts[0]
    return np.sort(np.concatenate(parts))


def _sample_click(m: _Model, is_il, u1, u2, u3):
    """Vectorized (cause, carrier time) for click-active gates.

    Conditioned on >= 1 triggered photon-or-dark carrier in the gate:
    a photon carrier is present with probability (1-e^-a)/(1-e^-(a+b));
    if present the event is the photon at the laser offset unless a
    triggered dark carrier precedes it; otherwise it is the earliest
    triggered dark carrier in the gate.
    """
    n = len(u1)
    t = np.full(n, m.offset)
    cause = np.full(n, CAUSE_PHOTON, np.uint8)
    if m.p_click_il > 0 and m.a > 0:
        p_ph = -math.expm1(-m.a) / m.p_click_il
    else:
        p_ph = 0.0
    photon = is_il & (u1 < p_ph)
    if m.b > 0:
        p_early = -math.expm1(-m.rho * m.offset)
        early = photon & (u2 < p_early)
        if early.any():
            t[early] = -np.log1p(-u3[early] * p_early) / m.rho
            cause[early] = CAUSE_DARK
        dark_only = ~photon
        if dark_only.any():
            p_full = -math.expm1(-m.rho * m.t_gate)
            t[dark_only] = -np.log1p(-u2[dark_only] * p_full) / m.rho
            cause[dark_only] = CAUSE_DARK
    return cause, t


def _resolve_suppression(gates: np.ndarray, prev_last: int) -> np.ndarray:
    """Keep mask under the rule: a gate right after a kept event is dead.

    Within each maximal run of consecutive candidate gates survivors
    alternate; a run whose head follows ``prev_last`` starts dead.
    """
    n = len(gates)
    if n == 0:
        return np.ones(0, bool)
    new_run = np.empty(n, bool)
    new_run[0] = True
    np.not_equal(np.diff(gates), 1, out=new_run[1:])
    run_start = np.flatnonzero(new_run)
    start_of = run_start[np.cumsum(new_run) - 1]
    pos = np.arange(n) - start_of
    keep = pos % 2 == 0
    if gates[0] == prev_last + 1:
        first = start_of == 0
        keep[first] = pos[first] % 2 == 1
    return keep


def _run_vectorized(cfg: RunConfig, m: _Model, rng) -> tuple:
    out_g, out_t, out_c = [], [], []
    total_charge = 0.0
    prev_last = -2
    for g0 in range(0, cfg.n_gates, _BLOCK_GATES):
        g1 = min(g0 + _BLOCK_GATES, cfg.n_gates)
        gates = _click_actives(m, rng, g0, g1)
        if len(gates) == 0:
            continue
        u1 = rng.random(len(gates))
        u2 = rng.random(len(gates))
        u3 = rng.random(len(gates))
        cause, t_trig = _sample_click(m, m.is_illuminated(gates), u1, u2, u3)
        keep = _resolve_suppression(gates, prev_last)
        gates, cause, t_trig = gates[keep], cause[keep], t_trig[keep]
        if len(gates):
            uj = rng.random(len(gates))
            t_evt = _trunc_normal(uj, t_trig, m.sigma, 0.0, m.t_gate)
            out_g.append(gates)
            out_t.append(_quantize(t_evt, cfg.tag_resolution))
            out_c.append(cause)
            total_charge += float(np.sum(m.charge_pc(t_trig)))
            prev_last = int(gates[-1])
    if not out_g:
        return (np.empty(0, np.int64), np.empty(0, np.int32),
                np.empty(0, np.uint8), 0.0)
    return (np.concatenate(out_g), np.concatenate(out_t),
            np.concatenate(out_c), total_charge)


# ---------------------------------------------------------------------------
# fast path with trapping: sparse sequential walk over candidate gates

def _run_walk(cfg: RunConfig, m: _Model, rng) -> tuple:
    out_g, out_t, out_c = [], [], []
    total_charge = 0.0
    heap: list[float] = []
    last_event = -2
    t_gate, period, tag = m.t_gate, m.period, cfg.tag_resolution

    for g0 in range(0, cfg.n_gates, _BLOCK_GATES):
        g1 = min(g0 + _BLOCK_GATES, cfg.n_gates)
        actives = _click_actives(m, rng, g0, g1)
        ptr = 0
        n_act = len(actives)
        while True:
            g_click = int(actives[ptr]) if ptr < n_act else None
            g_trap = None
            while heap:
                t_r = heap[0]
                g_r = int(t_r // period)
                if t_r - g_r * period >= t_gate:
                    heapq.heappop(heap)     # released between gates
                    continue
                if g_r < g1:
                    g_trap = g_r
                break
            if g_click is None and g_trap is None:
                break
            if g_trap is None or (g_click is not None and g_click <= g_trap):
                g = g_click
            else:
                g = g_trap
            is_click = g_click == g
            if is_click:
                ptr += 1
            g_start = g * period
            window_rel = []
            while heap and heap[0] < g_start + t_gate:
                t_r = heapq.heappop(heap)
                if t_r >= g_start:
                    window_rel.append(t_r - g_start)
            if g == last_event + 1:
                continue
            best_t, best_cause = math.inf, CAUSE_AFTERPULSE
            if is_click:
                is_il = bool(m.is_illuminated(g))
                u1, u2, u3 = rng.random(3)
                cause_a, t_a = _sample_click(
                    m, np.array([is_il]),
                    np.array([u1]), np.array([u2]), np.array([u3]))
                best_t, best_cause = float(t_a[0]), int(cause_a[0])
            for t_rel in window_rel:
                if rng.random() < m.p_avl and t_rel < best_t:
                    best_t, best_cause = t_rel, CAUSE_AFTERPULSE
            if not math.isfinite(best_t):
                continue
            t_evt = float(_trunc_normal(rng.random(), best_t, m.sigma, 0.0, t_gate))
            out_g.append(g)
            out_t.append(int(t_evt // tag))
            out_c.append(best_cause)
            q = m.charge_pc(best_t)
            total_charge += q
            n_traps = rng.poisson(m.kappa * q)
            if n_traps:
                for d in rng.exponential(m.tau_ps, n_traps):
                    heapq.heappush(heap, g_start + best_t + d)
            last_event = g
    return (np.array(out_g, np.int64), np.array(out_t, np.int32),
            np.array(out_c, np.uint8), total_charge)


# ---------------------------------------------------------------------------

def saturation_run(cfg: RunConfig, flux_list: Sequence[float],
                   method: str = "fast") -> list[SaturationPoint]:
    """Count rate and mean APD current at each photon flux.

    Each point reruns the configuration with the listed mu; the rate is
    events per unit simulated time and the current is total avalanche
    charge per unit simulated time.
    """
    if len(flux_list) == 0:
        raise ValueError("flux_list must not be empty")
    if cfg.optical is None:
        raise ValueError("saturation_run requires an OpticalConfig")
    points = []
    duration_s = cfg.n_gates / cfg.gate.f_gate
    for mu in flux_list:
        cfg_mu = cfg.replaced(optical=replace(cfg.optical, mu=float(mu)))
        stream, summary = simulate(cfg_mu, method=method)
        rate = len(stream) / duration_s
        current = summary.total_charge_pc * 1e-12 / duration_s
        points.append(SaturationPoint(float(mu), rate, current))
    return points
