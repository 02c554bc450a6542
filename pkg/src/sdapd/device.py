"""Physical model of a gated InGaAs/InP APD and its biasing.

The device is described by closed-form laws with tunable coefficients:

* breakdown voltage, affine in temperature;
* external quantum efficiency (absorption x transit) at unity gain;
* avalanche trigger probability, saturating exponential in excess voltage
  with a temperature-affine ceiling;
* dark generation rate, doubling per fixed temperature step above -30 degC
  with an amplitude-proportional floor below;
* single-exponential carrier de-trapping with Arrhenius temperature scaling;
* avalanche build-up jitter, sigma = jitter_coeff / V_EX.

The affine ceiling of the trigger probability is a calibration device, not a
physical attribution: it is where this model puts the entire temperature
dependence of detection efficiency at fixed afterpulsing. Single-exponential
de-trapping is likewise a deliberate simplification of multi-scale trapping.

All functions here are pure and safe for unrestricted concurrent use.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, fields, replace

from scipy import constants

# Thermal dark generation is referenced to -30 degC; below it an
# amplitude-dependent floor takes over.
DARK_REF_TEMPERATURE_C = -30.0

# Declared validity range of the breakdown law; outside we extrapolate
# and warn.
BREAKDOWN_VALID_RANGE_C = (-50.0, 20.0)

_ZERO_C_IN_K = 273.15


@dataclass(frozen=True)
class DeviceParams:
    """Coefficients of the APD model.

    Units are encoded in the field names where they are not dimensionless:
    volts, degC, cps (counts per second), pC (picocoulomb), ns, ps.
    """

    v_br_ref: float = 67.2            # breakdown voltage at t_ref (V)
    t_ref: float = 20.0               # reference temperature (degC)
    dv_br_dt: float = 7.1 / 70.0      # breakdown slope (V/degC)
    eqe_max: float = 0.69             # absorption x transit at unity gain
    v_punch: float = 36.0             # punch-through voltage (V)
    p_avl_scale: float = 3.5          # e-folding constant of trigger curve (V)
    p_avl_ceiling_ref: float = 0.8537     # trigger ceiling at t_ref
    p_avl_ceiling_slope: float = 0.005009  # ceiling slope (1/degC)
    dark_rate_ref: float = 5000.0     # thermal dark rate at -30 degC (cps)
    dark_doubling_interval: float = 10.0   # degC per dark-rate doubling
    dark_floor_coeff: float = 250.0   # bias-induced dark floor (cps per V of v_pp)
    trap_fill_coeff: float = 10.71    # traps filled per pC of avalanche charge
    charge_coeff: float = 0.017       # avalanche charge (pC per V excess per ns of remaining gate)
    detrap_tau_ref: float = 19.57     # de-trapping time constant at t_ref (ns)
    detrap_activation: float = 1500.0  # Arrhenius factor (K)
    jitter_coeff: float = 760.0       # build-up jitter scale (ps*V)

    def __post_init__(self):
        if not 0.0 < self.eqe_max <= 1.0:
            raise ValueError(f"eqe_max must be in (0, 1], got {self.eqe_max}")
        if self.p_avl_scale <= 0.0:
            raise ValueError(f"p_avl_scale must be > 0, got {self.p_avl_scale}")
        if self.v_punch >= self.v_br_ref:
            raise ValueError(
                f"v_punch ({self.v_punch}) must lie below v_br_ref ({self.v_br_ref})"
            )
        for name in ("dark_rate_ref", "dark_floor_coeff", "trap_fill_coeff",
                     "charge_coeff", "detrap_tau_ref", "jitter_coeff"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.dark_doubling_interval <= 0.0:
            raise ValueError("dark_doubling_interval must be > 0")
        if self.detrap_tau_ref == 0.0:
            raise ValueError("detrap_tau_ref must be > 0")

    def p_avl_ceiling(self, temperature_c: float) -> float:
        """Maximum trigger probability at a temperature; affine, clipped to [0, 1]."""
        ceiling = self.p_avl_ceiling_ref + self.p_avl_ceiling_slope * (
            temperature_c - self.t_ref
        )
        return min(1.0, max(0.0, ceiling))

    def with_(self, **kwargs) -> "DeviceParams":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class GateConfig:
    """Periodic Geiger-mode biasing: AC gate on top of a DC bias."""

    f_gate: float       # gating frequency (Hz)
    t_gate: float       # active gate width (ps)
    v_pp: float         # peak-to-peak AC amplitude (V)
    v_dc: float         # DC bias (V)

    def __post_init__(self):
        if self.f_gate <= 0.0:
            raise ValueError(f"f_gate must be > 0, got {self.f_gate}")
        if self.v_pp <= 0.0:
            raise ValueError(f"v_pp must be > 0, got {self.v_pp}")
        if not 0.0 < self.t_gate < self.period_ps:
            raise ValueError(
                f"t_gate ({self.t_gate} ps) must lie in (0, gate period "
                f"{self.period_ps} ps)"
            )

    @property
    def period_ps(self) -> float:
        return 1e12 / self.f_gate


@dataclass(frozen=True)
class OpticalConfig:
    """Pulsed laser illumination settings."""

    f_laser: float            # pulse repetition rate (Hz)
    mu: float                 # mean photons per pulse
    wavelength: float = 1550.0    # nm
    pulse_width: float = 3.0      # ps
    gate_offset: float = 50.0     # arrival position of pulse center in the gate (ps)

    def __post_init__(self):
        if self.f_laser <= 0.0:
            raise ValueError(f"f_laser must be > 0, got {self.f_laser}")
        if self.mu < 0.0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.wavelength <= 0.0:
            raise ValueError(f"wavelength must be > 0, got {self.wavelength}")
        if self.gate_offset < 0.0:
            raise ValueError(f"gate_offset must be >= 0, got {self.gate_offset}")


def gates_per_laser_period(gate: GateConfig, optical: OpticalConfig) -> int:
    """Integer number of gates per laser period; rejects non-integer ratios."""
    ratio = gate.f_gate / optical.f_laser
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * ratio:
        raise ValueError(
            f"f_gate/f_laser must be an integer >= 1, got {ratio!r}"
        )
    return n


def breakdown_voltage(dev: DeviceParams, temperature_c: float) -> float:
    """Breakdown voltage at a device temperature, affine extrapolation.

    Outside the declared validity range the law still evaluates but a
    warning is emitted.
    """
    lo, hi = BREAKDOWN_VALID_RANGE_C
    if not lo <= temperature_c <= hi:
        warnings.warn(
            f"breakdown law extrapolated outside [{lo}, {hi}] degC "
            f"(T = {temperature_c} degC)",
            stacklevel=2,
        )
    return dev.v_br_ref + dev.dv_br_dt * (temperature_c - dev.t_ref)


def excess_voltage(dev: DeviceParams, gate: GateConfig, temperature_c: float) -> float:
    """Gate-peak bias above breakdown; negative means the device never arms."""
    return gate.v_dc + 0.5 * gate.v_pp - breakdown_voltage(dev, temperature_c)


def eqe_from_photocurrent(i_ph: float, p_opt: float, wavelength_nm: float) -> float:
    """External quantum efficiency from a unity-gain photocurrent measurement.

    EQE = (I_ph / P_opt) * h*c / (e * lambda). Values above 1 are reported
    as-is so calibration errors surface instead of being clamped away.
    """
    if p_opt <= 0.0:
        raise ValueError(f"p_opt must be > 0, got {p_opt}")
    if wavelength_nm <= 0.0:
        raise ValueError(f"wavelength must be > 0, got {wavelength_nm}")
    lam_m = wavelength_nm * 1e-9
    return (i_ph / p_opt) * constants.h * constants.c / (constants.e * lam_m)


def photocurrent_from_eqe(eqe: float, p_opt: float, wavelength_nm: float) -> float:
    """Inverse of :func:`eqe_from_photocurrent` (useful for round-trip checks)."""
    if p_opt <= 0.0:
        raise ValueError(f"p_opt must be > 0, got {p_opt}")
    if wavelength_nm <= 0.0:
        raise ValueError(f"wavelength must be > 0, got {wavelength_nm}")
    lam_m = wavelength_nm * 1e-9
    return eqe * p_opt * constants.e * lam_m / (constants.h * constants.c)


def avalanche_probability(dev: DeviceParams, v_ex: float, temperature_c: float) -> float:
    """Trigger probability of a single carrier under excess bias v_ex.

    Zero at and below v_ex = 0; saturating exponential with e-folding
    p_avl_scale toward the temperature-dependent ceiling.
    """
    if v_ex <= 0.0:
        return 0.0
    return dev.p_avl_ceiling(temperature_c) * (1.0 - math.exp(-v_ex / dev.p_avl_scale))


def dark_rate(dev: DeviceParams, temperature_c: float, gate: GateConfig) -> float:
    """Dark carrier generation rate (events/s while the gate is open).

    Thermal doubling per dark_doubling_interval above -30 degC; below that
    the larger of the thermal term and the amplitude floor applies.
    """
    thermal = dev.dark_rate_ref * 2.0 ** (
        (temperature_c - DARK_REF_TEMPERATURE_C) / dev.dark_doubling_interval
    )
    if temperature_c >= DARK_REF_TEMPERATURE_C:
        return thermal
    return max(thermal, dev.dark_floor_coeff * gate.v_pp)


def detrap_tau(dev: DeviceParams, temperature_c: float) -> float:
    """Carrier de-trapping time constant (ns), Arrhenius in temperature."""
    if temperature_c <= -_ZERO_C_IN_K:
        raise ValueError(f"temperature below absolute zero: {temperature_c} degC")
    t_k = temperature_c + _ZERO_C_IN_K
    t_ref_k = dev.t_ref + _ZERO_C_IN_K
    return dev.detrap_tau_ref * math.exp(
        dev.detrap_activation * (1.0 / t_k - 1.0 / t_ref_k)
    )


def jitter_sigma_ps(dev: DeviceParams, v_ex: float) -> float:
    """Avalanche build-up jitter sigma (ps); infinite-jitter guard at v_ex <= 0."""
    if v_ex <= 0.0:
        return 0.0
    return dev.jitter_coeff / v_ex


def gate_level_spde(dev: DeviceParams, gate: GateConfig, temperature_c: float) -> float:
    """Closed-form detection efficiency at gate granularity.

    EQE times trigger probability; the discriminator factor is unity at
    this level (it is realized in the waveform view).
    """
    v_ex = excess_voltage(dev, gate, temperature_c)
    return dev.eqe_max * avalanche_probability(dev, v_ex, temperature_c)


# ---------------------------------------------------------------------------
# Device parameter file format: one `key = value` per line, `#` comments.
# Key names are the DeviceParams field names and are frozen for golden files.

def device_to_text(dev: DeviceParams) -> str:
    out = io.StringIO()
    out.write("# APD device parameters\n")
    out.write("# volts, degC, cps, pC, ns, ps as per field docs\n")
    for f in fields(DeviceParams):
        out.write(f"{f.name} = {getattr(dev, f.name)!r}\n")
    return out.getvalue()


def device_from_text(text: str) -> DeviceParams:
    known = {f.name for f in fields(DeviceParams)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown device parameter {key!r}")
        try:
            values[key] = float(val.strip())
        except ValueError:
            raise ValueError(f"line {lineno}: invalid number for {key!r}: {val.strip()!r}") from None
    return DeviceParams(**values)


def save_device(dev: DeviceParams, path) -> None:
    with open(path, "w") as fh:
        fh.write(device_to_text(dev))


def load_device(path) -> DeviceParams:
    with open(path) as fh:
        return device_from_text(fh.read())


def default_calibrated_device() -> DeviceParams:
    """The calibrated parameter set shipped with the package."""
    from importlib import resources

    text = resources.files("sdapd.data").joinpath("calibrated.params").read_text()
    return device_from_text(text)
