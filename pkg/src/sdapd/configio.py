"""Line-oriented `key = value` config files with `[section]` headers.

The format is deliberately flat and diff-friendly: full-line and trailing
`#` comments, one key per line, no nesting. Parse errors and invalid
values report the file and line number.

Sections:

* ``[device]`` — DeviceParams fields inline, or ``file = <params path>``
  (relative paths resolve against the config file);
* ``[gate]`` — f_gate_hz, t_gate_ps, v_pp_v, v_dc_v;
* ``[optical]`` — f_laser_hz, mu, wavelength_nm, pulse_width_ps,
  gate_offset_ps;
* ``[run]`` — temperature_c, n_gates, seed, illumination (on/off),
  tag_resolution_ps;
* ``[sweep]`` — axis, values (comma-separated), target_spde or target_pa,
  replicate_seeds;
* ``[waveform]`` — shape, sample_period_ps, n_periods, edge_fraction,
  noise_rms_mv, avalanches (semicolon-separated gate,t_ps,charge_pc
  triples).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .device import DeviceParams, GateConfig, OpticalConfig, load_device
from .engine import RunConfig
from .harness import SweepSpec


class ConfigError(Exception):
    def __init__(self, path, lineno: int | None, message: str):
        self.path = path
        self.lineno = lineno
        self.message = message
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {message}")


class _Section(dict):
    """Maps key -> (raw value, line number)."""

    def __init__(self, path, header_lineno: int):
        super().__init__()
        self.path = path
        self.header_lineno = header_lineno

    def _fetch(self, key, default):
        if key not in self:
            if default is not _REQUIRED:
                return None, default
            raise ConfigError(self.path, self.header_lineno,
                              f"missing required key {key!r}")
        return self[key]

    def get_str(self, key, default=None):
        item = self._fetch(key, default)
        return item[1] if item[0] is None else item[0]

    def _convert(self, key, default, conv, kindname):
        item = self._fetch(key, default)
        if item[0] is None:
            return item[1]
        raw, lineno = item
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(self.path, lineno,
                              f"invalid {kindname} for {key!r}: {raw!r}") from None

    def get_float(self, key, default=None):
        return self._convert(key, default, float, "number")

    def get_int(self, key, default=None):
        return self._convert(key, default, lambda s: int(s, 0), "integer")

    def get_bool(self, key, default=None):
        def conv(s):
            s = s.lower()
            if s in ("on", "true", "yes", "1"):
                return True
            if s in ("off", "false", "no", "0"):
                return False
            raise ValueError(s)
        return self._convert(key, default, conv, "on/off value")


_REQUIRED = object()


def read_config(path) -> dict[str, _Section]:
    """Parse a config file into {section: {key: (value, lineno)}}."""
    sections: dict[str, _Section] = {}
    current: _Section | None = None
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError:
        raise
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if "#" in line:
            line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if not name:
                raise ConfigError(path, lineno, "empty section name")
            current = sections.setdefault(name, _Section(path, lineno))
            continue
        if "=" not in line:
            raise ConfigError(path, lineno,
                              f"expected 'key = value' or '[section]', got {raw.strip()!r}")
        if current is None:
            raise ConfigError(path, lineno, "key outside any [section]")
        key, _, val = line.partition("=")
        current[key.strip().lower()] = (val.strip(), lineno)
    return sections


def _section(cfg: dict, path, name: str, required: bool = True) -> _Section | None:
    if name not in cfg:
        if required:
            raise ConfigError(path, None, f"missing [{name}] section")
        return None
    return cfg[name]


def _parse_device(cfg: dict, path) -> DeviceParams:
    sec = _section(cfg, path, "device")
    if "file" in sec:
        rel, lineno = sec["file"]
        params_path = os.path.join(os.path.dirname(os.path.abspath(path)), rel) \
            if not os.path.isabs(rel) else rel
        try:
            return load_device(params_path)
        except OSError:
            raise
        except ValueError as exc:
            raise ConfigError(path, lineno, f"bad device file {rel!r}: {exc}") from None
    known = {f.name for f in dataclasses.fields(DeviceParams)}
    values = {}
    for key, (raw, lineno) in sec.items():
        if key not in known:
            raise ConfigError(path, lineno, f"unknown device parameter {key!r}")
        values[key] = sec.get_float(key, _REQUIRED)
    try:
        return DeviceParams(**values)
    except ValueError as exc:
        raise ConfigError(path, sec.header_lineno, str(exc)) from None


def _parse_gate(cfg: dict, path) -> GateConfig:
    sec = _section(cfg, path, "gate")
    try:
        return GateConfig(
            f_gate=sec.get_float("f_gate_hz", _REQUIRED),
            t_gate=sec.get_float("t_gate_ps", _REQUIRED),
            v_pp=sec.get_float("v_pp_v", _REQUIRED),
            v_dc=sec.get_float("v_dc_v", _REQUIRED),
        )
    except ValueError as exc:
        raise ConfigError(path, sec.header_lineno, str(exc)) from None


def _parse_optical(cfg: dict, path, required: bool) -> OpticalConfig | None:
    sec = _section(cfg, path, "optical", required=required)
    if sec is None:
        return None
    try:
        return OpticalConfig(
            f_laser=sec.get_float("f_laser_hz", _REQUIRED),
            mu=sec.get_float("mu", _REQUIRED),
            wavelength=sec.get_float("wavelength_nm", 1550.0),
            pulse_width=sec.get_float("pulse_width_ps", 3.0),
            gate_offset=sec.get_float("gate_offset_ps", 50.0),
        )
    except ValueError as exc:
        raise ConfigError(path, sec.header_lineno, str(exc)) from None


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    cfg = read_config(path)
    run = _section(cfg, path, "run")
    illumination = run.get_bool("illumination", True)
    optical = _parse_optical(cfg, path, required=illumination)
    seed = run.get_int("seed", _REQUIRED) if seed_override is None else seed_override
    try:
        return RunConfig(
            device=_parse_device(cfg, path),
            gate=_parse_gate(cfg, path),
            optical=optical,
            temperature=run.get_float("temperature_c", _REQUIRED),
            n_gates=run.get_int("n_gates", _REQUIRED),
            seed=seed,
            illumination=illumination,
            tag_resolution=run.get_float("tag_resolution_ps", 100.0),
        )
    except ValueError as exc:
        raise ConfigError(path, run.header_lineno, str(exc)) from None


def load_sweep_spec(path, seed_override: int | None = None) -> SweepSpec:
    cfg = read_config(path)
    sec = _section(cfg, path, "sweep")
    template = load_run_config(path, seed_override=seed_override)
    axis = sec.get_str("axis", _REQUIRED)
    raw_values, values_lineno = sec["values"] if "values" in sec else (None, None)
    if raw_values is None:
        raise ConfigError(path, sec.header_lineno, "missing required key 'values'")
    try:
        values = tuple(float(v) for v in raw_values.split(",") if v.strip())
    except ValueError:
        raise ConfigError(path, values_lineno,
                          f"invalid values list: {raw_values!r}") from None
    target = None
    if "target_spde" in sec and "target_pa" in sec:
        raise ConfigError(path, sec["target_pa"][1],
                          "give only one of target_spde / target_pa")
    if "target_spde" in sec:
        target = ("spde", sec.get_float("target_spde", _REQUIRED))
    elif "target_pa" in sec:
        target = ("p_a", sec.get_float("target_pa", _REQUIRED))
    try:
        return SweepSpec(
            axis=axis,
            values=values,
            fixed=template,
            target=target,
            replicate_seeds=sec.get_int("replicate_seeds", 1),
        )
    except ValueError as exc:
        raise ConfigError(path, sec.header_lineno, str(exc)) from None


@dataclass(frozen=True)
class WaveformJob:
    gate: GateConfig
    avalanches: tuple
    shape: str
    sample_period: float
    n_periods: int | None
    edge_fraction: float
    noise_rms: float
    seed: int


def load_waveform_job(path, seed_override: int | None = None) -> WaveformJob:
    cfg = read_config(path)
    sec = _section(cfg, path, "waveform")
    avalanches = []
    if "avalanches" in sec:
        raw, lineno = sec["avalanches"]
        for part in raw.split(";"):
            part = part.strip()
            if not part:
                continue
            fields = part.split(",")
            if len(fields) != 3:
                raise ConfigError(path, lineno,
                                  f"avalanche must be gate,t_ps,charge_pc: {part!r}")
            try:
                avalanches.append((int(fields[0]), float(fields[1]), float(fields[2])))
            except ValueError:
                raise ConfigError(path, lineno,
                                  f"malformed avalanche triple {part!r}") from None
    n_periods = sec.get_int("n_periods", None)
    seed = sec.get_int("seed", 0) if seed_override is None else seed_override
    return WaveformJob(
        gate=_parse_gate(cfg, path),
        avalanches=tuple(avalanches),
        shape=sec.get_str("shape", "raised_cosine"),
        sample_period=sec.get_float("sample_period_ps", 5.0),
        n_periods=n_periods,
        edge_fraction=sec.get_float("edge_fraction", 0.1),
        noise_rms=sec.get_float("noise_rms_mv", 0.0),
        seed=seed,
    )
