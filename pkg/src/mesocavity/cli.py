"""Command-line front end: INI configs, presets, runs, oracle validation, scans, resume.

Config files are INI (``configparser``).  Frequencies and rates are written as
``value MHz`` (meaning ``value * 2 pi * 1e6`` rad/s), times as ``value ns`` /
``us`` / ``ms`` / ``s``.  Bare numbers are SI (rad/s, s).  Sections:

``[run]``      dt, t_end, d_max, record_every, abort_weight, fock_ceiling,
               weight_tol, factorization, renormalize, g2_window, peak_fraction, name
``[cavity]``   frequency, decay, fock_dim
``[drive]``    amplitude, frequency, pulse_end
``[comb]``     teeth, spacing, central_coupling, envelope_width, spins_per_tooth, spin_decay
``[spins]``    either lists ``frequencies``/``couplings``/``decays`` or
               ``count``/``frequency``/``coupling``/``decay``/``broadening``
``[initial]``  spins = ground | excited | comma list of g/e
``[validate]`` method, substeps, tolerance
``[scan]``     ``section.key = v1; v2; ...`` (cartesian grid)
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy.signal
import scipy.stats

from . import __version__
from .engine import (
    TruncationAbort,
    evolve,
    init_state,
    load_checkpoint,
    save_checkpoint,
    step,
)
from .exact import iter_exact, measure_exact, product_state
from .model import (
    CavitySpec,
    CombSpec,
    DriveSchedule,
    EnsembleSpec,
    InvalidSpecError,
    SpinSpec,
    build_comb,
    to_rotating_frame,
)
from .observables import ObservableRecord, measure
from .superop import EXCITED_STATE, GROUND_STATE, DimensionCapError
from .trotter import PropagatorCache

EXIT_OK = 0
EXIT_VALIDATION_FAILED = 1
EXIT_CONFIG = 2
EXIT_TRUNCATION = 3
EXIT_FOCK = 4
EXIT_ORACLE_CAP = 5

COLUMNS = ("time_ns", "n_photon", "g2", "g3", "g4", "spin_exc_res", "jz", "J", "trace_drift", "trunc_err")
_FIELDS = ("photon_number", "g2", "g3", "g4", "spin_excitation_resonant", "jz", "collective_J",
           "trace_drift", "truncation_error")

ENV_OUT = "MESOCAVITY_OUT"
ENV_WORKERS = "MESOCAVITY_WORKERS"

_FREQ_UNITS = {"hz": 1.0, "khz": 1e3, "mhz": 1e6, "ghz": 1e9}
_TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "ns": 1e-9, "ps": 1e-12}
# number, optional whitespace, optional single-token unit
_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S*)\s*$")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class FockCheckFailure(RuntimeError):
    """Top Fock level population exceeded the configured ceiling."""


# --- units -------------------------------------------------------------------

def _split_quantity(text: str, kind: str) -> tuple[float, str]:
    m = _QUANTITY.match(str(text))
    if m is None:
        raise ConfigError(f"cannot parse {kind} {text!r}")
    return float(m.group(1)), m.group(2).lower()


def parse_frequency(text: str) -> float:
    """``'30 MHz'`` -> 2 pi 30e6 rad/s; ``'rad/s'`` suffix or a bare number is taken as is."""
    value, unit = _split_quantity(text, "frequency")
    if unit in ("", "rad/s"):
        return value
    if unit in _FREQ_UNITS:
        return value * 2.0 * math.pi * _FREQ_UNITS[unit]
    raise ConfigError(f"unknown frequency unit in {text!r}")


def parse_time(text: str) -> float:
    value, unit = _split_quantity(text, "time")
    if unit == "":
        return value
    if unit in _TIME_UNITS:
        return value * _TIME_UNITS[unit]
    raise ConfigError(f"unknown time unit in {text!r}")


def _frequency_list(text: str) -> list[float]:
    """``'-5, 0, 5 MHz'``: a trailing unit applies to every entry without one."""
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    if not items:
        return []
    unit = _split_quantity(items[-1], "frequency")[1]
    out = []
    for it in items:
        if not _split_quantity(it, "frequency")[1]:
            it = f"{it} {unit}"
        out.append(parse_frequency(it))
    return out


# --- configuration -------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Fully resolved run parameters in SI units (rad/s, s)."""

    name: str = "run"
    # ensemble: comb (when comb_teeth > 0) or explicit spin lists
    comb_teeth: int = 0
    comb_spacing: float = 0.0
    comb_central_coupling: float = 0.0
    comb_envelope_width: float = 0.0
    comb_spins_per_tooth: int = 1
    spin_frequencies: tuple = ()
    spin_couplings: tuple = ()
    spin_decays: tuple = ()
    spin_decay: float = 0.0
    cavity_frequency: float = 0.0
    cavity_decay: float = 0.0
    fock_dim: int = 16
    drive_amplitude: float = 0.0
    drive_frequency: float = 0.0
    pulse_end: float = 0.0
    initial_spins: tuple = ()  # "g"/"e" per spin; empty means all ground
    dt: float = 1e-9
    t_end: float = 1e-8
    d_max: int = 200
    record_every: int = 1
    abort_weight: float = 1e-6
    fock_ceiling: float = 1e-9
    weight_tol: float = 0.0
    factorization: str = "svd"
    renormalize: str = "step"
    g2_window: float = 0.25
    peak_fraction: float = 0.5
    oracle_method: str = "rk4"
    oracle_substeps: int = 4
    tolerance: float = 1e-4

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.t_end >= 0:
            raise ConfigError("t_end must be nonnegative")
        if self.d_max < 1 or self.record_every < 1:
            raise ConfigError("d_max and record_every must be >= 1")
        for name in ("cavity_decay", "drive_amplitude", "spin_decay", "abort_weight", "fock_ceiling",
                     "weight_tol", "pulse_end"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if any(d < 0 for d in self.spin_decays):
            raise ConfigError("spin decays must be nonnegative")
        if self.factorization not in ("svd", "gram"):
            raise ConfigError(f"unknown factorization {self.factorization!r}")
        if self.renormalize not in ("step", "event"):
            raise ConfigError(f"unknown renormalize mode {self.renormalize!r}")
        if not self.comb_teeth:
            n = len(self.spin_frequencies)
            if n == 0:
                raise ConfigError("no spins configured (need [comb] or [spins])")
            if len(self.spin_couplings) != n or len(self.spin_decays) != n:
                raise ConfigError("spin frequency, coupling and decay lists differ in length")
        if self.initial_spins and any(c not in ("g", "e") for c in self.initial_spins):
            raise ConfigError("initial spins must be 'g' or 'e'")

    # -- derived objects --
    def ensemble(self) -> EnsembleSpec:
        """Rotating-frame ensemble (frequencies measured from the drive)."""
        cavity = CavitySpec(self.cavity_frequency, self.cavity_decay, self.fock_dim)
        drive = DriveSchedule(self.drive_amplitude, self.drive_frequency, self.pulse_end)
        try:
            if self.comb_teeth:
                comb = CombSpec(self.comb_teeth, self.comb_spacing, self.comb_central_coupling,
                                self.comb_envelope_width, self.comb_spins_per_tooth)
                spec = build_comb(comb, cavity, drive, self.spin_decay)
            else:
                spins = tuple(SpinSpec(f, g, d) for f, g, d in
                              zip(self.spin_frequencies, self.spin_couplings, self.spin_decays))
                spec = EnsembleSpec(spins, cavity, drive)
        except InvalidSpecError as exc:
            raise ConfigError(str(exc)) from exc
        if self.initial_spins and len(self.initial_spins) != spec.n_spins:
            raise ConfigError(f"{len(self.initial_spins)} initial spin labels for {spec.n_spins} spins")
        return to_rotating_frame(spec)

    def spin_states(self):
        n = self.ensemble().n_spins
        labels = self.initial_spins or ("g",) * n
        return [EXCITED_STATE if c == "e" else GROUND_STATE for c in labels]

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _gaussian_offsets(n: int, width: float) -> list[float]:
    """Deterministic Gaussian sample: quantiles at (k + 1/2)/n, mean removed."""
    if n == 1 or width == 0.0:
        return [0.0] * n
    q = scipy.stats.norm.ppf((np.arange(n) + 0.5) / n) * width
    return list(q - q.mean())


def config_from_sections(sections: dict[str, dict[str, str]]) -> RunConfig:
    """Build a :class:`RunConfig` from raw INI-style ``{section: {key: text}}``."""
    known = {"run", "cavity", "drive", "comb", "spins", "initial", "validate", "scan"}
    bad = set(sections) - known
    if bad:
        raise ConfigError(f"unknown config sections {sorted(bad)}")
    run = dict(sections.get("run", {}))
    cav = dict(sections.get("cavity", {}))
    drv = dict(sections.get("drive", {}))
    comb = dict(sections.get("comb", {}))
    spins = dict(sections.get("spins", {}))
    init = dict(sections.get("initial", {}))
    val = dict(sections.get("validate", {}))
    kw: dict = {}

    def take(sec, key, conv, field=None, label="run"):
        if key in sec:
            raw = sec.pop(key)
            try:
                kw[field or key] = conv(raw)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{label}] {key} = {raw!r}: {exc}") from None

    take(run, "name", str)
    take(run, "dt", parse_time)
    take(run, "t_end", parse_time)
    take(run, "d_max", int)
    take(run, "record_every", int)
    take(run, "abort_weight", float)
    take(run, "fock_ceiling", float)
    take(run, "weight_tol", float)
    take(run, "factorization", str)
    take(run, "renormalize", str)
    take(run, "g2_window", float)
    take(run, "peak_fraction", float)
    run.pop("preset", None)
    take(cav, "frequency", parse_frequency, "cavity_frequency", "cavity")
    take(cav, "decay", parse_frequency, "cavity_decay", "cavity")
    take(cav, "fock_dim", int, "fock_dim", "cavity")
    take(drv, "amplitude", parse_frequency, "drive_amplitude", "drive")
    take(drv, "frequency", parse_frequency, "drive_frequency", "drive")
    take(drv, "pulse_end", parse_time, "pulse_end", "drive")
    take(val, "method", str, "oracle_method", "validate")
    take(val, "substeps", int, "oracle_substeps", "validate")
    take(val, "tolerance", float, "tolerance", "validate")

    if comb and spins:
        raise ConfigError("configure either [comb] or [spins], not both")
    if comb:
        take(comb, "teeth", int, "comb_teeth", "comb")
        take(comb, "spacing", parse_frequency, "comb_spacing", "comb")
        take(comb, "central_coupling", parse_frequency, "comb_central_coupling", "comb")
        take(comb, "envelope_width", parse_frequency, "comb_envelope_width", "comb")
        take(comb, "spins_per_tooth", int, "comb_spins_per_tooth", "comb")
        take(comb, "spin_decay", parse_frequency, "spin_decay", "comb")
        if not kw.get("comb_teeth"):
            raise ConfigError("[comb] needs teeth")
    elif spins:
        if "frequencies" in spins:
            freqs = _frequency_list(spins.pop("frequencies"))
            n = len(freqs)
            couplings = _frequency_list(spins.pop("couplings", "0"))
            decays = _frequency_list(spins.pop("decays", "0"))
            couplings = couplings * n if len(couplings) == 1 else couplings
            decays = decays * n if len(decays) == 1 else decays
        else:
            try:
                n = int(spins.pop("count"))
            except KeyError:
                raise ConfigError("[spins] needs frequencies or count") from None
            except ValueError as exc:
                raise ConfigError(f"[spins] count: {exc}") from None
            if n < 1:
                raise ConfigError("[spins] count must be >= 1")
            centre = parse_frequency(spins.pop("frequency", "0"))
            width = parse_frequency(spins.pop("broadening", "0"))
            freqs = [centre + x for x in _gaussian_offsets(n, width)]
            couplings = [parse_frequency(spins.pop("coupling", "0"))] * n
            decays = [parse_frequency(spins.pop("decay", "0"))] * n
        kw.update(spin_frequencies=tuple(freqs), spin_couplings=tuple(couplings), spin_decays=tuple(decays))
    if "spins" in init:
        raw = init.pop("spins").strip().lower()
        if raw in ("ground", "excited"):
            kw["initial_spins"] = ("excited",) if raw == "excited" else ()
        else:
            kw["initial_spins"] = tuple(t.strip()[:1] for t in raw.split(",") if t.strip())
    leftovers = {f"[{name}] {k}" for name, sec in
                 (("run", run), ("cavity", cav), ("drive", drv), ("comb", comb), ("spins", spins),
                  ("initial", init), ("validate", val)) for k in sec}
    if leftovers:
        raise ConfigError(f"unknown config keys: {sorted(leftovers)}")
    if kw.get("initial_spins") == ("excited",):
        # expand once the spin count is known
        probe = RunConfig(**{**kw, "initial_spins": ()})
        kw["initial_spins"] = ("e",) * probe.ensemble().n_spins
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --- presets -------------------------------------------------------------------

PRESETS: dict[str, dict[str, dict[str, str]]] = {
    # Spectral comb, 7 teeth of one spin each, driven by a short resonant pulse.
    "comb-n7": {
        "run": {"name": "comb-n7", "dt": "0.25 ns", "t_end": "300 ns", "d_max": "200",
                "factorization": "gram", "fock_ceiling": "1e-9"},
        "cavity": {"frequency": "0 MHz", "decay": "0.4 MHz", "fock_dim": "10"},
        "drive": {"amplitude": "16 MHz", "frequency": "0 MHz", "pulse_end": "5 ns"},
        "comb": {"teeth": "7", "spacing": "40 MHz", "central_coupling": "30 MHz",
                 "envelope_width": "150 MHz", "spins_per_tooth": "1", "spin_decay": "0.01 MHz"},
    },
    # One uncoupled spin; the cavity alone is driven into a coherent state.
    "empty-cavity": {
        "run": {"name": "empty-cavity", "dt": "10 ns", "t_end": "2 us", "d_max": "16", "fock_ceiling": "1e-6"},
        "cavity": {"frequency": "0 MHz", "decay": "1 MHz", "fock_dim": "10"},
        "drive": {"amplitude": "0.25 MHz", "frequency": "0 MHz", "pulse_end": "1 s"},
        "spins": {"frequencies": "0 MHz", "couplings": "0 MHz", "decays": "0 MHz"},
    },
    # Single resonant spin exchanging one excitation with the empty cavity.
    "rabi": {
        "run": {"name": "rabi", "dt": "2.5 ns", "t_end": "1 us", "d_max": "16", "fock_ceiling": "1"},
        "cavity": {"frequency": "0 MHz", "decay": "0 MHz", "fock_dim": "3"},
        "spins": {"frequencies": "0 MHz", "couplings": "1 MHz", "decays": "0 MHz"},
        "initial": {"spins": "excited"},
        "validate": {"method": "expm", "tolerance": "1e-6"},
    },
    # Six excited spins in a lossy cavity: collective (superradiant) emission.
    "superradiance": {
        "run": {"name": "superradiance", "dt": "20 ns", "t_end": "2 us", "d_max": "64", "fock_ceiling": "1e-3",
                "abort_weight": "1e-4"},
        "cavity": {"frequency": "0 MHz", "decay": "10 MHz", "fock_dim": "3"},
        "spins": {"count": "6", "frequency": "0 MHz", "coupling": "0.5 MHz", "decay": "0 MHz",
                  "broadening": "0 MHz"},
        "initial": {"spins": "excited"},
        "validate": {"method": "rk4", "substeps": "8", "tolerance": "5e-3"},
    },
    # Eight inhomogeneous spins, good cavity, weak continuous drive.
    # dt is 1/100 of the collective Rabi period pi / Omega, Omega = sqrt(8) g.
    "benchmark-n8": {
        "run": {"name": "benchmark-n8", "dt": "1.7677669529663689 ns", "t_end": "707.10678118654755 ns",
                "d_max": "16", "fock_ceiling": "1e-3"},
        "cavity": {"frequency": "0 MHz", "decay": "0.1 MHz", "fock_dim": "4"},
        "drive": {"amplitude": "0.1 MHz", "frequency": "0 MHz", "pulse_end": "1 s"},
        "spins": {"frequencies": "-0.35, -0.25, -0.15, -0.05, 0.05, 0.15, 0.25, 0.35 MHz",
                  "couplings": "1 MHz", "decays": "0.01 MHz"},
        "validate": {"method": "rk4-dm", "substeps": "2", "tolerance": "5e-5"},
    },
}


def preset_sections(name: str) -> dict[str, dict[str, str]]:
    try:
        return {k: dict(v) for k, v in PRESETS[name].items()}
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def read_sections(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return {s: dict(parser.items(s)) for s in parser.sections()}


def merge_sections(base, override):
    out = {k: dict(v) for k, v in base.items()}
    for sec, items in override.items():
        if sec in ("comb", "spins") and items:
            out.pop("spins" if sec == "comb" else "comb", None)
        out.setdefault(sec, {}).update(items)
    return out


def load_sections(config_path=None, preset=None) -> dict[str, dict[str, str]]:
    """Preset (flag or ``[run] preset``) overlaid by the config file."""
    file_sections = read_sections(config_path) if config_path else {}
    preset = preset or file_sections.get("run", {}).get("preset")
    base = preset_sections(preset) if preset else {}
    if not base and not file_sections:
        raise ConfigError("need --config or --preset")
    return merge_sections(base, file_sections)


def load_config(config_path=None, preset=None) -> RunConfig:
    sections = load_sections(config_path, preset)
    sections.pop("scan", None)
    return config_from_sections(sections)


# --- time series output ----------------------------------------------------------

def _fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def record_row(rec: ObservableRecord) -> list[str]:
    # rounding strips float noise from i * dt in seconds (1e-9 ns is far below any step)
    return [_fmt(round(rec.time * 1e9, 9))] + [_fmt(getattr(rec, f)) for f in _FIELDS]


def write_series(path, records, config: RunConfig, meta: dict | None = None):
    """CSV with a ``#`` metadata block (hash, version, wall time, JSON config) and fixed columns."""
    path = Path(path)
    meta = dict(meta or {})
    lines = [f"# config_hash: {config.config_hash()}", f"# version: {__version__}"]
    for k, v in meta.items():
        lines.append(f"# {k}: {v}")
    lines.append(f"# config: {config.canonical_json()}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for rec in records:
        w.writerow(record_row(rec) if isinstance(rec, ObservableRecord) else rec)
    path.write_text("\n".join(lines) + "\n" + buf.getvalue(), encoding="utf-8")
    return path


def read_series(path) -> tuple[dict, np.ndarray]:
    """Metadata dict (``config`` parsed to :class:`RunConfig`) and the numeric table."""
    meta, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(": ")
                meta[key] = val
            elif line.strip() and not line.startswith(COLUMNS[0]):
                rows.append([float(x) for x in line.strip().split(",")])
    if "config" in meta:
        meta["config"] = RunConfig.from_dict(json.loads(meta["config"]))
    table = np.array(rows, dtype=float).reshape(-1, len(COLUMNS))
    return meta, table


def payload(path) -> str:
    """Data part of a series file (metadata excluded), for determinism checks."""
    with open(path, encoding="utf-8") as fh:
        return "".join(line for line in fh if not line.startswith("#"))


# --- revival analysis ---------------------------------------------------------------

def detect_revivals(times, photon, fraction: float = 0.5, after: float = 0.0) -> np.ndarray:
    """Indices of photon-number peaks higher than ``fraction`` of the largest value after ``after``."""
    times = np.asarray(times, dtype=float)
    photon = np.asarray(photon, dtype=float)
    mask = times > after
    if not mask.any():
        return np.array([], dtype=int)
    offset = int(np.argmax(mask))
    sub = photon[offset:]
    peaks, _ = scipy.signal.find_peaks(sub, height=fraction * float(np.max(sub)))
    return peaks + offset


def revival_summary(times, photon, g2, *, fraction=0.5, window=0.25, after=0.0, g_higher=None,
                    support=0.5) -> dict:
    """Revival times, mean spacing and ``g_n`` minima around each peak.

    ``g2`` minima are taken within ``+-window * spacing`` of each peak.  Minima of the
    higher orders in ``g_higher`` are further restricted to points where the photon
    number is at least ``support`` times the peak value, since their moments sink
    below the truncation noise floor between revivals.
    """
    times = np.asarray(times, dtype=float)
    photon = np.asarray(photon, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    peaks = detect_revivals(times, photon, fraction, after)
    out = {"peak_times": times[peaks], "spacing": math.nan, "g2_min": np.array([])}
    if peaks.size >= 2:
        out["spacing"] = float(np.mean(np.diff(times[peaks])))
    if peaks.size:
        half = window * (out["spacing"] if peaks.size >= 2 else times[peaks[0]])
        mins = {2: []}
        for k in (g_higher or {}):
            mins[k] = []
        for p in peaks:
            sel = np.abs(times - times[p]) <= half
            mins[2].append(np.nanmin(np.where(sel, g2, np.nan)))
            strong = sel & (photon >= support * photon[p])
            for k, series in (g_higher or {}).items():
                mins[k].append(np.nanmin(np.where(strong, np.asarray(series, float), np.nan)))
        out["g2_min"] = np.array(mins[2])
        for k in (g_higher or {}):
            out[f"g{k}_min"] = np.array(mins[k])
    return out


def summarize_table(table: np.ndarray, config: RunConfig) -> dict:
    t = table[:, 0] * 1e-9
    after = config.pulse_end if config.drive_amplitude else 0.0
    s = revival_summary(t, table[:, 1], table[:, 2], fraction=config.peak_fraction, window=config.g2_window,
                        after=after, g_higher={3: table[:, 3], 4: table[:, 4]})
    return {
        "n_revivals": int(len(s["peak_times"])),
        "delta_tau_ns": s["spacing"] * 1e9,
        "g2_min": ";".join(_fmt(x) for x in s["g2_min"]),
        "final_trace_drift": float(table[-1, 8]) if len(table) else math.nan,
        "max_trunc_err": float(np.nanmax(table[:, 9])) if len(table) else math.nan,
    }


# --- run / resume -------------------------------------------------------------------

def _partial_path(out_dir: Path, name: str) -> Path:
    return out_dir / f"{name}.csv.partial"


def _checkpoint_path(out_dir: Path, name: str) -> Path:
    return out_dir / f"{name}.ckpt.npz"


def run(config: RunConfig, out_dir, *, checkpoint_every: int = 0, state=None, start_rows=None,
        fock_top: float = 0.0, log=None) -> Path:
    """Evolve ``config`` writing ``<out>/<name>.csv``; returns the series path.

    Raises :class:`TruncationAbort` or :class:`FockCheckFailure` (after writing the
    series) on the corresponding failures.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = config.ensemble()
    cache = PropagatorCache(spec)
    t_start = time.time()
    partial = _partial_path(out_dir, config.name)
    rows = list(start_rows or [])
    if state is None:
        state = init_state(spec, config.d_max, spin_states=config.spin_states(),
                           abort_weight=config.abort_weight, weight_tol=config.weight_tol,
                           factorization=config.factorization)
        rec = measure(state, spec)
        fock_top = rec.fock_top
        rows = [record_row(rec)]
    with open(partial, "w", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(rows)
        fh.flush()
        start = int(round(state.time / config.dt))
        for i in range(start + 1, config.n_steps + 1):
            state, report = step(state, cache, config.dt, renormalize=config.renormalize)
            state.time = i * config.dt
            if i % config.record_every == 0:
                rec = measure(state, spec, report)
                fock_top = max(fock_top, rec.fock_top)
                row = record_row(rec)
                rows.append(row)
                w.writerow(row)
                fh.flush()
                if log is not None:
                    log(rec)
            if checkpoint_every and i % checkpoint_every == 0:
                save_checkpoint(state, _checkpoint_path(out_dir, config.name),
                                {"config": config.to_dict(), "rows": len(rows), "fock_top": fock_top})
    wall = time.time() - t_start
    fock_ok = fock_top <= config.fock_ceiling
    path = write_series(out_dir / f"{config.name}.csv", rows, config,
                        {"wall_time_s": f"{wall:.3f}", "max_fock_top": _fmt(fock_top),
                         "fock_check": "pass" if fock_ok else "FAIL"})
    partial.unlink(missing_ok=True)
    if not fock_ok:
        raise FockCheckFailure(f"top Fock level population {fock_top:.3e} exceeds ceiling "
                               f"{config.fock_ceiling:.1e}; increase fock_dim")
    return path


def resume(checkpoint, out_dir=None, *, checkpoint_every: int = 0, log=None) -> Path:
    """Continue a checkpointed run; rows already written up to the checkpoint are kept."""
    state, meta = load_checkpoint(checkpoint)
    config = RunConfig.from_dict(meta["config"])
    out_dir = Path(out_dir) if out_dir else Path(checkpoint).parent
    partial = _partial_path(out_dir, config.name)
    if not partial.exists():
        raise ConfigError(f"no partial series {partial} to resume")
    with open(partial, encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r][: meta["rows"]]
    return run(config, out_dir, checkpoint_every=checkpoint_every, state=state, start_rows=rows,
               fock_top=meta.get("fock_top", 0.0), log=log)


# --- validation ---------------------------------------------------------------------

def validate(config: RunConfig, oracle_config: RunConfig | None = None, *, max_dim: int | None = None) -> dict:
    """Run engine and oracle on the same grid; per-observable max deviation and verdict.

    ``oracle_config`` substitutes a different oracle configuration (negative controls).
    """
    spec = config.ensemble()
    ospec = (oracle_config or config).ensemble()
    kw = {} if max_dim is None else {"max_dim": max_dim}
    rho0 = product_state(ospec, spin_states=(oracle_config or config).spin_states())
    oracle = iter_exact(ospec, rho0, config.t_end, config.dt, method=config.oracle_method,
                        substeps=config.oracle_substeps, **kw)
    oracle_records = [measure_exact(s, ospec) for s in oracle]
    records, _ = evolve(spec, config.t_end, config.dt, d_max=config.d_max,
                        state=init_state(spec, config.d_max, spin_states=config.spin_states(),
                                         abort_weight=config.abort_weight, weight_tol=config.weight_tol,
                                         factorization=config.factorization),
                        abort_weight=config.abort_weight, renormalize=config.renormalize)
    fields = ("photon_number", "jz", "collective_J", "spin_excitation_resonant", "g2")
    # g2 = <a+a+aa>/n^2 turns a moment error of size tol into tol/n^2; compare it only
    # where that stays below one, i.e. n > sqrt(tol).
    lit = np.array([r.photon_number for r in oracle_records]) > math.sqrt(config.tolerance)
    dev = {}
    for f in fields:
        a = np.array([getattr(r, f) for r in records])
        b = np.array([getattr(r, f) for r in oracle_records])
        ok = np.isfinite(a) & np.isfinite(b) & (lit if f == "g2" else True)
        dev[f] = float(np.max(np.abs(a[ok] - b[ok]))) if ok.any() else 0.0
    checked = ("photon_number", "jz", "collective_J", "spin_excitation_resonant")
    passed = all(dev[f] <= config.tolerance for f in checked)
    return {"deviation": dev, "tolerance": config.tolerance, "passed": passed,
            "engine": records, "oracle": oracle_records}


# --- scan ----------------------------------------------------------------------------

def scan_points(sections) -> list[dict[str, dict[str, str]]]:
    """Cartesian grid of section overrides from ``[scan] section.key = v1; v2``."""
    grid = sections.get("scan", {})
    base = {k: v for k, v in sections.items() if k != "scan"}
    keys, values = [], []
    for dotted, raw in grid.items():
        sec, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"scan key {dotted!r} must be section.key")
        vals = [v.strip() for v in raw.split(";") if v.strip()]
        if not vals:
            raise ConfigError(f"scan key {dotted!r} has no values")
        keys.append((sec, key))
        values.append(vals)
    points = []
    for combo in itertools.product(*values):
        pt = {k: dict(v) for k, v in base.items()}
        for (sec, key), val in zip(keys, combo):
            pt.setdefault(sec, {})[key] = val
        label = ",".join(f"{s}.{k}={v}" for (s, k), v in zip(keys, combo))
        name = pt.get("run", {}).get("name", "scan")
        pt.setdefault("run", {})["name"] = f"{name}-{len(points):03d}"
        points.append({"sections": pt, "label": label})
    return points


def _scan_worker(point, out_dir):
    label = point.get("label", "")
    try:
        config = config_from_sections(point["sections"])
        path = run(config, out_dir)
        _, table = read_series(path)
        return {"label": label, "name": config.name, "status": "ok", **summarize_table(table, config)}
    except FockCheckFailure as exc:
        config = config_from_sections(point["sections"])
        _, table = read_series(Path(out_dir) / f"{config.name}.csv")
        return {"label": label, "name": config.name, "status": f"fock: {exc}", **summarize_table(table, config)}
    except Exception as exc:  # isolate per-point failures
        return {"label": label, "name": point["sections"].get("run", {}).get("name", "?"),
                "status": f"error: {type(exc).__name__}: {exc}"}


SUMMARY_COLUMNS = ("name", "label", "status", "n_revivals", "delta_tau_ns", "g2_min", "final_trace_drift",
                   "max_trunc_err")


def scan(sections, out_dir, workers: int = 1) -> tuple[Path, list[dict]]:
    """Run every grid point (in a process pool when ``workers > 1``) and write ``scan_summary.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = scan_points(sections)
    if workers <= 1 or len(points) == 1:
        rows = [_scan_worker(p, out_dir) for p in points]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_scan_worker, p, out_dir) for p in points]
            rows = []
            for p, fut in zip(points, futures):
                try:
                    rows.append(fut.result())
                except Exception as exc:  # worker died
                    rows.append({"label": p["label"], "name": p["sections"]["run"]["name"],
                                 "status": f"error: {type(exc).__name__}: {exc}"})
    path = out_dir / "scan_summary.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in SUMMARY_COLUMNS})
    return path, rows


# --- entry point ----------------------------------------------------------------------

def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(ENV_OUT) or ".")


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get(ENV_WORKERS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS}={env!r} is not an integer") from None
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mesocavity", description="Spin-ensemble cavity QED sweeps.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
        sp.add_argument("--out", help=f"output directory (env {ENV_OUT})")

    r = sub.add_parser("run", help="evolve one configuration")
    common(r)
    r.add_argument("--checkpoint-every", type=int, default=0, metavar="STEPS")
    v = sub.add_parser("validate", help="compare the engine against the exact oracle")
    common(v)
    s = sub.add_parser("scan", help="run a parameter grid")
    common(s)
    s.add_argument("--workers", type=int, default=None, help=f"process count (env {ENV_WORKERS})")
    s.add_argument("--checkpoint-every", type=int, default=0, metavar="STEPS")
    rs = sub.add_parser("resume", help="continue from a checkpoint")
    rs.add_argument("checkpoint")
    rs.add_argument("--out")
    rs.add_argument("--checkpoint-every", type=int, default=0, metavar="STEPS")
    for sp in (r, v, rs):
        sp.add_argument("--workers", type=int, default=None, help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    err = sys.stderr
    try:
        if args.command == "run":
            config = load_config(args.config, args.preset)
            path = run(config, _out_dir(args), checkpoint_every=args.checkpoint_every)
            print(path)
        elif args.command == "resume":
            out = args.out or os.environ.get(ENV_OUT)
            print(resume(args.checkpoint, out, checkpoint_every=args.checkpoint_every))
        elif args.command == "validate":
            config = load_config(args.config, args.preset)
            res = validate(config)
            for f, d in res["deviation"].items():
                print(f"{f:28s} max|dev| = {d:.3e}")
            print(f"tolerance {res['tolerance']:.1e}: {'PASS' if res['passed'] else 'FAIL'}")
            return EXIT_OK if res["passed"] else EXIT_VALIDATION_FAILED
        elif args.command == "scan":
            sections = load_sections(args.config, args.preset)
            path, rows = scan(sections, _out_dir(args), _workers(args))
            for r in rows:
                print(f"{r['name']:24s} {r['status'][:40]:40s} {r.get('delta_tau_ns', '')}")
            print(path)
    except (ConfigError, InvalidSpecError) as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    except TruncationAbort as exc:
        print(f"truncation abort: {exc}", file=err)
        return EXIT_TRUNCATION
    except FockCheckFailure as exc:
        print(f"Fock check failed: {exc}", file=err)
        return EXIT_FOCK
    except DimensionCapError as exc:
        print(f"oracle dimension cap: {exc}", file=err)
        return EXIT_ORACLE_CAP
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
