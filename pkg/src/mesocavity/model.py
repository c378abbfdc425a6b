"""Physical description of a spin ensemble inside a single-mode driven cavity.

All frequencies and rates are angular frequencies in rad/s, times are in
seconds.  Spins are two-level systems with basis index 0 = ground and
1 = excited; the cavity is truncated to ``fock_dim`` Fock levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi


class InvalidSpecError(ValueError):
    """Raised when physical parameters violate a model invariant."""


def mhz(value: float) -> float:
    """Convert an ordinary frequency in MHz (value/2pi) to rad/s."""
    return float(value) * TWO_PI * 1e6


def to_mhz(omega: float) -> float:
    """Inverse of :func:`mhz`."""
    return float(omega) / (TWO_PI * 1e6)


@dataclass(frozen=True)
class SpinSpec:
    frequency: float
    coupling: float
    decay: float = 0.0

    def __post_init__(self):
        if self.coupling < 0:
            raise InvalidSpecError(f"spin coupling must be >= 0, got {self.coupling}")
        if self.decay < 0:
            raise InvalidSpecError(f"spin decay must be >= 0, got {self.decay}")

    @property
    def key(self) -> tuple[float, float, float]:
        return (self.frequency, self.coupling, self.decay)


@dataclass(frozen=True)
class CavitySpec:
    frequency: float
    decay: float
    fock_dim: int = 16

    def __post_init__(self):
        if int(self.fock_dim) != self.fock_dim or self.fock_dim < 2:
            raise InvalidSpecError(f"fock_dim must be an integer >= 2, got {self.fock_dim}")
        if self.decay < 0:
            raise InvalidSpecError(f"cavity decay must be >= 0, got {self.decay}")


@dataclass(frozen=True)
class DriveSchedule:
    """Rectangular coherent drive: ``amplitude`` for 0 <= t <= pulse_end, zero after."""

    amplitude: float = 0.0
    drive_frequency: float = 0.0
    pulse_end: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise InvalidSpecError(f"drive amplitude must be real and >= 0, got {self.amplitude}")
        if self.pulse_end < 0:
            raise InvalidSpecError(f"pulse_end must be >= 0, got {self.pulse_end}")

    def amplitude_at(self, t: float) -> float:
        return self.amplitude if 0.0 <= t <= self.pulse_end else 0.0

    def is_on(self, t: float) -> bool:
        """Drive state on the half-open interval starting at ``t``."""
        return self.amplitude > 0.0 and 0.0 <= t < self.pulse_end


@dataclass(frozen=True)
class CombSpec:
    teeth: int
    spacing: float
    central_coupling: float
    envelope_width: float
    spins_per_tooth: int = 1

    def __post_init__(self):
        if self.teeth < 1 or self.teeth % 2 == 0:
            raise InvalidSpecError(f"number of comb teeth must be odd and positive, got {self.teeth}")
        if self.spins_per_tooth < 1:
            raise InvalidSpecError(f"spins_per_tooth must be positive, got {self.spins_per_tooth}")
        if self.envelope_width == 0:
            raise InvalidSpecError("envelope_width must be nonzero")
        if self.central_coupling < 0:
            raise InvalidSpecError("central_coupling must be >= 0")

    @property
    def n_spins(self) -> int:
        return self.teeth * self.spins_per_tooth

    def tooth_indices(self) -> np.ndarray:
        half = (self.teeth - 1) // 2
        return np.arange(-half, half + 1)

    def tooth_couplings(self) -> np.ndarray:
        """Collective coupling of each tooth, Gaussian in the detuning from the cavity."""
        detuning = self.tooth_indices() * self.spacing
        return self.central_coupling * np.exp(-(detuning**2) / (2.0 * self.envelope_width**2))


@dataclass(frozen=True)
class EnsembleSpec:
    spins: tuple[SpinSpec, ...]
    cavity: CavitySpec
    drive: DriveSchedule = field(default_factory=DriveSchedule)

    def __post_init__(self):
        object.__setattr__(self, "spins", tuple(self.spins))

    @property
    def n_spins(self) -> int:
        return len(self.spins)

    @property
    def fock_dim(self) -> int:
        return self.cavity.fock_dim

    def frequencies(self) -> np.ndarray:
        return np.array([s.frequency for s in self.spins], dtype=float)

    def couplings(self) -> np.ndarray:
        return np.array([s.coupling for s in self.spins], dtype=float)

    def decays(self) -> np.ndarray:
        return np.array([s.decay for s in self.spins], dtype=float)

    def hilbert_dim(self) -> int:
        return 2**self.n_spins * self.fock_dim

    def permuted(self, order) -> "EnsembleSpec":
        """Same physics with the spin list reordered."""
        return replace(self, spins=tuple(self.spins[i] for i in order))

    def with_drive(self, drive: DriveSchedule) -> "EnsembleSpec":
        return replace(self, drive=drive)


def homogeneous(n_spins: int, coupling: float, cavity: CavitySpec, *, frequency: float = 0.0,
                decay: float = 0.0, drive: DriveSchedule | None = None) -> EnsembleSpec:
    """Ensemble of identical spins."""
    spin = SpinSpec(frequency, coupling, decay)
    return EnsembleSpec((spin,) * n_spins, cavity, drive or DriveSchedule())


def build_comb(comb: CombSpec, cavity: CavitySpec, drive: DriveSchedule, spin_decay: float) -> EnsembleSpec:
    """Spin ensemble whose transition frequencies form a spectral frequency comb.

    Tooth ``j`` sits at ``cavity.frequency + j * spacing`` and carries a collective
    coupling ``Omega_j`` from a Gaussian envelope of width ``envelope_width``; each of
    its ``spins_per_tooth`` spins couples with ``Omega_j / sqrt(spins_per_tooth)``.
    Spins are listed tooth by tooth from the most negative detuning upward.
    """
    tooth_g = comb.tooth_couplings() / math.sqrt(comb.spins_per_tooth)
    spins = []
    for j, g in zip(comb.tooth_indices(), tooth_g):
        spin = SpinSpec(cavity.frequency + j * comb.spacing, float(g), spin_decay)
        spins.extend([spin] * comb.spins_per_tooth)
    return EnsembleSpec(tuple(spins), cavity, drive)


def comb_tooth_labels(comb: CombSpec) -> np.ndarray:
    """Tooth index ``j`` of every spin produced by :func:`build_comb`."""
    return np.repeat(comb.tooth_indices(), comb.spins_per_tooth)


def to_rotating_frame(spec: EnsembleSpec) -> EnsembleSpec:
    """Move to the frame rotating at the drive frequency.

    Spin and cavity frequencies become detunings from ``drive_frequency`` and the
    drive phase factors disappear, leaving a piecewise time-independent generator.
    """
    wp = spec.drive.drive_frequency
    if wp == 0.0:
        return spec
    spins = tuple(replace(s, frequency=s.frequency - wp) for s in spec.spins)
    cavity = replace(spec.cavity, frequency=spec.cavity.frequency - wp)
    drive = replace(spec.drive, drive_frequency=0.0)
    return EnsembleSpec(spins, cavity, drive)


def collective_coupling(spec: EnsembleSpec) -> float:
    """Collective coupling sqrt(sum_k g_k^2) of the whole ensemble."""
    return float(math.sqrt(math.fsum(s.coupling**2 for s in spec.spins)))
