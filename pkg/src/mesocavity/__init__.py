"""Open dynamics of mesoscopic spin ensembles coupled to a driven cavity.

The package is organised bottom-up:

- :mod:`mesocavity.model`        physical parameters, frequency combs, rotating frame
- :mod:`mesocavity.superop`      vectorisation algebra and Liouvillian assembly
- :mod:`mesocavity.exact`        brute-force master-equation oracle for small ensembles
- :mod:`mesocavity.trotter`      cached pair propagators and the symmetric splitting
- :mod:`mesocavity.engine`       renormalised sweep evolution in superoperator space
- :mod:`mesocavity.observables`  cavity moments, g_n, spin excitations, collective J
- :mod:`mesocavity.cli`          config files, presets, run/validate/scan/resume
"""

from .model import (
    CavitySpec,
    CombSpec,
    DriveSchedule,
    EnsembleSpec,
    InvalidSpecError,
    SpinSpec,
    build_comb,
    collective_coupling,
    homogeneous,
    mhz,
    to_mhz,
    to_rotating_frame,
)
from .trotter import PropagatorCache
from .engine import SweepState, TruncationAbort, evolve, init_state, step
from .observables import ObservableRecord, measure

__version__ = "0.1.0"

__all__ = [
    "CavitySpec",
    "CombSpec",
    "DriveSchedule",
    "EnsembleSpec",
    "InvalidSpecError",
    "ObservableRecord",
    "PropagatorCache",
    "SpinSpec",
    "SweepState",
    "TruncationAbort",
    "build_comb",
    "collective_coupling",
    "evolve",
    "homogeneous",
    "init_state",
    "measure",
    "mhz",
    "step",
    "to_mhz",
    "to_rotating_frame",
]
