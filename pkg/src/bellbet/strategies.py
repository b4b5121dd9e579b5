"""Local hidden-variable strategies and the station/source interface.

A strategy plays three roles in the protocol diagram A -> X <- O -> Y <- B:
the source O (which emits one hidden message per trial *before* that trial's
settings are revealed anywhere), and the two stations X and Y. Locality is
structural: ``station_respond`` receives only the station's own setting, the
source message and the station's own memory, so there is no channel through
which one wing can read the other wing's setting or outcome. Between trials
the referee broadcasts the completed trial (plus optional opaque blobs), and
stations fold it into their memory.

Built-in roster: constant, independent-coin, classical-polarizer,
deterministic-optimal, adaptive-frequency-tracker, plus the two deliberately
ill-behaved ones used by validation tests: nonlocal-cheater (only
constructible when enforcement is explicitly disabled) and range-violator
(emits reals in [-sqrt(2*pi), sqrt(2*pi)] instead of bits).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Any, ClassVar, Mapping, Sequence

import numpy as np

from .core import (
    AngleConfig,
    JointBitDistribution,
    TrialRecord,
    bell_inequality_slack,
)
from .rng import ROLE_LEFT, ROLE_RIGHT, ROLE_SOURCE, TrialUniforms

LEFT = "left"
RIGHT = "right"
SIDES = (LEFT, RIGHT)

LOCAL = "local"
NONLOCAL_CHEATER = "nonlocal-cheater"
RANGE_VIOLATING = "range-violating"

# Outcome-range flaw: the broken model's raw outputs live in this interval.
OUTCOME_RANGE_HALF_WIDTH = math.sqrt(2.0 * math.pi)


class StrategyError(ValueError):
    """Strategy construction or usage violates the protocol rules."""


@dataclass(frozen=True)
class SourceMessage:
    """The hidden variable: one opaque payload, identical copy to both wings."""

    payload: bytes


@dataclass(frozen=True)
class StationMemory:
    """Base per-station state, updated only at trial boundaries.

    ``next_trial`` is the 1-based index of the upcoming trial; strategies use
    it to index their per-trial draw buffers, which keeps responses pure
    functions of (own setting, message, memory).
    """

    next_trial: int = 1


@dataclass(frozen=True)
class StrategyDescriptor:
    name: str
    locality_class: str
    seed: int


@dataclass(frozen=True)
class TrialView:
    """What one station learns about a completed trial at the boundary.

    In cloned-source and batch modes the other wing's setting and outcome are
    withheld (fields are None) and no side-channel blobs are relayed.
    """

    m: int
    own_setting: int
    own_outcome: int
    other_setting: int | None = None
    other_outcome: int | None = None
    blobs: Mapping[str, bytes] = field(default_factory=dict)


def _assignment_bits(k: int) -> tuple[int, int, int, int]:
    """Deterministic assignment k in 0..15 -> (x1, x2, y1, y2) bits."""
    return (k >> 3) & 1, (k >> 2) & 1, (k >> 1) & 1, k & 1


def _assignment_value_matrix() -> np.ndarray:
    """values[k, cell] = statistic increment when cell is drawn and both
    stations answer per deterministic assignment k (cell codes 11,12,21,22)."""
    values = np.zeros((16, 4), dtype=np.int64)
    for k in range(16):
        x1, x2, y1, y2 = _assignment_bits(k)
        x = (x1, x2)
        y = (y1, y2)
        for cell in range(4):
            i, j = cell >> 1, cell & 1
            if x[i] == y[j]:
                values[k, cell] = 1 if cell == 1 else -1
    return values


ASSIGNMENT_VALUES = _assignment_value_matrix()
ASSIGNMENT_VALUES.flags.writeable = False


def best_deterministic_assignment() -> int:
    """Index of the slack-maximizing deterministic assignment (first of the
    maximizers in enumeration order; the maximum slack is exactly 0)."""
    best_k, best_slack = 0, -math.inf
    for k in range(16):
        slack = bell_inequality_slack(JointBitDistribution.point_mass(*_assignment_bits(k)))
        if slack > best_slack:
            best_k, best_slack = k, slack
    return best_k


def angular_distance(a, b):
    """Distance between orientations modulo pi, in [0, pi/2].

    Uses numpy ufuncs so scalar and array callers share bitwise behavior.
    """
    d = np.abs(a - b) % np.pi
    return np.minimum(d, np.pi - d)


class Strategy:
    """Base class for local hidden-variable strategies.

    Lifecycle: construct with parameters, then ``prepare(...)`` binds the
    experiment context (seed, n, angles, mode) and derives the per-role draw
    buffers. All responses are deterministic given the seed and the history,
    which makes runs reproducible and stations cloneable: evaluating both
    settings on identical (message, memory) is well defined.
    """

    name: ClassVar[str] = ""
    locality_class: ClassVar[str] = LOCAL

    def __init__(self) -> None:
        self.seed: int | None = None
        self.n = 0
        self.angles: AngleConfig | None = None
        self.mode = "sequential"

    def prepare(self, *, seed: int, n: int, angles: AngleConfig, mode: str) -> None:
        self.seed = seed
        self.n = n
        self.angles = angles
        self.mode = mode

    def _require_prepared(self) -> None:
        if self.seed is None:
            raise StrategyError(f"strategy {self.name!r} used before prepare()")

    def descriptor(self) -> StrategyDescriptor:
        self._require_prepared()
        return StrategyDescriptor(name=self.name, locality_class=self.locality_class, seed=self.seed)

    # --- source role ---------------------------------------------------

    def source_emit(self, m: int, history: Sequence[TrialRecord]) -> SourceMessage:
        """Hidden message for trial m. ``history`` holds all committed trials
        in sequential mode and is empty in cloned-source and batch modes."""
        return SourceMessage(b"")

    # --- station role --------------------------------------------------

    def initial_memory(self, side: str) -> StationMemory:
        return StationMemory()

    def station_respond(
        self, side: str, setting_index: int, message: SourceMessage, memory: StationMemory
    ):
        """This station's raw outcome for the current trial.

        Honest strategies return a bit; the referee validates whatever comes
        back. The signature is the locality guarantee: the other wing's
        setting and outcome are not parameters.
        """
        raise NotImplementedError

    def update_memory(self, side: str, memory: StationMemory, view: TrialView) -> StationMemory:
        """Fold the completed trial into this station's memory."""
        return replace(memory, next_trial=memory.next_trial + 1)

    def receive_batch_settings(
        self, side: str, settings: Sequence[int], memory: StationMemory
    ) -> StationMemory:
        """Batch mode only: the station's full setting sequence, up front."""
        return memory

    def boundary_blob(self, side: str, m: int) -> bytes:
        """Opaque side-channel payload exchanged (via the referee) at the
        trial boundary. Built-ins send nothing."""
        return b""


class ConstantStrategy(Strategy):
    """Both stations always answer the same fixed bit ("always pass")."""

    name = "constant"

    def __init__(self, bit: int = 1):
        super().__init__()
        if bit not in (0, 1):
            raise StrategyError(f"constant bit must be 0 or 1, got {bit!r}")
        self.bit = bit

    def station_respond(self, side, setting_index, message, memory):
        return self.bit


class IndependentCoinStrategy(Strategy):
    """Each station answers an independent fair coin each trial."""

    name = "independent-coin"

    def prepare(self, *, seed, n, angles, mode):
        super().prepare(seed=seed, n=n, angles=angles, mode=mode)
        self._coins = {
            LEFT: TrialUniforms(seed, ROLE_LEFT, n),
            RIGHT: TrialUniforms(seed, ROLE_RIGHT, n),
        }

    def station_respond(self, side, setting_index, message, memory):
        self._require_prepared()
        return int(self._coins[side].at(memory.next_trial) < 0.5)


class ClassicalPolarizerStrategy(Strategy):
    """Shared polarization angle plus a threshold polarizer at each wing.

    The source draws theta uniform on [0, pi) and sends it to both stations;
    a station passes (answers 1) iff its analyzer lies within pi/4 of theta,
    distance taken modulo pi. Coincidence probability between analyzers at
    distance d is 1 - 2d/pi (the classical triangle law).
    """

    name = "classical-polarizer"

    def prepare(self, *, seed, n, angles, mode):
        super().prepare(seed=seed, n=n, angles=angles, mode=mode)
        self._polarizations = TrialUniforms(seed, ROLE_SOURCE, n)

    def source_emit(self, m, history):
        self._require_prepared()
        theta = math.pi * self._polarizations.at(m)
        return SourceMessage(struct.pack("<d", theta))

    def station_respond(self, side, setting_index, message, memory):
        self._require_prepared()
        theta = struct.unpack("<d", message.payload)[0]
        analyzer = (
            self.angles.left(setting_index) if side == LEFT else self.angles.right(setting_index)
        )
        return int(angular_distance(theta, analyzer) < math.pi / 4.0)


class DeterministicOptimalStrategy(Strategy):
    """Fixed deterministic assignment maximizing the CHSH slack.

    Found by enumerating all 16 point masses; the maximum slack is exactly
    0, so this strategy has zero drift, the best any local model can do.
    """

    name = "deterministic-optimal"

    def __init__(self):
        super().__init__()
        self.assignment = best_deterministic_assignment()

    def source_emit(self, m, history):
        return SourceMessage(bytes([self.assignment]))

    def station_respond(self, side, setting_index, message, memory):
        x1, x2, y1, y2 = _assignment_bits(message.payload[0])
        if side == LEFT:
            return x1 if setting_index == 1 else x2
        return y1 if setting_index == 1 else y2


@dataclass(frozen=True)
class FrequencyMemory(StationMemory):
    """Running joint-setting counts in cell-code order (11, 12, 21, 22).

    Cloned/batch views lack the other wing's setting; then only own-side
    marginal counts accumulate.
    """

    cell_counts: tuple[int, int, int, int] = (0, 0, 0, 0)
    own_counts: tuple[int, int] = (0, 0)


class AdaptiveFrequencyTracker(Strategy):
    """Re-picks the deterministic assignment before every trial.

    The source scores each of the 16 assignments by the integer sum over
    cells of (times that cell was drawn so far) * (assignment's statistic
    increment in that cell) and plays an argmax, so it chases whichever
    zero-slack assignment best fits the observed setting imbalance. Integer
    scores keep the rule exactly reproducible across implementations.
    """

    name = "adaptive-frequency-tracker"

    def __init__(self):
        super().__init__()
        self._cached_counts = np.zeros(4, dtype=np.int64)
        self._cached_trials = 0

    def prepare(self, *, seed, n, angles, mode):
        super().prepare(seed=seed, n=n, angles=angles, mode=mode)
        self._cached_counts = np.zeros(4, dtype=np.int64)
        self._cached_trials = 0

    def _history_cell_counts(self, history: Sequence[TrialRecord]) -> np.ndarray:
        if len(history) == self._cached_trials + 1:
            self._cached_counts[history[-1].setting.cell] += 1
            self._cached_trials += 1
        elif len(history) != self._cached_trials:
            counts = np.zeros(4, dtype=np.int64)
            for rec in history:
                counts[rec.setting.cell] += 1
            self._cached_counts = counts
            self._cached_trials = len(history)
        return self._cached_counts

    def choose_assignment(self, cell_counts: np.ndarray) -> int:
        scores = cell_counts @ ASSIGNMENT_VALUES.T
        return int(np.argmax(scores))

    def source_emit(self, m, history):
        counts = self._history_cell_counts(history)
        return SourceMessage(bytes([self.choose_assignment(counts)]))

    def initial_memory(self, side):
        return FrequencyMemory()

    def station_respond(self, side, setting_index, message, memory):
        x1, x2, y1, y2 = _assignment_bits(message.payload[0])
        if side == LEFT:
            return x1 if setting_index == 1 else x2
        return y1 if setting_index == 1 else y2

    def update_memory(self, side, memory, view):
        own = list(memory.own_counts)
        own[view.own_setting - 1] += 1
        cells = list(memory.cell_counts)
        if view.other_setting is not None:
            if side == LEFT:
                cell = 2 * (view.own_setting - 1) + (view.other_setting - 1)
            else:
                cell = 2 * (view.other_setting - 1) + (view.own_setting - 1)
            cells[cell] += 1
        return FrequencyMemory(
            next_trial=memory.next_trial + 1,
            cell_counts=tuple(cells),
            own_counts=tuple(own),
        )


class NonlocalCheaterStrategy(Strategy):
    """Coordinates on the full joint setting, which no local model can see.

    Coincides in cell (1,2) and anti-coincides elsewhere, attaining the
    nonlocal maximum E[S_n] = n/4. Only runnable when the referee explicitly
    disables locality enforcement; ``station_respond`` always fails.
    """

    name = "nonlocal-cheater"
    locality_class = NONLOCAL_CHEATER

    def station_respond(self, side, setting_index, message, memory):
        raise StrategyError("nonlocal-cheater has no local response; it needs both settings")

    def respond_nonlocal(self, side: str, i: int, j: int) -> int:
        if (i, j) == (1, 2):
            return 0
        return 0 if side == LEFT else 1


class RangeViolatorStrategy(Strategy):
    """Emits reals in [-sqrt(2*pi), sqrt(2*pi)] instead of bits.

    Models the outcome-range flaw the referee's validator exists to catch;
    any run aborts at the first validated outcome.
    """

    name = "range-violator"
    locality_class = RANGE_VIOLATING

    def prepare(self, *, seed, n, angles, mode):
        super().prepare(seed=seed, n=n, angles=angles, mode=mode)
        self._values = {
            LEFT: TrialUniforms(seed, ROLE_LEFT, n),
            RIGHT: TrialUniforms(seed, ROLE_RIGHT, n),
        }

    def station_respond(self, side, setting_index, message, memory):
        self._require_prepared()
        u = self._values[side].at(memory.next_trial)
        return OUTCOME_RANGE_HALF_WIDTH * (2.0 * u - 1.0)


STRATEGY_REGISTRY: dict[str, type[Strategy]] = {
    cls.name: cls
    for cls in (
        ConstantStrategy,
        IndependentCoinStrategy,
        ClassicalPolarizerStrategy,
        DeterministicOptimalStrategy,
        AdaptiveFrequencyTracker,
        NonlocalCheaterStrategy,
        RangeViolatorStrategy,
    )
}

# Honest strategies: the roster the supermartingale guarantees cover.
LOCAL_STRATEGY_NAMES = tuple(
    name for name, cls in STRATEGY_REGISTRY.items() if cls.locality_class == LOCAL
)


def build_strategy(
    name: str, params: Mapping[str, Any] | None = None, *, allow_nonlocal: bool = False
) -> Strategy:
    """Instantiate a registered strategy by name.

    The nonlocal cheater is refused unless ``allow_nonlocal`` is set: in the
    default mode it must be impossible to even construct a participant the
    engine cannot run locally.
    """
    cls = STRATEGY_REGISTRY.get(name)
    if cls is None:
        raise StrategyError(f"unknown strategy {name!r}; known: {sorted(STRATEGY_REGISTRY)}")
    if cls.locality_class == NONLOCAL_CHEATER and not allow_nonlocal:
        raise StrategyError(
            "nonlocal-cheater requires a referee with enforcement explicitly disabled"
        )
    return cls(**dict(params or {}))
