"""Domain types and pure mathematics of the CHSH coincidence statistic.

Everything here is deterministic and side-effect free: angle configurations,
settings, trial records, coincidence counts, joint bit distributions, the
deterministic CHSH implication, the cos^2 coincidence law, and the per-trial
expectation of the statistic N12 - N11 - N21 - N22.

Conventions:
  * photon convention throughout: analyzer orientations live modulo pi;
  * outcomes are bits, 1 = "passes the filter";
  * the statistic is signed so that positive values favor the quantum side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

# Tolerance for probability normalization checks.
NORMALIZATION_TOL = 1e-12

# Per-trial ceiling on the expected statistic under quantum mechanics
# (Cirel'son bound in this four-coincidence formulation): (sqrt(2)-1)/4.
QUANTUM_CEILING = (math.sqrt(2.0) - 1.0) / 4.0

# Cell codes: 2*(i-1) + (j-1), i.e. (1,1)->0, (1,2)->1, (2,1)->2, (2,2)->3.
PRIVILEGED_CELL = 1


class InvalidDistributionError(ValueError):
    """A joint bit distribution fails non-negativity or normalization."""


@dataclass(frozen=True)
class AngleConfig:
    """The four analyzer orientations, in radians (photon convention).

    alpha1/alpha2 are the left station's two orientations, beta1/beta2 the
    right station's. Differences are meaningful modulo pi.
    """

    alpha1: float
    alpha2: float
    beta1: float
    beta2: float

    def __post_init__(self) -> None:
        for name in ("alpha1", "alpha2", "beta1", "beta2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"angle {name} must be finite, got {value!r}")

    def left(self, index: int) -> float:
        """Left-station orientation for setting index 1 or 2."""
        if index == 1:
            return self.alpha1
        if index == 2:
            return self.alpha2
        raise ValueError(f"setting index must be 1 or 2, got {index}")

    def right(self, index: int) -> float:
        """Right-station orientation for setting index 1 or 2."""
        if index == 1:
            return self.beta1
        if index == 2:
            return self.beta2
        raise ValueError(f"setting index must be 1 or 2, got {index}")

    def difference(self, i: int, j: int) -> float:
        """Orientation difference alpha_i - beta_j for cell (i, j)."""
        return self.left(i) - self.right(j)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha1, self.alpha2, self.beta1, self.beta2)


# The two canonical angle sets. PI_THIRD_ANGLES gives per-trial mean 1/16;
# OPTIMAL_ANGLES attains the quantum ceiling (sqrt(2)-1)/4.
PI_THIRD_ANGLES = AngleConfig(0.0, math.pi / 3.0, -math.pi / 3.0, 0.0)
OPTIMAL_ANGLES = AngleConfig(math.pi / 8.0, 3.0 * math.pi / 8.0, -math.pi / 4.0, 0.0)


@dataclass(frozen=True)
class Setting:
    """One trial's joint setting: i for the left wing, j for the right."""

    i: int
    j: int

    def __post_init__(self) -> None:
        if self.i not in (1, 2) or self.j not in (1, 2):
            raise ValueError(f"setting indices must be in {{1,2}}, got ({self.i},{self.j})")

    @property
    def cell(self) -> int:
        """Cell code in 0..3: 2*(i-1) + (j-1)."""
        return 2 * (self.i - 1) + (self.j - 1)

    @property
    def privileged(self) -> bool:
        """True for cell (1,2), the one whose coincidences count positively."""
        return self.cell == PRIVILEGED_CELL

    @classmethod
    def from_cell(cls, cell: int) -> "Setting":
        if not 0 <= cell <= 3:
            raise ValueError(f"cell code must be in 0..3, got {cell}")
        return cls(i=(cell >> 1) + 1, j=(cell & 1) + 1)


@dataclass(frozen=True)
class TrialRecord:
    """One committed trial: settings and both validated outcome bits."""

    m: int
    setting: Setting
    x: int
    y: int

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"trial index must be >= 1, got {self.m}")
        if self.x not in (0, 1) or self.y not in (0, 1):
            raise ValueError(f"outcomes must be bits, got x={self.x!r}, y={self.y!r}")

    @property
    def coincided(self) -> bool:
        return self.x == self.y

    @property
    def delta(self) -> int:
        """Per-trial statistic increment: +1 for a coincidence in cell (1,2),
        -1 for a coincidence in any other cell, 0 otherwise."""
        if not self.coincided:
            return 0
        return 1 if self.setting.privileged else -1


@dataclass(frozen=True)
class CountMatrix:
    """Per-cell trial counts n_ij and coincidence counts N_ij.

    Both are 2x2 nested tuples indexed [i-1][j-1].
    """

    trials: tuple[tuple[int, int], tuple[int, int]]
    coincidences: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self) -> None:
        for i in (1, 2):
            for j in (1, 2):
                n = self.trials[i - 1][j - 1]
                c = self.coincidences[i - 1][j - 1]
                if not 0 <= c <= n:
                    raise ValueError(
                        f"cell ({i},{j}) needs 0 <= coincidences <= trials, got {c}/{n}"
                    )

    def trial_count(self, i: int, j: int) -> int:
        return self.trials[i - 1][j - 1]

    def coincidence_count(self, i: int, j: int) -> int:
        return self.coincidences[i - 1][j - 1]

    @property
    def total_trials(self) -> int:
        return sum(self.trials[a][b] for a in (0, 1) for b in (0, 1))

    @classmethod
    def from_records(cls, records: "Iterator[TrialRecord] | list[TrialRecord]") -> "CountMatrix":
        n = [[0, 0], [0, 0]]
        c = [[0, 0], [0, 0]]
        for rec in records:
            a, b = rec.setting.i - 1, rec.setting.j - 1
            n[a][b] += 1
            if rec.coincided:
                c[a][b] += 1
        return cls(
            trials=((n[0][0], n[0][1]), (n[1][0], n[1][1])),
            coincidences=((c[0][0], c[0][1]), (c[1][0], c[1][1])),
        )

    @classmethod
    def from_cell_counts(
        cls, trials: tuple[int, int, int, int], coincidences: tuple[int, int, int, int]
    ) -> "CountMatrix":
        """Build from flat per-cell tuples in cell-code order (11, 12, 21, 22)."""
        n, c = trials, coincidences
        return cls(trials=((n[0], n[1]), (n[2], n[3])), coincidences=((c[0], c[1]), (c[2], c[3])))

    def symmetric_slacks(self) -> dict[str, int]:
        """Each cell's count minus the sum of the other three.

        Under local realism all four are <= 0 up to noise; only the (1,2)
        slack is adjudicated, the rest are diagnostics.
        """
        flat = {
            "N11": self.coincidence_count(1, 1),
            "N12": self.coincidence_count(1, 2),
            "N21": self.coincidence_count(2, 1),
            "N22": self.coincidence_count(2, 2),
        }
        total = sum(flat.values())
        return {name: 2 * value - total for name, value in flat.items()}


@dataclass(frozen=True)
class JointBitDistribution:
    """Joint law of four 0/1 variables (X1, X2, Y1, Y2).

    ``p`` has shape (2,2,2,2), indexed [x1][x2][y1][y2]; entries are
    non-negative and sum to 1 within NORMALIZATION_TOL.
    """

    p: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.p, dtype=float)
        if arr.shape != (2, 2, 2, 2):
            raise InvalidDistributionError(f"expected shape (2,2,2,2), got {arr.shape}")
        if np.any(arr < -NORMALIZATION_TOL):
            raise InvalidDistributionError("negative probability entries")
        if abs(float(arr.sum()) - 1.0) > NORMALIZATION_TOL:
            raise InvalidDistributionError(f"probabilities sum to {arr.sum()!r}, not 1")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "p", arr)

    @classmethod
    def point_mass(cls, x1: int, x2: int, y1: int, y2: int) -> "JointBitDistribution":
        arr = np.zeros((2, 2, 2, 2))
        arr[x1, x2, y1, y2] = 1.0
        return cls(arr)

    @classmethod
    def uniform(cls) -> "JointBitDistribution":
        return cls(np.full((2, 2, 2, 2), 1.0 / 16.0))

    def probability_equal(self, left_index: int, right_index: int) -> float:
        """P{X_a = Y_b} for a = left_index, b = right_index (each 1 or 2)."""
        if left_index not in (1, 2) or right_index not in (1, 2):
            raise ValueError("variable indices must be 1 or 2")
        x_axis = left_index - 1          # axis 0 or 1
        y_axis = 2 + (right_index - 1)   # axis 2 or 3
        total = 0.0
        for idx in np.ndindex(2, 2, 2, 2):
            if idx[x_axis] == idx[y_axis]:
                total += float(self.p[idx])
        return total


def deterministic_implication_holds(x1: int, x2: int, y1: int, y2: int) -> bool:
    """Check x1=y2 => (x1=y1 or x2=y1 or x2=y2) for one bit assignment.

    This is the deterministic core of the CHSH inequality; it holds for all
    16 assignments (following the chain x1!=y1, y1!=x2, x2!=y2 forces y2!=x1).
    """
    for name, value in (("x1", x1), ("x2", x2), ("y1", y1), ("y2", y2)):
        if value not in (0, 1):
            raise ValueError(f"{name} must be a bit, got {value!r}")
    return (x1 != y2) or (x1 == y1) or (x2 == y1) or (x2 == y2)


def bell_inequality_slack(dist: JointBitDistribution) -> float:
    """P{X1=Y2} - P{X1=Y1} - P{X2=Y1} - P{X2=Y2}; <= 0 for every joint law."""
    total = float(np.asarray(dist.p).sum())
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise InvalidDistributionError(f"probabilities sum to {total!r}, not 1")
    return (
        dist.probability_equal(1, 2)
        - dist.probability_equal(1, 1)
        - dist.probability_equal(2, 1)
        - dist.probability_equal(2, 2)
    )


def coincidence_probability(delta: float) -> float:
    """Coincidence law for equally polarized photons: cos^2(delta).

    Periodic with period pi, even, and in [0, 1].
    """
    if not math.isfinite(delta):
        raise ValueError(f"angle difference must be finite, got {delta!r}")
    return math.cos(delta) ** 2


def spin_half_coincidence_probability(delta: float) -> float:
    """Coincidence law for an anti-correlated spin-half pair: sin^2(delta/2).

    Period 2*pi; used to check the photon-to-spin angle translation.
    """
    if not math.isfinite(delta):
        raise ValueError(f"angle difference must be finite, got {delta!r}")
    return math.sin(delta / 2.0) ** 2


def _expected_statistic(a1, a2, b1, b2):
    """Per-trial mean of the statistic under the cos^2 law with uniform
    settings. Broadcasts over numpy arrays."""
    return 0.25 * (
        np.cos(a1 - b2) ** 2
        - np.cos(a1 - b1) ** 2
        - np.cos(a2 - b1) ** 2
        - np.cos(a2 - b2) ** 2
    )


def expected_statistic_per_trial(angles: AngleConfig) -> float:
    """Per-trial expected statistic for the quantum law at these angles:

        (1/4) [cos^2(a1-b2) - cos^2(a1-b1) - cos^2(a2-b1) - cos^2(a2-b2)]

    Bounded above by QUANTUM_CEILING = (sqrt(2)-1)/4 over all angle choices.
    """
    return float(_expected_statistic(*angles.as_tuple()))


def chsh_count_statistic(counts: CountMatrix) -> int:
    """The adjudicated statistic N12 - N11 - N21 - N22."""
    return (
        counts.coincidence_count(1, 2)
        - counts.coincidence_count(1, 1)
        - counts.coincidence_count(2, 1)
        - counts.coincidence_count(2, 2)
    )


def photon_to_spin_angles(angles: AngleConfig) -> AngleConfig:
    """Translate photon analyzer angles to the spin-half experiment:
    double every angle, then rotate the right wing by 180 degrees.

    Applying the anti-correlated spin-half law sin^2(diff/2) to the result
    reproduces the photon coincidence probabilities of the input.
    """
    return AngleConfig(
        2.0 * angles.alpha1,
        2.0 * angles.alpha2,
        2.0 * angles.beta1 + math.pi,
        2.0 * angles.beta2 + math.pi,
    )
