"""Trial sampler for the quantum-mechanical coincidence prediction.

Stands in for the entangled photon pair: per trial, outcomes follow the
four-point joint law

    P(0,0) = P(1,1) = c/2,    P(0,1) = P(1,0) = (1-c)/2,

where c = cos^2(angle difference) for equally polarized pairs and
c = 1 - cos^2 for oppositely polarized ones. Both marginals are uniform on
{0,1}, so neither wing's outcome distribution reveals the other's setting.

The oracle legitimately sees both settings: it is the quantum connection the
local strategies are forbidden from having, runs inside the referee as a
trusted component, and is exempt from locality enforcement by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AngleConfig, Setting, coincidence_probability
from .rng import ROLE_ORACLE, TrialUniforms

EQUAL_POLARIZATION = "equal-polarization"
OPPOSITE_POLARIZATION = "opposite-polarization"
CORRELATION_SENSES = (EQUAL_POLARIZATION, OPPOSITE_POLARIZATION)


@dataclass(frozen=True)
class QuantumModel:
    angles: AngleConfig
    correlation_sense: str = EQUAL_POLARIZATION

    def __post_init__(self) -> None:
        if self.correlation_sense not in CORRELATION_SENSES:
            raise ValueError(
                f"correlation_sense must be one of {CORRELATION_SENSES}, "
                f"got {self.correlation_sense!r}"
            )


def cell_coincidence_probability(model: QuantumModel, setting: Setting) -> float:
    """Exact coincidence probability for one cell; the same value drives
    ``sample_pair``, which is the consistency contract between the two."""
    c = coincidence_probability(model.angles.difference(setting.i, setting.j))
    if model.correlation_sense == OPPOSITE_POLARIZATION:
        return 1.0 - c
    return c


def sample_pair(model: QuantumModel, setting: Setting, u: float) -> tuple[int, int]:
    """Outcomes (x, y) by inverse CDF on the four-point law, one uniform.

    Region layout: [0, c/2) -> (0,0); [c/2, c) -> (1,1); [c, (1+c)/2) ->
    (0,1); [(1+c)/2, 1) -> (1,0).
    """
    c = cell_coincidence_probability(model, setting)
    if u < c:
        x = int(u >= 0.5 * c)
        return x, x
    x = int(u >= 0.5 * (1.0 + c))
    return x, 1 - x


def sample_pairs(model: QuantumModel, setting: Setting, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``sample_pair`` for one fixed cell: same region layout,
    bit-identical to the scalar path for equal uniforms."""
    c = cell_coincidence_probability(model, setting)
    coincide = u < c
    x = np.where(coincide, u >= 0.5 * c, u >= 0.5 * (1.0 + c)).astype(np.uint8)
    y = np.where(coincide, x, 1 - x).astype(np.uint8)
    return x, y


class OracleSampler:
    """Per-experiment sampler: one oracle uniform stream, one draw per trial."""

    def __init__(self, model: QuantumModel, seed: int, n: int):
        self.model = model
        self._uniforms = TrialUniforms(seed, ROLE_ORACLE, n)

    def sample_trial(self, m: int, setting: Setting) -> tuple[int, int]:
        return sample_pair(self.model, setting, self._uniforms.at(m))
