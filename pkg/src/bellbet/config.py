"""Experiment configuration: schema, strict validation, canonical hashing.

A config is one human-readable JSON document; unknown fields are rejected at
every level so the pre-agreed protocol is exactly what the file says. The
canonical serialization (sorted keys, no whitespace) is hashed into the log
header so any party can check that a log was produced under the agreed
configuration (the ``output`` path is excluded from the hash: it is not part
of the protocol).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

from .bounds import midpoint_critical_value
from .core import AngleConfig, Setting, expected_statistic_per_trial
from .quantum import (
    CORRELATION_SENSES,
    EQUAL_POLARIZATION,
    QuantumModel,
    cell_coincidence_probability,
)
from .strategies import NONLOCAL_CHEATER, STRATEGY_REGISTRY

MODES = ("sequential", "cloned-source", "batch")

SIDE_QUANTUM = "quantum"
SIDE_STRATEGY = "strategy"


class ConfigError(ValueError):
    """The configuration document is malformed or inconsistent."""


def quantum_expected_statistic(model: QuantumModel) -> float:
    """Per-trial mean of the statistic for a quantum model of either
    correlation sense (uniform settings)."""
    probs = {
        (i, j): cell_coincidence_probability(model, Setting(i, j)) for i in (1, 2) for j in (1, 2)
    }
    return 0.25 * (probs[(1, 2)] - probs[(1, 1)] - probs[(2, 1)] - probs[(2, 2)])


@dataclass(frozen=True)
class SideSpec:
    """Who produces outcomes: the quantum oracle or a named strategy."""

    kind: str
    correlation_sense: str = EQUAL_POLARIZATION
    strategy: str = ""
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in (SIDE_QUANTUM, SIDE_STRATEGY):
            raise ConfigError(f"side.kind must be 'quantum' or 'strategy', got {self.kind!r}")
        if self.kind == SIDE_QUANTUM:
            if self.correlation_sense not in CORRELATION_SENSES:
                raise ConfigError(
                    f"side.correlation_sense must be one of {CORRELATION_SENSES}, "
                    f"got {self.correlation_sense!r}"
                )
        else:
            cls = STRATEGY_REGISTRY.get(self.strategy)
            if cls is None:
                raise ConfigError(
                    f"unknown strategy {self.strategy!r}; known: {sorted(STRATEGY_REGISTRY)}"
                )
            if cls.locality_class == NONLOCAL_CHEATER:
                raise ConfigError(
                    "the nonlocal cheater cannot be selected from a config file; "
                    "it exists only for enforcement-disabled diagnostics"
                )

    def to_dict(self) -> dict:
        if self.kind == SIDE_QUANTUM:
            return {"kind": self.kind, "correlation_sense": self.correlation_sense}
        return {"kind": self.kind, "strategy": self.strategy, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SideSpec":
        if not isinstance(doc, Mapping):
            raise ConfigError(f"side must be an object, got {doc!r}")
        kind = doc.get("kind")
        if kind == SIDE_QUANTUM:
            allowed = {"kind", "correlation_sense"}
        else:
            allowed = {"kind", "strategy", "params"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown side fields: {sorted(unknown)}")
        if kind == SIDE_QUANTUM:
            return cls(kind=kind, correlation_sense=doc.get("correlation_sense", EQUAL_POLARIZATION))
        return cls(
            kind=kind or "",
            strategy=doc.get("strategy", ""),
            params=dict(doc.get("params", {})),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """One pre-agreed experiment. ``critical_value`` may be given explicitly
    or resolved from the midpoint rule at load time ('auto')."""

    angles: AngleConfig
    side: SideSpec
    n: int
    critical_value: int
    seed: int
    mode: str = "sequential"
    target_error: float = 1e-6
    output: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigError(f"n must be a positive integer, got {self.n!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be an unsigned integer, got {self.seed!r}")
        if not isinstance(self.target_error, float) or not 0.0 < self.target_error < 1.0:
            raise ConfigError(f"target_error must be in (0, 1), got {self.target_error!r}")
        if not isinstance(self.critical_value, int):
            raise ConfigError(f"critical_value must be an integer, got {self.critical_value!r}")
        mu = self.qm_mean_per_trial
        if not 0 < self.critical_value < self.n * mu:
            raise ConfigError(
                f"critical_value must lie strictly between 0 and n*mu = {self.n * mu:.6g}, "
                f"got {self.critical_value}"
            )

    @property
    def qm_mean_per_trial(self) -> float:
        """The quantum expectation the claimant aims for at these angles (used
        for the midpoint rule and both error bounds)."""
        if self.side.kind == SIDE_QUANTUM:
            model = QuantumModel(self.angles, self.side.correlation_sense)
            return quantum_expected_statistic(model)
        return expected_statistic_per_trial(self.angles)

    def to_dict(self) -> dict:
        doc = {
            "mode": self.mode,
            "angles": list(self.angles.as_tuple()),
            "side": self.side.to_dict(),
            "n": self.n,
            "critical_value": self.critical_value,
            "seed": self.seed,
            "target_error": self.target_error,
        }
        if self.output is not None:
            doc["output"] = self.output
        return doc

    def canonical_json(self) -> str:
        doc = self.to_dict()
        doc.pop("output", None)
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("ascii")).hexdigest()


_TOP_LEVEL_FIELDS = {
    "mode",
    "angles",
    "side",
    "n",
    "critical_value",
    "seed",
    "target_error",
    "output",
}


def config_from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    """Parse and validate a config document; unknown fields are rejected."""
    if not isinstance(doc, Mapping):
        raise ConfigError(f"config must be an object, got {type(doc).__name__}")
    unknown = set(doc) - _TOP_LEVEL_FIELDS
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for required in ("angles", "side", "n", "seed"):
        if required not in doc:
            raise ConfigError(f"missing required config field {required!r}")

    angles_doc = doc["angles"]
    if not isinstance(angles_doc, (list, tuple)) or len(angles_doc) != 4:
        raise ConfigError(f"angles must be a list of four radians, got {angles_doc!r}")
    try:
        angles = AngleConfig(*(float(a) for a in angles_doc))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad angles {angles_doc!r}: {exc}") from exc

    side = SideSpec.from_dict(doc["side"])

    n = doc["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ConfigError(f"n must be a positive integer, got {n!r}")

    target_error = doc.get("target_error", 1e-6)
    if isinstance(target_error, int) and not isinstance(target_error, bool):
        target_error = float(target_error)

    raw_c = doc.get("critical_value", "auto")
    if raw_c == "auto":
        if side.kind == SIDE_QUANTUM:
            mu = quantum_expected_statistic(QuantumModel(angles, side.correlation_sense))
        else:
            mu = expected_statistic_per_trial(angles)
        if not mu > 0:
            raise ConfigError(
                f"cannot resolve critical_value='auto': expected statistic {mu:.6g} is not positive"
            )
        critical_value = midpoint_critical_value(n, mu)
    elif isinstance(raw_c, int) and not isinstance(raw_c, bool):
        critical_value = raw_c
    else:
        raise ConfigError(f"critical_value must be an integer or 'auto', got {raw_c!r}")

    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be an unsigned integer, got {seed!r}")

    output = doc.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError(f"output must be a path string, got {output!r}")

    return ExperimentConfig(
        angles=angles,
        side=side,
        n=n,
        critical_value=critical_value,
        seed=seed,
        mode=doc.get("mode", "sequential"),
        target_error=target_error,
        output=output,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def default_config_dict() -> dict:
    """The fully explicit default configuration (for --print-config)."""
    return {
        "mode": "sequential",
        "angles": [math.pi / 8.0, 3.0 * math.pi / 8.0, -math.pi / 4.0, 0.0],
        "side": {"kind": "quantum", "correlation_sense": EQUAL_POLARIZATION},
        "n": 25000,
        "critical_value": "auto",
        "seed": 0,
        "target_error": 1e-6,
        "output": "experiment.log",
    }
