"""Parameter schemas and min-max normalization.

Vectors are plain float arrays indexed by the *free* entries of a
`ParameterSpec`.  Physical and normalized frames are distinguished by the
function that produced them, not by a wrapper type.  A deviation vector is
``normalize(theta) - normalize(typical)``; the L1 penalty acts on it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class SpecError(ValueError):
    """Malformed parameter specification."""


class OutOfBoundsWarning(UserWarning):
    """A parameter vector left its box; the value was clamped or extrapolated."""


@dataclass(frozen=True)
class ParamEntry:
    name: str
    min: float
    max: float
    fixed: float | None = None
    typical: float | None = None

    @property
    def is_fixed(self) -> bool:
        return self.fixed is not None


@dataclass(frozen=True)
class ParameterSpec:
    """Ordered, immutable parameter schema.

    Fixed entries carry ``min == max == fixed`` and never appear in free
    vectors.  Free entries without a typical value default to the midpoint of
    their bounds.
    """

    entries: tuple[ParamEntry, ...]
    name: str = "spec"

    def __post_init__(self):
        entries = []
        for e in self.entries:
            if e.is_fixed:
                if not (e.min == e.max == e.fixed):
                    raise SpecError(f"fixed entry {e.name!r} must have min == max == fixed")
            else:
                if not e.min < e.max:
                    raise SpecError(f"entry {e.name!r}: min must be < max")
                if e.typical is None:
                    e = replace(e, typical=0.5 * (e.min + e.max))
                elif not e.min <= e.typical <= e.max:
                    raise SpecError(f"entry {e.name!r}: typical {e.typical} outside [{e.min}, {e.max}]")
            entries.append(e)
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise SpecError("parameter names must be unique")
        object.__setattr__(self, "entries", tuple(entries))

    @property
    def free(self) -> tuple[ParamEntry, ...]:
        return tuple(e for e in self.entries if not e.is_fixed)

    @property
    def names(self) -> list[str]:
        """Names of the free entries, in vector order."""
        return [e.name for e in self.free]

    @property
    def size(self) -> int:
        return len(self.free)

    @property
    def lower(self) -> np.ndarray:
        return np.array([e.min for e in self.free], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([e.max for e in self.free], dtype=float)

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def typical(self) -> np.ndarray:
        """Typical values in the physical frame."""
        return np.array([e.typical for e in self.free], dtype=float)

    @property
    def fixed_values(self) -> dict[str, float]:
        return {e.name: e.fixed for e in self.entries if e.is_fixed}

    def index(self, name: str) -> int:
        return self.names.index(name)

    def with_typical(self, values: Mapping[str, float]) -> "ParameterSpec":
        """Copy with typical values overridden (e.g. means of preliminary fits)."""
        unknown = set(values) - set(self.names)
        if unknown:
            raise SpecError(f"unknown parameter(s): {sorted(unknown)}")
        entries = [replace(e, typical=float(values[e.name])) if e.name in values else e
                   for e in self.entries]
        return ParameterSpec(tuple(entries), name=self.name)

    def to_json(self) -> list[dict]:
        out = []
        for e in self.entries:
            d = {"name": e.name, "min": e.min, "max": e.max}
            if e.is_fixed:
                d["fixed"] = e.fixed
            else:
                d["typical"] = e.typical
            out.append(d)
        return out


def spec_from_json(doc: Sequence[Mapping], name: str = "spec") -> ParameterSpec:
    if not isinstance(doc, list):
        raise SpecError("parameter spec must be a JSON array of entries")
    entries = []
    for i, item in enumerate(doc):
        try:
            entries.append(ParamEntry(
                name=str(item["name"]),
                min=float(item["min"]),
                max=float(item["max"]),
                fixed=None if item.get("fixed") is None else float(item["fixed"]),
                typical=None if item.get("typical") is None else float(item["typical"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"entry {i}: {exc!r}") from exc
    return ParameterSpec(tuple(entries), name=name)


def load_spec(path: str | Path) -> ParameterSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return spec_from_json(doc, name=path.stem)


def headneck_spec() -> ParameterSpec:
    """The 12 free + 2 fixed parameter head-neck schema."""
    text = resources.files("sparse_nls.data").joinpath("headneck.json").read_text()
    return spec_from_json(json.loads(text), name="headneck")


def _flag(spec: ParameterSpec, mask: np.ndarray, what: str) -> None:
    if mask.any():
        names = [n for n, m in zip(spec.names, mask) if m]
        warnings.warn(f"{what}: {names}", OutOfBoundsWarning, stacklevel=3)


def normalize(spec: ParameterSpec, theta, warn: bool = True) -> np.ndarray:
    """Physical -> unit-scaled coordinates; out-of-box values are clamped."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.size,):
        raise ValueError(f"expected {spec.size} free values, got shape {theta.shape}")
    out = (theta - spec.lower) / spec.span
    bad = (out < 0.0) | (out > 1.0)
    if bad.any():
        if warn:
            _flag(spec, bad, "clamped out-of-bounds parameters")
        out = np.clip(out, 0.0, 1.0)
    return out


def denormalize(spec: ParameterSpec, phi, warn: bool = True) -> np.ndarray:
    """Unit-scaled -> physical coordinates.  Values outside [0, 1] extrapolate linearly."""
    phi = np.asarray(phi)
    if phi.shape != (spec.size,):
        raise ValueError(f"expected {spec.size} free values, got shape {phi.shape}")
    if warn:
        real = phi.real
        _flag(spec, (real < 0.0) | (real > 1.0), "parameters outside bounds")
    return spec.lower + phi * spec.span


def typical_normalized(spec: ParameterSpec) -> np.ndarray:
    return (spec.typical - spec.lower) / spec.span


def deviation(spec: ParameterSpec, phi) -> np.ndarray:
    """Normalized vector -> deviation from the typical values."""
    return np.asarray(phi, dtype=float) - typical_normalized(spec)


def recompose(spec: ParameterSpec, d) -> np.ndarray:
    """Deviation -> normalized vector."""
    return typical_normalized(spec) + np.asarray(d)


def deviation_to_physical(spec: ParameterSpec, d, warn: bool = False) -> np.ndarray:
    return denormalize(spec, recompose(spec, d), warn=warn)


def physical_to_deviation(spec: ParameterSpec, theta, warn: bool = True) -> np.ndarray:
    return deviation(spec, normalize(spec, theta, warn=warn))


def named(spec: ParameterSpec, values: Iterable[float]) -> dict[str, float]:
    return {n: float(v) for n, v in zip(spec.names, values)}


def vector_from_mapping(spec: ParameterSpec, values: Mapping[str, float], default: float = 0.0) -> np.ndarray:
    unknown = set(values) - set(spec.names)
    if unknown:
        raise SpecError(f"unknown parameter(s): {sorted(unknown)}")
    return np.array([float(values.get(n, default)) for n in spec.names])
