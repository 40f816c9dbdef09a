"""
System and simulation config files.

A system file is JSON (or YAML, by extension) holding row-major matrices:

    {"A": [[2, 0], [0, 3]], "B": [[1, 0], [0, 1]], "C": [[1, 0], [0, 1]],
     "labels": {"inputs": ["u1", "u2"]}, "description": "..."}

Entries are numbers or exact rationals written as strings like "3/7". Bundled files
in `randchan/systems/` can be named without a path or extension.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from importlib.resources import files
from importlib.resources.abc import Traversable
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from randchan.channels import LtiSystem
from randchan.errors import InvalidInput
from randchan.linalg import Matrix, as_matrix
from randchan.simulate import SchedulerKind, SchedulerSpec, SimConfig

log = logging.getLogger(__name__)

YAML_SUFFIXES = (".yml", ".yaml")
FILE_SUFFIXES = (".json", *YAML_SUFFIXES)


@dataclass(frozen=True)
class SystemFile:
    system: LtiSystem
    labels: dict[str, list[str]] = field(default_factory=dict)
    description: str | None = None


def bundled_files() -> Traversable:
    return files("randchan") / "systems"


def bundled_names() -> list[str]:
    return sorted(
        Path(entry.name).stem
        for entry in bundled_files().iterdir()
        if entry.name.endswith(FILE_SUFFIXES)
    )


def resolve(source: str | Path) -> Path | Traversable:
    """
    A path as given if it exists, else a bundled file of that name.
    """
    path = Path(source)
    if path.exists():
        return path
    if path.parent == Path(".") and path.suffix in ("", *FILE_SUFFIXES):
        for suffix in FILE_SUFFIXES if not path.suffix else (path.suffix,):
            candidate = bundled_files() / f"{path.stem}{suffix}"
            if candidate.is_file():
                return candidate
    raise InvalidInput(
        f"No such file or bundled system: {source} (bundled: {', '.join(bundled_names())})"
    )


def read_document(source: str | Path) -> dict[str, Any]:
    target = resolve(source)
    try:
        text = target.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise InvalidInput(f"{target.name} is not UTF-8 text: {e}") from None
    except OSError as e:
        raise InvalidInput(f"Could not read {target.name}: {e}") from None
    try:
        if target.name.endswith(YAML_SUFFIXES):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise InvalidInput(f"Could not parse {target.name}: {e}") from None
    if not isinstance(data, dict):
        raise InvalidInput(f"{target.name} must contain a mapping at the top level")
    log.info("Read %s", target)
    return data


def _has_rationals(value: Any) -> bool:
    if isinstance(value, str):
        return True
    if isinstance(value, list):
        return any(_has_rationals(v) for v in value)
    return False


def _matrix_field(data: dict[str, Any], key: str, exact: bool) -> Matrix:
    rows = data.get(key)
    if not isinstance(rows, list) or not all(isinstance(row, list) for row in rows):
        raise InvalidInput(f"'{key}' must be a list of rows")
    try:
        return as_matrix(rows, exact=exact)
    except InvalidInput as e:
        raise InvalidInput(f"In '{key}': {e}") from None


def parse_system(data: dict[str, Any], exact: bool | None = None) -> SystemFile:
    """
    Build a system from a parsed document. With `exact=None` the matrices are exact
    iff some entry is written as a rational string.
    """
    unknown = set(data) - {"A", "B", "C", "labels", "description", "name"}
    if unknown:
        raise InvalidInput(f"Unknown keys in system file: {', '.join(sorted(unknown))}")
    matrices = [data.get(key) for key in ("A", "B", "C")]
    if exact is None:
        exact = _has_rationals(matrices)

    system = LtiSystem(
        A=_matrix_field(data, "A", exact),
        B=_matrix_field(data, "B", exact),
        C=_matrix_field(data, "C", exact) if data.get("C") is not None else None,
    )

    labels = data.get("labels") or {}
    if not isinstance(labels, dict) or not all(
        isinstance(v, list) and all(isinstance(s, str) for s in v)
        for v in labels.values()
    ):
        raise InvalidInput("'labels' must map names to lists of strings")
    description = data.get("description")
    return SystemFile(
        system=system,
        labels={str(k): list(v) for k, v in labels.items()},
        description=str(description) if description is not None else None,
    )


def load_system(source: str | Path, exact: bool | None = None) -> SystemFile:
    return parse_system(read_document(source), exact)


def _entry(value: Any) -> int | float | str:
    if isinstance(value, Fraction):
        return value.numerator if value.denominator == 1 else str(value)
    return float(value)


def _rows(matrix: Matrix) -> list[list[int | float | str]]:
    return [[_entry(v) for v in row] for row in matrix.tolist()]


def system_to_dict(system_file: SystemFile) -> dict[str, Any]:
    """
    The document form of a system. Exact entries are written as integers or "p/q"
    strings, float entries as floats, so parsing the result gives identical matrices.
    """
    system = system_file.system
    data: dict[str, Any] = {"A": _rows(system.A), "B": _rows(system.B)}
    if system.C is not None:
        data["C"] = _rows(system.C)
    if system_file.labels:
        data["labels"] = system_file.labels
    if system_file.description is not None:
        data["description"] = system_file.description
    return data


def dump_system(system_file: SystemFile, path: Path) -> None:
    data = system_to_dict(system_file)
    if path.suffix in YAML_SUFFIXES:
        path.write_text(yaml.safe_dump(data, default_flow_style=None, sort_keys=False))
    else:
        path.write_text(json.dumps(data, indent=2) + "\n")


def parse_scheduler(data: Any) -> SchedulerSpec:
    if data is None:
        return SchedulerSpec()
    if not isinstance(data, dict):
        raise InvalidInput("'scheduler' must be a mapping")
    try:
        kind = SchedulerKind(data.get("kind", SchedulerKind.UNIFORM_SINGLE))
    except ValueError:
        choices = ", ".join(k.value for k in SchedulerKind)
        raise InvalidInput(f"Unknown scheduler kind {data.get('kind')!r} (use {choices})") from None
    weights = data.get("weights")
    p = data.get("p")
    try:
        return SchedulerSpec(
            kind=kind,
            weights=tuple(float(w) for w in weights) if weights is not None else None,
            p=float(p) if p is not None else None,
        )
    except InvalidInput:
        raise
    except (TypeError, ValueError) as e:
        raise InvalidInput(f"Bad scheduler settings: {e}") from None


def parse_sim_config(data: dict[str, Any]) -> SimConfig:
    """
    Build a simulation config from a parsed document with keys `system` (inline) or
    `system_file`, plus `gains`, `scheduler`, `x0` and `horizon`.
    """
    if ("system" in data) == ("system_file" in data):
        raise InvalidInput("A config needs exactly one of 'system' and 'system_file'")
    if "system" in data:
        if not isinstance(data["system"], dict):
            raise InvalidInput("'system' must be a mapping")
        system = parse_system(data["system"], exact=False).system
    else:
        system = load_system(str(data["system_file"]), exact=False).system
    for key in ("gains", "x0", "horizon"):
        if key not in data:
            raise InvalidInput(f"Config is missing '{key}'")
    horizon = data["horizon"]
    if not isinstance(horizon, int) or isinstance(horizon, bool):
        raise InvalidInput(f"'horizon' must be an integer, got {horizon!r}")
    return SimConfig.build(
        system,
        _matrix_field(data, "gains", exact=False),
        parse_scheduler(data.get("scheduler")),
        data["x0"],
        horizon,
    )


def load_sim_config(source: str | Path) -> SimConfig:
    return parse_sim_config(read_document(source))


def sim_config_to_dict(config: SimConfig) -> dict[str, Any]:
    """
    Fully resolved form of a config (inline system, explicit scheduler), as recorded
    in run manifests.
    """
    scheduler: dict[str, Any] = {"kind": config.scheduler.kind.value}
    if config.scheduler.weights is not None:
        scheduler["weights"] = list(config.scheduler.weights)
    if config.scheduler.p is not None:
        scheduler["p"] = config.scheduler.p
    return {
        "system": system_to_dict(SystemFile(config.system)),
        "gains": _rows(config.gains),
        "scheduler": scheduler,
        "x0": [float(v) for v in np.asarray(config.x0)],
        "horizon": config.horizon,
    }
