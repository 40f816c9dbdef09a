"""
Writers for CSV tables, JSON documents and run manifests.

Everything written here is a pure function of its inputs (no timestamps, sorted keys,
fixed float formatting), so repeating a run reproduces its files byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from prettyfmt import fmt_path

MANIFEST_SUFFIX = ".manifest.json"


def fmt_number(value: float, digits: int) -> str:
    """
    A float with `digits` significant digits; integers print without a trailing ".0".
    """
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.{digits}g}"


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def json_text(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)
    return path


def manifest_path(out: Path) -> Path:
    return out.with_name(out.name + MANIFEST_SUFFIX)


@dataclass(frozen=True)
class RunManifest:
    """
    Enough to rerun a command: its name, every resolved parameter (seed, trial count,
    workers, the config itself), the tool version and the files it wrote.
    """

    command: str
    parameters: dict[str, Any]
    version: str
    outputs: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json_text(asdict(self))

    def write(self, out: Path) -> Path:
        return write_text(manifest_path(out), self.to_json())

    @classmethod
    def read(cls, path: Path) -> RunManifest:
        data = json.loads(path.read_text())
        return cls(**data)

    def describe(self) -> str:
        return ", ".join(fmt_path(Path(p)) for p in self.outputs)
