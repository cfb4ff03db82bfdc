"""File formats: sample CSVs with JSON sidecars and versioned JSON documents.

Sample files hold one row per point: ``d`` coordinate columns ``x0 ...``
followed by optional ``label`` and ``corrupted`` columns.  Floats are
written with 17 significant digits so that reading a file back gives the
same doubles.  The sidecar ``<name>.json`` carries the seed, the declared
corruption fraction and the adversary.  Every JSON document written here
has ``"schema": 1``.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, MissingInput
from .gaussians import GaussianParams, MixtureModel, SampleSet

__all__ = [
    "SCHEMA",
    "write_samples",
    "read_samples",
    "sidecar_path",
    "write_json",
    "read_json",
    "read_gaussian",
    "to_jsonable",
]

SCHEMA = 1


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_samples(s: SampleSet, path) -> Path:
    """Write ``s`` as CSV plus sidecar; returns the CSV path."""
    path = Path(path)
    d = s.dim
    header = [f"x{j}" for j in range(d)]
    if s.labels is not None:
        header.append("label")
    if s.corrupted is not None:
        header.append("corrupted")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(s.n):
            row = [_fmt(v) for v in s.points[i]]
            if s.labels is not None:
                row.append(str(int(s.labels[i])))
            if s.corrupted is not None:
                row.append("1" if s.corrupted[i] else "0")
            w.writerow(row)
    meta = {"schema": SCHEMA, "seed": s.seed, "eps": s.eps, "adversary": s.adversary, "n": s.n, "d": d}
    write_json(meta, sidecar_path(path))
    return path


def read_samples(path) -> SampleSet:
    """Read a sample CSV (and its sidecar when present)."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"no such sample file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    if not xcols:
        raise ConfigError(f"{path} has no coordinate columns")
    pts = np.array([[float(r[i]) for i in xcols] for r in body], dtype=float).reshape(len(body), len(xcols))
    labels = corrupted = None
    if "label" in header:
        j = header.index("label")
        labels = np.array([int(r[j]) for r in body], dtype=np.int64)
    if "corrupted" in header:
        j = header.index("corrupted")
        corrupted = np.array([r[j] == "1" for r in body], dtype=bool)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = read_json(side)
    return SampleSet(
        pts,
        labels=labels,
        corrupted=corrupted,
        seed=int(meta.get("seed", 0)),
        eps=float(meta.get("eps", 0.0)),
        adversary=meta.get("adversary"),
    )


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy values and objects with ``to_dict`` into JSON types."""
    if hasattr(obj, "to_dict") and not isinstance(obj, dict):
        return to_jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(getattr(k, "value", k)): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if np.isnan(v) or np.isinf(v):
            return repr(v)
        return v
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def write_json(doc: Any, path) -> Path:
    """Write a JSON document, adding ``"schema": 1`` to top-level objects.

    Python's float formatting is the shortest string that reads back to the
    same double, which is at most 17 significant digits.
    """
    doc = to_jsonable(doc)
    if isinstance(doc, dict) and "schema" not in doc:
        doc = {"schema": SCHEMA, **doc}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=False)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def read_json(path) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"no such file: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def read_gaussian(path) -> GaussianParams:
    """Read ``{"mean": [...], "covariance": [[...], ...]}`` (a flat row-major list also works)."""
    data = read_json(path)
    mean = np.asarray(data["mean"], float)
    cov = np.asarray(data["covariance"], float)
    if cov.ndim == 1:
        cov = cov.reshape(len(mean), len(mean))
    return GaussianParams(mean, cov)


def read_mixture(path) -> MixtureModel:
    return MixtureModel.from_dict(read_json(path))
