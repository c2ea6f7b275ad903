"""Dataset file formats.

CSV: header ``dim1,...,dimk,y1,...,yd``, one row per unit, 1-based
cluster coordinates; the cluster counts come from the caller. JSON:
``{"dims": [C1,...,Ck], "units": [{"cell": [j1,...,jk], "y": [...]},
...]}`` with the counts embedded. All output is UTF-8 with LF line
endings and shortest round-trip float formatting, so identical inputs
produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .data import ClusteredSample, Dimensions, load_sample
from .errors import ParseError

__all__ = [
    "read_dataset",
    "read_dataset_csv",
    "read_dataset_json",
    "write_dataset_csv",
    "write_json",
]


def write_dataset_csv(path, sample: ClusteredSample) -> None:
    dims = sample.dims
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [f"dim{i + 1}" for i in range(dims.k)]
            + [f"y{j + 1}" for j in range(sample.obs_dim)]
        )
        for flat in range(dims.pi_c):
            coords = dims.coords_of(flat)
            for row in sample.values[sample.offsets[flat] : sample.offsets[flat + 1]]:
                writer.writerow(list(coords) + [repr(float(v)) for v in row])


def read_dataset_csv(path, dims: Dimensions) -> ClusteredSample:
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        expected_prefix = [f"dim{i + 1}" for i in range(dims.k)]
        if [h.strip() for h in header[: dims.k]] != expected_prefix:
            raise ParseError(
                f"header must start with {','.join(expected_prefix)}", line=1
            )
        obs_dim = len(header) - dims.k
        if obs_dim < 1:
            raise ParseError("header has no observation columns", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dims.k + obs_dim:
                raise ParseError(
                    f"expected {dims.k + obs_dim} fields, got {len(row)}", line=lineno
                )
            try:
                coords = tuple(int(v) for v in row[: dims.k])
                y = [float(v) for v in row[dims.k :]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            try:
                dims.flat_index(coords)
            except IndexError as exc:
                raise ParseError(str(exc), line=lineno) from None
            records.append((coords, y))
    return load_sample(records, dims, obs_dim=obs_dim)


def read_dataset_json(path) -> ClusteredSample:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line=exc.lineno) from None
    try:
        dims = Dimensions(tuple(int(c) for c in doc["dims"]))
        units = doc["units"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad dataset document: {exc}") from None
    records = []
    for i, unit in enumerate(units):
        try:
            records.append((tuple(int(c) for c in unit["cell"]), [float(v) for v in unit["y"]]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad unit entry {i}: {exc}") from None
    try:
        return load_sample(records, dims)
    except IndexError as exc:
        raise ParseError(str(exc)) from None


def read_dataset(path, dims: Dimensions | None = None) -> ClusteredSample:
    """Load a dataset by extension; CSV needs explicit cluster counts."""
    p = Path(path)
    if p.suffix.lower() == ".json":
        return read_dataset_json(p)
    if dims is None:
        raise ParseError("CSV datasets need cluster counts (--dims)")
    return read_dataset_csv(p, dims)


def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
