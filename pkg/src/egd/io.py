"""File formats: data matrices, mixture models, iteration traces.

Matrices travel either as plain CSV (shortest-round-trip decimal floats, so
write-then-read is bit exact) or as a little-endian binary container with a
four-byte magic; readers sniff the magic to pick the decoder.  Models are
JSON documents; traces are CSV with a fixed column header.
"""

from __future__ import annotations

import csv
import io as _stdio
import json
import struct
from pathlib import Path

import numpy as np

from .core import EgdParams, MixtureModel, ScatterMatrix

__all__ = [
    "MATRIX_MAGIC",
    "MATRIX_VERSION",
    "TRACE_COLUMNS",
    "write_matrix_binary",
    "write_matrix_csv",
    "read_matrix",
    "write_model",
    "read_model",
    "write_trace",
    "read_trace",
    "trace_rows",
]

MATRIX_MAGIC = b"EGDM"
MATRIX_VERSION = 1

_HEADER = struct.Struct("<4sIQQ")

MODEL_FORMAT = "egd-mixture-v1"

TRACE_COLUMNS = ("iter", "avg_loglik", "residual", "alpha",
                 "lambda_max", "lambda_min", "elapsed_ms")


def _as_matrix(array) -> np.ndarray:
    m = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError("expected a two-dimensional matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    return m


def write_matrix_binary(path, array) -> None:
    m = _as_matrix(array)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, m.shape[0],
                              m.shape[1]))
        fh.write(m.tobytes(order="C"))


def write_matrix_csv(path, array) -> None:
    m = _as_matrix(array)
    with open(path, "w", newline="") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def _read_matrix_binary(raw: bytes) -> np.ndarray:
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if version != MATRIX_VERSION:
        raise ValueError(f"unsupported matrix file version {version}")
    expected = _HEADER.size + 8 * rows * cols
    if len(raw) != expected:
        raise ValueError(f"matrix payload is {len(raw) - _HEADER.size} bytes, "
                         f"expected {8 * rows * cols} for a {rows}x{cols} "
                         "matrix")
    m = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return _as_matrix(m.reshape(rows, cols))


def _read_matrix_csv(text: str) -> np.ndarray:
    rows = []
    reader = csv.reader(_stdio.StringIO(text))
    for line_no, row in enumerate(reader):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if line_no == 0:
            # a non-numeric first line is treated as a header
            try:
                float(row[0])
            except ValueError:
                continue
        try:
            rows.append([float(v) for v in row])
        except ValueError as exc:
            raise ValueError(f"line {line_no + 1}: {exc}") from None
    if not rows:
        raise ValueError("no numeric rows found")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError("rows have inconsistent column counts")
    return _as_matrix(rows)


def read_matrix(path) -> np.ndarray:
    """Load a matrix, sniffing binary versus CSV by the leading magic.

    The file is read in one pass so pipes and process substitutions work.
    """
    raw = Path(path).read_bytes()
    if raw[:len(MATRIX_MAGIC)] == MATRIX_MAGIC:
        return _read_matrix_binary(raw)
    return _read_matrix_csv(raw.decode("utf-8"))


def write_model(path, model: MixtureModel, fit_info: dict | None = None) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "dim": model.dim,
        "components": [
            {
                "weight": float(p),
                "a": comp.shape_a,
                "b": comp.scale_b,
                "scatter": [float(v) for v in comp.scatter.entries.ravel()],
            }
            for comp, p in zip(model.components, model.mix_probs)
        ],
        "fit_info": fit_info or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_model(path):
    """Load a mixture model document; returns ``(model, fit_info)``."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} document")
    dim = doc["dim"]
    comps = []
    weights = []
    for j, entry in enumerate(doc["components"]):
        flat = np.asarray(entry["scatter"], dtype=float)
        if flat.size != dim * dim:
            raise ValueError(f"component {j}: scatter has {flat.size} entries, "
                             f"expected {dim * dim}")
        scatter = ScatterMatrix(flat.reshape(dim, dim))
        comps.append(EgdParams(scatter, float(entry["a"]), float(entry["b"])))
        weights.append(float(entry["weight"]))
    weights = np.asarray(weights)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"component weights sum to {weights.sum()!r}, "
                         "expected 1")
    model = MixtureModel(comps, weights / weights.sum())
    return model, doc.get("fit_info", {})


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def trace_rows(report):
    """Rows for :func:`write_trace` from a scatter fit report.

    The stationarity residual is only evaluated at exit, so it appears on
    the final row; step-size columns are empty for algorithms without one.
    """
    n = report.iterations
    alphas = report.alpha_trace
    lmax = report.lambda_max_trace
    lmin = report.lambda_min_trace
    rows = []
    for i in range(n):
        rows.append((
            i,
            report.loglik_trace[i],
            report.final_residual if i == n - 1 else None,
            alphas[i] if alphas is not None else None,
            lmax[i] if lmax is not None else None,
            lmin[i] if lmin is not None else None,
            report.elapsed_ms_trace[i],
        ))
    return rows


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRACE_COLUMNS))
        fh.write("\n")
        for row in rows:
            if len(row) != len(TRACE_COLUMNS):
                raise ValueError(f"trace row has {len(row)} fields, expected "
                                 f"{len(TRACE_COLUMNS)}")
            it, rest = row[0], row[1:]
            fh.write(",".join([str(int(it))] + [_fmt(v) for v in rest]))
            fh.write("\n")


def read_trace(path):
    """Parse a trace file into a list of dicts keyed by column name."""
    with open(path, newline="") as fh:
        text = fh.read()
    reader = csv.reader(_stdio.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != TRACE_COLUMNS:
        raise ValueError("trace header does not match expected columns")
    out = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(TRACE_COLUMNS):
            raise ValueError("trace row has wrong field count")
        record = {"iter": int(row[0])}
        for name, cell in zip(TRACE_COLUMNS[1:], row[1:]):
            record[name] = float(cell) if cell else None
        out.append(record)
    return out
