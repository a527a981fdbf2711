"""CSV and JSON file formats.

Numbers are written with ``repr`` so every value round-trips exactly and
repeated runs produce identical bytes.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .mhe import IossCertificate

__all__ = [
    "RecordedData",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_result_csv",
    "read_matrix_csv",
    "write_matrix_csv",
    "load_certificate",
    "write_sweep_csv",
]


def _fmt(v) -> str:
    return repr(float(v))


def _names(prefix, k):
    return [f"{prefix}_{i + 1}" for i in range(k)]


def write_trajectory_csv(path, traj) -> None:
    """Columns ``t, available, y_1..y_p, u_1..u_m, x_1..x_n``.

    The trailing state columns carry the true trajectory so that offline
    estimation can report errors.
    """
    T1, p = traj.outputs.shape
    m, n = traj.inputs.shape[1], traj.states.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "available"] + _names("y", p) + _names("u", m) + _names("x", n))
        for t in range(T1):
            wr.writerow(
                [t, int(traj.available[t])]
                + [_fmt(v) for v in traj.outputs[t]]
                + [_fmt(v) for v in traj.inputs[t]]
                + [_fmt(v) for v in traj.states[t]]
            )


@dataclass
class RecordedData:
    """Contents of a trajectory CSV; ``inputs`` and ``states`` may be absent."""

    times: np.ndarray
    available: np.ndarray
    outputs: np.ndarray
    inputs: Optional[np.ndarray]
    states: Optional[np.ndarray]

    @property
    def T_sim(self) -> int:
        return len(self.times) - 1


def _block(header, prefix):
    idx = [i for i, h in enumerate(header) if h.startswith(prefix + "_")]
    expected = _names(prefix, len(idx))
    if [header[i] for i in idx] != expected:
        raise ValueError(f"columns {prefix}_* must be numbered {prefix}_1..{prefix}_{len(idx)} in order")
    return idx


def read_trajectory_csv(path) -> RecordedData:
    """Parse a trajectory CSV.  Raises ``ValueError`` on format errors."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["t", "available"]:
        raise ValueError(f"{path}: header must start with t,available")
    yi, ui, xi = _block(header, "y"), _block(header, "u"), _block(header, "x")
    if not yi:
        raise ValueError(f"{path}: no output columns y_1..")
    known = 2 + len(yi) + len(ui) + len(xi)
    if known != len(header):
        raise ValueError(f"{path}: unrecognised columns in header")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no data rows")
    if any(len(r) != len(header) for r in body):
        raise ValueError(f"{path}: ragged rows")
    try:
        data = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    t = data[:, 0]
    if not np.array_equal(t, np.arange(len(t))):
        raise ValueError(f"{path}: t must run 0, 1, 2, ...")
    avail = data[:, 1]
    if not np.all(np.isin(avail, (0.0, 1.0))):
        raise ValueError(f"{path}: available must be 0 or 1")
    return RecordedData(
        times=t.astype(int),
        available=avail.astype(bool),
        outputs=data[:, yi],
        inputs=data[:, ui] if ui else None,
        states=data[:, xi] if xi else None,
    )


def write_result_csv(path, estimates, solved, converged, truth=None) -> None:
    """Columns ``t, [x_true_1..n], x_hat_1..n, [err_norm], solved, converged``.

    Truth and error columns appear only when ``truth`` is given.
    """
    X_hat = np.asarray(estimates, float)
    T1, n = X_hat.shape
    head = ["t"]
    if truth is not None:
        truth = np.asarray(truth, float)
        head += _names("x_true", n)
        err = np.linalg.norm(truth - X_hat, axis=1)
    head += _names("x_hat", n)
    if truth is not None:
        head += ["err_norm"]
    head += ["solved", "converged"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(head)
        for t in range(T1):
            row = [t]
            if truth is not None:
                row += [_fmt(v) for v in truth[t]]
            row += [_fmt(v) for v in X_hat[t]]
            if truth is not None:
                row.append(_fmt(err[t]))
            row += [int(bool(solved[t])), int(bool(converged[t]))]
            wr.writerow(row)


def read_matrix_csv(path):
    """``(A, C)`` from a CSV whose first line is ``n,p`` followed by ``n`` rows of A and ``p`` rows of C."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: empty file")
    try:
        n, p = (int(v) for v in rows[0])
        body = [[float(v) for v in r] for r in rows[1:]]
    except ValueError:
        raise ValueError(f"{path}: first line must be 'n,p' followed by numeric rows") from None
    if n < 1 or p < 1:
        raise ValueError(f"{path}: n and p must be positive")
    if len(body) != n + p:
        raise ValueError(f"{path}: expected {n + p} matrix rows, got {len(body)}")
    A, C = body[:n], body[n:]
    if any(len(r) != n for r in A):
        raise ValueError(f"{path}: A must be {n}x{n}")
    if any(len(r) != n for r in C):
        raise ValueError(f"{path}: C must be {p}x{n}")
    return np.array(A), np.array(C)


def write_matrix_csv(path, A, C) -> None:
    A, C = np.atleast_2d(A), np.atleast_2d(C)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([A.shape[0], C.shape[0]])
        for r in np.vstack([A, C]):
            wr.writerow([_fmt(v) for v in r])


def load_certificate(path) -> IossCertificate:
    """JSON object with keys ``P1, P2, Q, R`` (matrices or scalars) and ``eta``."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("certificate must be a JSON object")
    missing = {"P1", "P2", "Q", "R", "eta"} - set(doc)
    extra = set(doc) - {"P1", "P2", "Q", "R", "eta"}
    if missing:
        raise ValueError(f"certificate is missing {', '.join(sorted(missing))}")
    if extra:
        raise ValueError(f"unknown certificate key(s) {', '.join(sorted(extra))}")
    try:
        mats = {k: np.atleast_2d(np.asarray(doc[k], dtype=float)) for k in ("P1", "P2", "Q", "R")}
        eta = float(doc["eta"])
    except (TypeError, ValueError):
        raise ValueError("certificate entries must be numeric") from None
    return IossCertificate(eta=eta, **mats)


def write_sweep_csv(path, rows) -> None:
    """Columns ``label, mean_gap, mean_rmse, std_rmse, seeds``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["label", "mean_gap", "mean_rmse", "std_rmse", "seeds"])
        for r in rows:
            wr.writerow([r.label, _fmt(r.mean_gap), _fmt(r.mean_rmse), _fmt(r.std_rmse), len(r.rmse)])
