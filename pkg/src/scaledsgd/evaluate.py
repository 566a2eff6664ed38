"""Ranking metrics, loss evaluation, and run traces.

All evaluators are read-only on the factor matrix. The AUC tie rule is
deliberate and differs from the usual half-credit convention: a score
difference of exactly zero counts as correct for label 0 and incorrect
for label 1.
"""

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import losses


class TraceRow(NamedTuple):
    step: int
    epoch_frac: float
    train_loss: float
    auc: float | None
    g_max: float | None
    wall_ms: int


@dataclass
class Trace:
    """Time series of training progress, one row per metric checkpoint."""

    rows: list[TraceRow] = field(default_factory=list)
    diverged_at: int | None = None
    parallel_stats: object = None

    def append(self, row: TraceRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError("trace steps must be strictly increasing")
        self.rows.append(row)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.rows], dtype=np.int64)

    @property
    def train_losses(self) -> np.ndarray:
        return np.array([r.train_loss for r in self.rows], dtype=float)

    @property
    def aucs(self) -> np.ndarray:
        return np.array(
            [np.nan if r.auc is None else r.auc for r in self.rows], dtype=float
        )


def triple_arrays(omega) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Normalize a triple collection to (i, j, k, y) index arrays.

    Accepts anything exposing ii/jj/kk/values arrays (a triple Dataset) or
    an iterable of TripleSample.
    """
    if hasattr(omega, "kk") and omega.kk is not None:
        return omega.ii, omega.jj, omega.kk, omega.values
    trips = list(omega)
    if not trips:
        raise ValueError("empty triple set")
    arr = np.array(trips, dtype=float)
    return (
        arr[:, 0].astype(np.int64),
        arr[:, 1].astype(np.int64),
        arr[:, 2].astype(np.int64),
        arr[:, 3],
    )


def auc(X: np.ndarray, omega_test) -> float:
    """Fraction of held-out ranking triples whose order the model preserves.

    A triple scores a point when z = x_i^T (x_j - x_k) is positive and the
    label is 1, or z <= 0 and the label is 0.
    """
    ii, jj, kk, yy = triple_arrays(omega_test)
    z = np.einsum("ij,ij->i", X[ii], X[jj] - X[kk])
    correct = np.where(z > 0, yy == 1, yy == 0)
    return float(np.mean(correct))


def bpr_eval(X: np.ndarray, omega) -> float:
    """Mean pairwise logistic ranking loss over a triple set.

    Evaluated in the log-sum-exp form softplus(z) - y z, which never takes
    the log of zero.
    """
    ii, jj, kk, yy = triple_arrays(omega)
    z = np.einsum("ij,ij->i", X[ii], X[jj] - X[kk])
    return float(np.mean(np.logaddexp(0.0, z) - yy * z))


def scalar_auc(x: np.ndarray, omega) -> float:
    """AUC of a non-personalized score vector, using z = x_j - x_k."""
    _, jj, kk, yy = triple_arrays(omega)
    z = x[jj] - x[kk]
    correct = np.where(z > 0, yy == 1, yy == 0)
    return float(np.mean(correct))


def np_maximum(
    omega_test,
    alpha: float = 0.01,
    epochs: int = 20,
    seed: int = 0,
    d: int | None = None,
) -> float:
    """Best-achievable AUC for a non-personalized (global item order) ranker.

    Fits a scalar score per item directly on the test triples and evaluates
    on the same triples, so the result upper-bounds what any global ranking
    can score there. Scores are initialized positive because the updates
    rescale entries multiplicatively and cannot cross zero.
    """
    ii, jj, kk, yy = triple_arrays(omega_test)
    if d is None:
        d = int(max(ii.max(), jj.max(), kk.max())) + 1
    rng = np.random.default_rng(seed)
    x = np.abs(rng.standard_normal(d))
    n = len(jj)
    sig = losses.sigmoid
    for _ in range(epochs):
        order = rng.permutation(n)
        for t in order:
            j = jj[t]
            k = kk[t]
            res = sig(x[j] - x[k]) - yy[t]
            if res == 0.0:
                continue
            a = alpha * res
            xj_new = x[j] - a * x[j]
            x[k] += a * x[k]
            x[j] = xj_new
    return scalar_auc(x, omega_test)


# ---------------------------------------------------------------------------
# Trace CSV round trip

TRACE_HEADER = ["step", "epoch_frac", "train_loss", "auc", "g_max", "wall_ms"]


def write_trace_csv(trace: Trace, path) -> None:
    """Write a trace as CSV; optional fields serialize as empty cells.

    Floats are written with repr so values round-trip exactly.
    """
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for r in trace.rows:
                w.writerow(
                    [
                        r.step,
                        repr(float(r.epoch_frac)),
                        repr(float(r.train_loss)),
                        "" if r.auc is None else repr(float(r.auc)),
                        "" if r.g_max is None else repr(float(r.g_max)),
                        r.wall_ms,
                    ]
                )
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc


def read_trace_csv(path) -> Trace:
    """Read back a trace written by write_trace_csv."""
    trace = Trace()
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != TRACE_HEADER:
                raise ValueError(f"{path}: unexpected trace header {header}")
            for row in reader:
                trace.append(
                    TraceRow(
                        step=int(row[0]),
                        epoch_frac=float(row[1]),
                        train_loss=float(row[2]),
                        auc=None if row[3] == "" else float(row[3]),
                        g_max=None if row[4] == "" else float(row[4]),
                        wall_ms=int(row[5]),
                    )
                )
    except OSError as exc:
        raise OSError(f"cannot read trace from {path}: {exc}") from exc
    return trace
