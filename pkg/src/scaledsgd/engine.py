"""Sampling and the single-threaded training driver.

The driver binds a factor model, a sample set, one of the four loss step
rules, and a step mode, then runs epochs of uniform-with-replacement
sampling. The inner loops inline the step arithmetic for throughput; they
perform the exact same operations in the same order as the step functions
in ``losses``, which remain the reference implementations (see the
equivalence test in the suite).

Metric rows are recorded on a sample-count cadence; full-matrix metrics
(recovery loss, leverage scores, ranking AUC) are only ever computed on
that cadence, never per step.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from . import evaluate, kernel, losses, model as model_mod
from .evaluate import Trace, TraceRow
from .losses import ElementSample, StepMode, TripleSample

_CHUNK = 8192

ELEMENT_KINDS = ("rmse", "xent", "edm")
KINDS = ELEMENT_KINDS + ("bpr",)


class NonFiniteError(Exception):
    """A factor entry stopped being finite; the run was aborted.

    Carries the step at which non-finite arithmetic was first observed and
    the trace collected up to (and including) the divergence row.
    """

    def __init__(self, step: int, trace: Trace):
        super().__init__(f"non-finite factor entries at step {step}")
        self.step = step
        self.trace = trace


@dataclass
class Dataset:
    """An indexed sample set: matrix elements or ranking triples.

    Element kinds store (i, j, value); the triple kind additionally stores
    k and a 0/1 label in ``values``. ``ground_truth`` optionally carries the
    dense matrix the factors should recover, in which case traces record
    the full recovery loss instead of the sampled training objective.
    """

    kind: str
    d: int
    ii: np.ndarray
    jj: np.ndarray
    values: np.ndarray
    kk: np.ndarray | None = None
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.ii = np.ascontiguousarray(self.ii, dtype=np.int64)
        self.jj = np.ascontiguousarray(self.jj, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=float)
        if self.kk is not None:
            self.kk = np.ascontiguousarray(self.kk, dtype=np.int64)
        if (self.kind == "bpr") != (self.kk is not None):
            raise ValueError("triple datasets need kk; element datasets must not have it")
        if len(self.ii) == 0:
            raise ValueError("dataset must be nonempty")
        for arr in (self.ii, self.jj) + ((self.kk,) if self.kk is not None else ()):
            if len(arr) != len(self.ii):
                raise ValueError("index arrays must have equal length")
            if arr.min() < 0 or arr.max() >= self.d:
                raise ValueError("sample index out of range")
        if self.kind == "bpr" and np.any(self.jj == self.kk):
            raise ValueError("ranking triples require j != k")
        if self.kind == "edm" and np.any(self.ii == self.jj):
            raise ValueError("distance samples require i != j")

    @property
    def n(self) -> int:
        return len(self.ii)

    def sample(self, idx: int):
        if self.kk is None:
            return ElementSample(int(self.ii[idx]), int(self.jj[idx]), float(self.values[idx]))
        return TripleSample(
            int(self.ii[idx]), int(self.jj[idx]), int(self.kk[idx]), int(self.values[idx])
        )

    @property
    def samples(self) -> list:
        return [self.sample(t) for t in range(self.n)]

    @classmethod
    def from_elements(cls, kind, samples, d, ground_truth=None) -> "Dataset":
        arr = np.array([(s.i, s.j, s.value) for s in samples], dtype=float)
        return cls(kind, d, arr[:, 0], arr[:, 1], arr[:, 2], ground_truth=ground_truth)

    @classmethod
    def from_triples(cls, samples, d) -> "Dataset":
        arr = np.array([(t.i, t.j, t.k, t.y) for t in samples], dtype=float)
        return cls("bpr", d, arr[:, 0], arr[:, 1], arr[:, 3], kk=arr[:, 2])

    @classmethod
    def fully_observed(cls, kind: str, M: np.ndarray, ground_truth=None) -> "Dataset":
        """Every matrix element of M as a sample set.

        For the distance kind the diagonal is dropped (those samples are
        rejected by the step rule); for the 1-bit kind the stored values
        are the logistic transform of M and M itself is kept as the
        recovery target.
        """
        d = M.shape[0]
        ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        if kind == "edm":
            keep = ii != jj
            ii, jj = ii[keep], jj[keep]
            return cls(kind, d, ii, jj, M[ii, jj])
        vals = losses.sigmoid(M[ii, jj]) if kind == "xent" else M[ii, jj]
        if ground_truth is None:
            ground_truth = M
        return cls(kind, d, ii, jj, vals, ground_truth=ground_truth)


@dataclass
class RunConfig:
    """Knobs for one training run.

    ``epochs`` may be fractional (an epoch is one sample-set size worth of
    draws, with replacement). ``trace_every`` and ``refresh_period`` default
    to one epoch. ``eval_set`` is an optional triple set scored for AUC on
    the trace cadence.
    """

    alpha: float
    epochs: float
    scaled: bool
    seed: int = 0
    trace_every: int | None = None
    refresh_period: int | None = None
    eval_set: Dataset | None = None
    record_g_max: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.trace_every is not None and self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")


def sample_uniform(dataset: Dataset, rng: np.random.Generator):
    """One uniform-with-replacement draw from the sample set."""
    return dataset.sample(int(rng.integers(0, dataset.n)))


def training_loss(X: np.ndarray, dataset: Dataset) -> float:
    """Loss recorded on the trace cadence.

    The full recovery loss against the dense ground truth when one is
    attached, otherwise the mean sampled objective over the whole set
    (squared-residual losses carry their conventional 1/2 and 1/4
    normalizations).
    """
    if dataset.ground_truth is not None:
        return model_mod.full_loss(X, dataset.ground_truth)
    ii, jj, v = dataset.ii, dataset.jj, dataset.values
    if dataset.kind == "bpr":
        return evaluate.bpr_eval(X, dataset)
    if dataset.kind == "edm":
        diff = X[ii] - X[jj]
        res = np.einsum("ij,ij->i", diff, diff) - v
        return float(np.sum(res * res)) / (4.0 * dataset.n)
    s = np.einsum("ij,ij->i", X[ii], X[jj])
    if dataset.kind == "xent":
        return float(np.mean(np.logaddexp(0.0, s) - v * s))
    res = s - v
    return float(np.sum(res * res)) / (2.0 * dataset.n)


def run(model: model_mod.FactorModel, dataset: Dataset, config: RunConfig):
    """Train for ``config.epochs`` epochs; returns (model, trace).

    The model is updated in place. Raises NonFiniteError (with the partial
    trace attached) if any factor entry diverges.
    """
    if model.d != dataset.d:
        raise ValueError(f"model dimension {model.d} != dataset dimension {dataset.d}")
    total_steps = int(round(config.epochs * dataset.n))
    trace_every = config.trace_every or dataset.n
    refresh_period = config.refresh_period or dataset.n
    if config.scaled and model.refresh_period == 0:
        model.refresh_period = refresh_period

    rng = np.random.default_rng(config.seed)
    trace = Trace()
    t0 = time.perf_counter()

    def emit(done: int) -> None:
        X = model.X
        if not np.isfinite(X).all():
            _record_divergence(trace, done, dataset, t0)
        trace.append(
            TraceRow(
                step=done,
                epoch_frac=done / dataset.n,
                train_loss=training_loss(X, dataset),
                auc=None if config.eval_set is None else evaluate.auc(X, config.eval_set),
                g_max=(
                    float(np.max(model_mod.coherence_profile(X)))
                    if config.record_g_max
                    else None
                ),
                wall_ms=int((time.perf_counter() - t0) * 1000),
            )
        )

    emit(0)
    mode = StepMode(config.scaled, config.alpha)
    with np.errstate(all="ignore"):
        if dataset.kind == "bpr":
            loop = _triple_loop
        else:
            loop = _element_loop
        loop(model, dataset, mode, rng, total_steps, trace_every, refresh_period, emit, trace, t0)
    if not trace.rows or trace.rows[-1].step != total_steps:
        emit(total_steps)
    return model, trace


def _record_divergence(trace: Trace, step: int, dataset: Dataset, t0: float):
    """Append a divergence marker row and abort the run."""
    if not trace.rows or trace.rows[-1].step != step:
        trace.append(
            TraceRow(
                step=step,
                epoch_frac=step / dataset.n,
                train_loss=float("nan"),
                auc=None,
                g_max=None,
                wall_ms=int((time.perf_counter() - t0) * 1000),
            )
        )
    trace.diverged_at = step
    raise NonFiniteError(step, trace)


def _element_loop(model, ds, mode, rng, total, trace_every, refresh_period, emit, trace, t0):
    X = model.X
    P = model.P
    ii, jj, vals = ds.ii, ds.jj, ds.values
    n = ds.n
    alpha = mode.alpha
    scaled = mode.scaled
    use_sig = ds.kind == "xent"
    is_edm = ds.kind == "edm"
    sig = losses.sigmoid
    add, sub = kernel.smw_add, kernel.smw_sub
    isfinite = math.isfinite
    step_mode = mode
    sample_cls = ElementSample

    done = 0
    smw_steps = 0
    smw_calls = 0
    next_trace = trace_every
    while done < total:
        idx = rng.integers(0, n, size=min(_CHUNK, total - done))
        for s_idx in idx:
            i = ii[s_idx]
            j = jj[s_idx]
            xi = X[i]
            xj = X[j]
            if is_edm:
                diff = xi - xj
                res = diff.dot(diff) - vals[s_idx]
            else:
                s = xi.dot(xj)
                res = (sig(s) if use_sig else s) - vals[s_idx]
            if not isfinite(res):
                model.P = P
                _record_divergence(trace, done, ds, t0)
            a = alpha * res
            if a != 0.0:
                if not scaled:
                    if i == j:
                        X[i] = xi - (2.0 * a) * xi
                    elif is_edm:
                        step = a * diff
                        X[i] = xi - step
                        X[j] = xj + step
                    else:
                        xi_new = xi - a * xj
                        X[j] = xj - a * xi
                        X[i] = xi_new
                else:
                    try:
                        if i == j:
                            xi_new = xi - (2.0 * a) * P.dot(xi)
                            P2 = sub(add(P, xi_new), xi)
                            X[i] = xi_new
                            calls = 2
                        elif is_edm:
                            step = a * P.dot(diff)
                            xi_new = xi - step
                            xj_new = xj + step
                            P2 = sub(sub(add(add(P, xi_new), xj_new), xi), xj)
                            X[i] = xi_new
                            X[j] = xj_new
                            calls = 4
                        else:
                            xi_new = xi - a * P.dot(xj)
                            xj_new = xj - a * P.dot(xi)
                            P2 = sub(sub(add(add(P, xi_new), xj_new), xi), xj)
                            X[i] = xi_new
                            X[j] = xj_new
                            calls = 4
                        P = P2
                        smw_steps += 1
                        smw_calls += calls
                    except kernel.SingularDowndate:
                        # Drift made the downdate unsafe: refresh exactly and
                        # retry this one sample through the reference rule.
                        model.P = kernel.sym_inverse(kernel.gram(X))
                        model.smw_calls_since_refresh = 0
                        sample = sample_cls(int(i), int(j), float(vals[s_idx]))
                        if is_edm:
                            losses.edm_step(model, sample, step_mode)
                        elif use_sig:
                            losses.xent_step(model, sample, step_mode)
                        else:
                            losses.rmse_step(model, sample, step_mode)
                        P = model.P
                        smw_steps = 1
                        smw_calls = model.smw_calls_since_refresh
                    if smw_steps >= refresh_period:
                        P = kernel.sym_inverse(kernel.gram(X))
                        smw_steps = 0
                        smw_calls = 0
            done += 1
            if done >= next_trace:
                model.P = P
                model.smw_calls_since_refresh = smw_calls
                emit(done)
                next_trace += trace_every
    model.P = P
    model.smw_calls_since_refresh = smw_calls


def _triple_loop(model, ds, mode, rng, total, trace_every, refresh_period, emit, trace, t0):
    X = model.X
    P = model.P
    ii, jj, kk, yy = ds.ii, ds.jj, ds.kk, ds.values
    n = ds.n
    alpha = mode.alpha
    scaled = mode.scaled
    sig = losses.sigmoid
    add, sub = kernel.smw_add, kernel.smw_sub
    isfinite = math.isfinite

    done = 0
    smw_steps = 0
    smw_calls = 0
    next_trace = trace_every
    while done < total:
        idx = rng.integers(0, n, size=min(_CHUNK, total - done))
        for s_idx in idx:
            i = ii[s_idx]
            j = jj[s_idx]
            k = kk[s_idx]
            xi = X[i]
            xj = X[j]
            xk = X[k]
            diff = xj - xk
            res = sig(xi.dot(diff)) - yy[s_idx]
            if not isfinite(res):
                model.P = P
                _record_divergence(trace, done, ds, t0)
            a = alpha * res
            if a != 0.0:
                if not scaled:
                    if i == j:
                        xi_new = xi - a * diff - a * xi
                        X[k] = xk + a * xi
                        X[i] = xi_new
                    elif i == k:
                        xi_new = xi - a * diff + a * xi
                        X[j] = xj - a * xi
                        X[i] = xi_new
                    else:
                        xi_new = xi - a * diff
                        xj_new = xj - a * xi
                        X[k] = xk + a * xi
                        X[i] = xi_new
                        X[j] = xj_new
                else:
                    try:
                        pdiff = P.dot(diff)
                        pxi = P.dot(xi)
                        if i == j:
                            xi_new = xi - a * pdiff - a * pxi
                            xk_new = xk + a * pxi
                            P2 = sub(sub(add(add(P, xi_new), xk_new), xi), xk)
                            X[i] = xi_new
                            X[k] = xk_new
                            calls = 4
                        elif i == k:
                            xi_new = xi - a * pdiff + a * pxi
                            xj_new = xj - a * pxi
                            P2 = sub(sub(add(add(P, xi_new), xj_new), xi), xj)
                            X[i] = xi_new
                            X[j] = xj_new
                            calls = 4
                        else:
                            xi_new = xi - a * pdiff
                            xj_new = xj - a * pxi
                            xk_new = xk + a * pxi
                            P2 = add(add(add(P, xi_new), xj_new), xk_new)
                            P2 = sub(sub(sub(P2, xi), xj), xk)
                            X[i] = xi_new
                            X[j] = xj_new
                            X[k] = xk_new
                            calls = 6
                        P = P2
                        smw_steps += 1
                        smw_calls += calls
                    except kernel.SingularDowndate:
                        model.P = kernel.sym_inverse(kernel.gram(X))
                        model.smw_calls_since_refresh = 0
                        sample = TripleSample(int(i), int(j), int(k), int(yy[s_idx]))
                        losses.bpr_step(model, sample, mode)
                        P = model.P
                        smw_steps = 1
                        smw_calls = model.smw_calls_since_refresh
                    if smw_steps >= refresh_period:
                        P = kernel.sym_inverse(kernel.gram(X))
                        smw_steps = 0
                        smw_calls = 0
            done += 1
            if done >= next_trace:
                model.P = P
                model.smw_calls_since_refresh = smw_calls
                emit(done)
                next_trace += trace_every
    model.P = P
    model.smw_calls_since_refresh = smw_calls
