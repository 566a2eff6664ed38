"""Lock-free multi-worker training over a shared factor matrix.

Workers apply the per-sample step rules directly to the shared X with no
locks anywhere in the step path, relying on the low probability that two
in-flight steps touch the same rows. Each worker keeps a private copy of
the preconditioner and resynchronizes it from a point-in-time read of X,
either on a fixed step interval or as soon as it drifts too far from the
coordinator's reference copy. A coordinator thread publishes that
reference, samples trace rows at wall-clock cadence, and computes the
final metrics only after every worker has stopped.

Row updates interleave arbitrarily across workers; individual float64
writes are atomic at the word level, and convergence is asserted
statistically, not bitwise. A single-worker run delegates to the
single-threaded driver and is exactly reproducible.
"""

import threading
import time
from dataclasses import dataclass

import numpy as np

from . import engine, evaluate, kernel, losses, model as model_mod
from .engine import Dataset, NonFiniteError, RunConfig
from .evaluate import Trace, TraceRow
from .losses import StepMode


@dataclass
class ParallelConfig:
    """Worker count and preconditioner resynchronization policy."""

    workers: int = 1
    resync_interval: int = 1000
    divergence_threshold: float = 0.1
    collect_stats: bool = False

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.resync_interval < 1:
            raise ValueError("resync_interval must be >= 1")
        if self.divergence_threshold <= 0:
            raise ValueError("divergence_threshold must be positive")


@dataclass
class ParallelStats:
    """Instrumentation from one parallel run."""

    steps: int = 0
    collisions: int = 0
    resyncs: int = 0


def precond_divergence(P_local: np.ndarray, P_reference: np.ndarray) -> float:
    """Relative Frobenius distance between two preconditioner copies."""
    return float(
        np.linalg.norm(P_local - P_reference) / np.linalg.norm(P_reference)
    )


class _Shared:
    """State visible to every worker; all fields are written lock-free."""

    def __init__(self, X, P_ref, workers):
        self.X = X
        self.P_ref = P_ref
        self.abort = False
        self.diverged = False
        self.error = None
        self.done = [0] * workers
        self.inflight = [None] * workers
        self.collisions = [0] * workers
        self.resyncs = [0] * workers

    def total_done(self) -> int:
        return sum(self.done)


def _worker(wid, shared, dataset, mode, pconfig, n_steps, seed):
    try:
        with np.errstate(all="ignore"):
            _worker_loop(wid, shared, dataset, mode, pconfig, n_steps, seed)
    except BaseException as exc:  # propagate through the coordinator
        shared.error = exc
        shared.abort = True


def _worker_loop(wid, shared, dataset, mode, pconfig, n_steps, seed):
    X = shared.X
    wm = model_mod.FactorModel(X=X, P=shared.P_ref.copy())
    ii, jj, kk, vals = dataset.ii, dataset.jj, dataset.kk, dataset.values
    is_triple = kk is not None
    if is_triple:
        step_fn = losses.bpr_step
    else:
        step_fn = {
            "rmse": losses.rmse_step,
            "xent": losses.xent_step,
            "edm": losses.edm_step,
        }[dataset.kind]
    rng = np.random.default_rng(seed)
    scaled = mode.scaled
    watch = pconfig.collect_stats
    threshold = pconfig.divergence_threshold
    resync_interval = pconfig.resync_interval
    since_resync = 0
    done = 0
    while done < n_steps:
        idx = rng.integers(0, dataset.n, size=min(4096, n_steps - done))
        for s_idx in idx:
            if shared.abort:
                return
            if is_triple:
                s = losses.TripleSample(
                    int(ii[s_idx]), int(jj[s_idx]), int(kk[s_idx]), int(vals[s_idx])
                )
                rows = (s.i, s.j, s.k)
            else:
                s = losses.ElementSample(int(ii[s_idx]), int(jj[s_idx]), float(vals[s_idx]))
                rows = (s.i, s.j)
            if watch:
                shared.inflight[wid] = rows
                for other, busy in enumerate(shared.inflight):
                    if other != wid and busy is not None and not set(busy).isdisjoint(rows):
                        shared.collisions[wid] += 1
                        break
            try:
                step_fn(wm, s, mode)
            except kernel.SingularDowndate:
                wm.P = kernel.sym_inverse(kernel.gram(X))
                wm.smw_calls_since_refresh = 0
                shared.resyncs[wid] += 1
                step_fn(wm, s, mode)
            for row in rows:
                if not np.isfinite(X[row]).all():
                    shared.diverged = True
                    shared.abort = True
                    return
            done += 1
            shared.done[wid] = done
            if scaled:
                since_resync += 1
                if (
                    since_resync >= resync_interval
                    or precond_divergence(wm.P, shared.P_ref) > threshold
                ):
                    try:
                        wm.P = kernel.sym_inverse(kernel.gram(X))
                    except kernel.NotPositiveDefinite:
                        pass  # torn read during a concurrent write; retry later
                    else:
                        since_resync = 0
                        shared.resyncs[wid] += 1
    shared.inflight[wid] = None


def run_parallel(
    model: model_mod.FactorModel,
    dataset: Dataset,
    config: RunConfig,
    pconfig: ParallelConfig,
):
    """Train with ``pconfig.workers`` lock-free workers; returns (model, trace).

    The total number of steps equals the single-threaded budget for the
    same config, split across workers with independently seeded sample
    streams. With one worker this is exactly ``engine.run``.
    """
    if pconfig.workers == 1:
        return engine.run(model, dataset, config)
    if model.d != dataset.d:
        raise ValueError(f"model dimension {model.d} != dataset dimension {dataset.d}")

    total = int(round(config.epochs * dataset.n))
    trace_every = config.trace_every or dataset.n
    base, extra = divmod(total, pconfig.workers)
    budgets = [base + (1 if w < extra else 0) for w in range(pconfig.workers)]
    seeds = np.random.SeedSequence(config.seed).spawn(pconfig.workers)

    X = model.X
    shared = _Shared(X, model.P.copy(), pconfig.workers)
    mode = StepMode(config.scaled, config.alpha)
    trace = Trace()
    t0 = time.perf_counter()

    def emit(step: int) -> None:
        snapshot = X.copy()
        trace.append(
            TraceRow(
                step=step,
                epoch_frac=step / dataset.n,
                train_loss=engine.training_loss(snapshot, dataset),
                auc=(
                    None
                    if config.eval_set is None
                    else evaluate.auc(snapshot, config.eval_set)
                ),
                g_max=(
                    float(np.max(model_mod.coherence_profile(snapshot)))
                    if config.record_g_max
                    else None
                ),
                wall_ms=int((time.perf_counter() - t0) * 1000),
            )
        )

    emit(0)
    threads = [
        threading.Thread(
            target=_worker,
            args=(w, shared, dataset, mode, pconfig, budgets[w], seeds[w]),
            daemon=True,
        )
        for w in range(pconfig.workers)
    ]
    for th in threads:
        th.start()

    last_emitted = 0
    while any(th.is_alive() for th in threads):
        time.sleep(0.005)
        if config.scaled:
            try:
                shared.P_ref = kernel.sym_inverse(kernel.gram(X.copy()))
            except kernel.NotPositiveDefinite:
                pass
        done = shared.total_done()
        if done - last_emitted >= trace_every and done < total and not shared.abort:
            if np.isfinite(X).all():
                emit(done)
                last_emitted = done
    for th in threads:
        th.join()

    if shared.error is not None:
        raise shared.error
    step_now = shared.total_done()
    if shared.diverged or not np.isfinite(X).all():
        step = max(step_now, last_emitted + 1)
        trace.append(
            TraceRow(step, step / dataset.n, float("nan"), None, None,
                     int((time.perf_counter() - t0) * 1000))
        )
        trace.diverged_at = step
        raise NonFiniteError(step, trace)

    # Full quiesce: exact cache refresh, then final metrics.
    model.P = kernel.sym_inverse(kernel.gram(X))
    model.smw_calls_since_refresh = 0
    if not trace.rows or trace.rows[-1].step != total:
        emit(total)
    if pconfig.collect_stats:
        trace.parallel_stats = ParallelStats(
            steps=step_now,
            collisions=sum(shared.collisions),
            resyncs=sum(shared.resyncs),
        )
    return model, trace
