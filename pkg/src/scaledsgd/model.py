"""Factor model state and full-batch diagnostics.

The model is a d-by-r factor matrix X together with a cached r-by-r
preconditioner P tracking (X^T X)^{-1}. This module holds the exact
(full-batch) quantities that the stochastic iterations are measured
against: the squared recovery loss and its gradient, the unbiased
single-sample gradient operator, row-coherence functions, local norms,
and structured numeric checkers for the descent inequalities that make
the preconditioned iteration immune to ill-conditioning.

Everything here is desk-scale: dense matrices, O(d^2 r) full-batch
evaluations, dense symmetric eigensolvers.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernel


class RankDeficient(Exception):
    """A matrix required to have rank >= r does not."""


# ---------------------------------------------------------------------------
# Model state


@dataclass
class FactorModel:
    """Learned factor matrix X plus its cached Gram-inverse preconditioner.

    P approximates (X^T X)^{-1}; steps maintain it with rank-1 updates and
    exact refreshes reset accumulated float drift every ``refresh_period``
    update-bearing steps.
    """

    X: np.ndarray
    P: np.ndarray
    smw_calls_since_refresh: int = 0
    refresh_period: int = field(default=0)  # 0 means "caller decides"

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def r(self) -> int:
        return self.X.shape[1]

    def copy(self) -> "FactorModel":
        return FactorModel(
            self.X.copy(), self.P.copy(), self.smw_calls_since_refresh, self.refresh_period
        )


def init_gaussian(
    d: int,
    r: int,
    sigma: float = 1.0,
    seed: int = 0,
    approx_p0: bool = False,
) -> FactorModel:
    """Gaussian initialization: rows of X drawn i.i.d. from N(0, sigma^2 I).

    By default P is the exact inverse of X^T X. With ``approx_p0`` the cache
    is instead seeded with sigma^2 * I, skipping the O(d r^2) pass over X.
    Note the shortcut is not the actual inverse at init (E[X^T X] is
    d * sigma^2 * I), so expect the first refresh to correct it.
    """
    if not (d >= r >= 1):
        raise ValueError(f"need d >= r >= 1, got d={d}, r={r}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    X = sigma * rng.standard_normal((d, r))
    if approx_p0:
        P = (sigma**2) * np.eye(r)
    else:
        P = kernel.sym_inverse(kernel.gram(X))
    return FactorModel(X=X, P=P)


def refresh_preconditioner(model: FactorModel) -> FactorModel:
    """Replace the cached P with the exact inverse of X^T X in place."""
    model.P = kernel.sym_inverse(kernel.gram(model.X))
    model.smw_calls_since_refresh = 0
    return model


# ---------------------------------------------------------------------------
# Full-batch oracles


def full_loss(X: np.ndarray, M: np.ndarray) -> float:
    """Squared Frobenius recovery loss: sum of ((X X^T - M)_ij)^2."""
    d = X.shape[0]
    if M.shape != (d, d):
        raise ValueError(f"M must be {d}x{d}, got {M.shape}")
    E = X.dot(X.T)
    E -= M
    return float(np.sum(E * E))


def full_grad(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Gradient of full_loss: the d-by-r matrix 4 (X X^T - M) X."""
    d = X.shape[0]
    if M.shape != (d, d):
        raise ValueError(f"M must be {d}x{d}, got {M.shape}")
    E = X.dot(X.T)
    E -= M
    return 4.0 * E.dot(X)


def sg(X: np.ndarray, M: np.ndarray, i: int, j: int) -> np.ndarray:
    """Single-sample gradient operator, unbiased for full_grad.

    Returns the dense d-by-r matrix 2 d^2 (x_i^T x_j - M_ij)(e_i x_j^T +
    e_j x_i^T); averaging over all d^2 index pairs reproduces full_grad
    exactly. Only rows i and j are nonzero (row i alone when i == j,
    receiving both terms).
    """
    d = X.shape[0]
    if not (0 <= i < d and 0 <= j < d):
        raise IndexError(f"indices ({i}, {j}) out of range for d={d}")
    c = 2.0 * d * d * (X[i].dot(X[j]) - M[i, j])
    out = np.zeros_like(X)
    out[i] += c * X[j]
    out[j] += c * X[i]
    return out


# ---------------------------------------------------------------------------
# Coherence and conditioning diagnostics


def coherence_g(X: np.ndarray, k: int) -> float:
    """Leverage score of row k: e_k^T X (X^T X)^{-1} X^T e_k, in [0, 1]."""
    G = kernel.gram(X)
    P = kernel.sym_inverse(G)
    xk = X[k]
    return float(xk.dot(P).dot(xk))


def coherence_profile(X: np.ndarray) -> np.ndarray:
    """All d leverage scores at once; sums to r for full-rank X."""
    P = kernel.sym_inverse(kernel.gram(X))
    return np.einsum("ij,jk,ik->i", X, P, X)


def coherence_h(X: np.ndarray, k: int) -> float:
    """Squared Euclidean norm of row k."""
    xk = X[k]
    return float(xk.dot(xk))


def mu_coherence(Z: np.ndarray) -> float:
    """Incoherence constant of a factor matrix, in [1, d/r].

    Equals (d/r) * max_k of the row leverage scores; 1 for dense matrices
    with orthonormal columns and equal row norms, d/r when the row space
    concentrates on a single coordinate.
    """
    d, r = Z.shape
    return (d / r) * float(np.max(coherence_profile(Z)))


def condition_number_psd(M: np.ndarray, r: int) -> float:
    """Ratio of the largest to the r-th largest eigenvalue of a PSD matrix."""
    w = np.linalg.eigvalsh(np.asarray(M, dtype=float))
    lam = w[::-1]
    lam_r = lam[r - 1]
    # Eigenvalues below the dense-solver noise floor count as zero.
    if lam_r <= lam[0] * len(lam) * np.finfo(float).eps:
        raise RankDeficient(f"eigenvalue {r} is {lam_r:.3e}; matrix has rank < {r}")
    return float(lam[0] / lam_r)


# ---------------------------------------------------------------------------
# Local norms


def local_norm(V: np.ndarray, X: np.ndarray) -> float:
    """Norm of V after right-scaling by (X^T X)^{1/2}: ||V (X^T X)^{1/2}||_F.

    Computed as sqrt(tr(V^T V G)) with G = X^T X, avoiding a matrix square
    root.
    """
    G = kernel.gram(X)
    val = float(np.sum(V.dot(G) * V))
    return float(np.sqrt(max(val, 0.0)))


def local_dual_norm(V: np.ndarray, X: np.ndarray) -> float:
    """Dual local norm ||V (X^T X)^{-1/2}||_F = sqrt(tr(V^T V G^{-1}))."""
    G = kernel.gram(X)
    P = kernel.sym_inverse(G)
    val = float(np.sum(V.dot(P) * V))
    return float(np.sqrt(max(val, 0.0)))


def grad_g(X: np.ndarray, k: int) -> np.ndarray:
    """Gradient of the row-k leverage score coherence_g(X, k).

    Equals 2 [I - X (X^T X)^{-1} X^T] e_k e_k^T X (X^T X)^{-1}, a rank-1
    d-by-r matrix; identically zero when X is square (the projector
    vanishes).
    """
    P = kernel.sym_inverse(kernel.gram(X))
    Pxk = P.dot(X[k])
    u = -X.dot(Pxk)
    u[k] += 1.0
    return 2.0 * np.outer(u, Pxk)


# ---------------------------------------------------------------------------
# Descent-inequality checkers


@dataclass(frozen=True)
class TheoryRegion:
    """Constants describing the local region where the descent bounds hold.

    rho is the ball radius (as a fraction of the smallest ground-truth
    eigenvalue), C bounds trial directions relative to sqrt(f), and the
    remaining constants are derived: the loss cap f_max, the coherence cap
    g_max, the coherence decrement rate zeta, and the curvature constant L_X.
    """

    rho: float
    f_max: float
    g_max: float
    zeta: float
    C: float
    L_X: float

    def __post_init__(self):
        if not 0.0 < self.rho < 0.5:
            raise ValueError("rho must lie in (0, 1/2)")
        if not 0.0 < self.zeta < 1.0:
            raise ValueError("zeta must lie in (0, 1)")
        if self.L_X < 6.0:
            raise ValueError("L_X must be >= 6")

    @classmethod
    def for_ground_truth(cls, Z: np.ndarray, rho: float = 0.1, C: float = 1.0) -> "TheoryRegion":
        """Derive the region constants from a ground-truth factor matrix."""
        d, r = Z.shape
        lam_min = float(np.linalg.eigvalsh(kernel.gram(Z))[0])
        if lam_min <= 0:
            raise RankDeficient("ground-truth factor is rank deficient")
        mu = mu_coherence(Z)
        return cls(
            rho=rho,
            f_max=(rho * lam_min) ** 2,
            g_max=16.0 / (1.0 - 2.0 * rho) ** 2 * mu * r / d,
            zeta=(1.0 - 2.0 * rho) / (1.0 - rho),
            C=C,
            L_X=6.0 + 8.0 * C + 2.0 * C * C,
        )


# Plain float slack so exact-arithmetic inequalities are not failed on
# rounding noise alone.
_RTOL = 1e-9
_ATOL = 1e-12


def _leq(lhs: float, rhs: float, scale: float = 1.0) -> bool:
    return lhs <= rhs + _RTOL * abs(rhs) + _ATOL * max(1.0, scale)


@dataclass
class DescentReport:
    """Outcome of one numeric check of the loss descent inequalities."""

    in_region: bool
    reason: str = ""
    taylor_ok: bool | None = None
    lower_ok: bool | None = None
    upper_ok: bool | None = None
    f_value: float = 0.0
    dual_grad_sq: float = 0.0

    @property
    def ok(self) -> bool:
        return self.in_region and bool(self.taylor_ok and self.lower_ok and self.upper_ok)


def check_function_descent(
    X: np.ndarray, Z: np.ndarray, V: np.ndarray, region: TheoryRegion
) -> DescentReport:
    """Numerically check the two loss-descent inequalities at (X, Z, V).

    Verifies (a) the second-order model bound
    |f(X+V) - f(X) - <grad f(X), V>| <= (L_X / 2) ||V||_X^2 and (b) the
    two-sided gradient-domination bound 13 f(X) <= (||grad f(X)||_X*)^2
    <= 16 f(X). Both are only claimed inside the rho-ball around the
    ground truth and for ||V||_X <= C sqrt(f(X)); out-of-region inputs
    produce a report saying so instead of a verdict.
    """
    M = Z.dot(Z.T)
    fX = full_loss(X, M)
    err_norm = np.sqrt(fX)
    lam_min_Z = float(np.linalg.eigvalsh(kernel.gram(Z))[0])
    if err_norm > region.rho * lam_min_Z * (1.0 + _RTOL):
        return DescentReport(
            False, f"||XX^T - ZZ^T||_F = {err_norm:.3e} exceeds rho * lam_min = "
            f"{region.rho * lam_min_Z:.3e}", f_value=fX,
        )
    v_norm = local_norm(V, X)
    if v_norm > region.C * np.sqrt(fX) * (1.0 + _RTOL) + _ATOL:
        return DescentReport(
            False, f"||V||_X = {v_norm:.3e} exceeds C sqrt(f) = "
            f"{region.C * np.sqrt(fX):.3e}", f_value=fX,
        )

    G = full_grad(X, M)
    f_new = full_loss(X + V, M)
    linear = float(np.sum(G * V))
    taylor_ok = _leq(abs(f_new - fX - linear), 0.5 * region.L_X * v_norm**2, scale=fX)

    dual_sq = local_dual_norm(G, X) ** 2
    lower_ok = _leq(13.0 * fX, dual_sq, scale=fX)
    upper_ok = _leq(dual_sq, 16.0 * fX, scale=fX)
    return DescentReport(True, "", taylor_ok, lower_ok, upper_ok, fX, dual_sq)


@dataclass
class CoherenceReport:
    """Outcome of one numeric check of the coherence descent inequalities."""

    in_region: bool
    reason: str = ""
    taylor_ok: bool | None = None
    alignment_ok: bool | None = None
    g_value: float = 0.0
    alignment_lhs: float = 0.0
    alignment_rhs: float = 0.0

    @property
    def ok(self) -> bool:
        return self.in_region and bool(self.taylor_ok and self.alignment_ok)


def check_coherence_descent(
    X: np.ndarray, Z: np.ndarray, k: int, V: np.ndarray, region: TheoryRegion
) -> CoherenceReport:
    """Numerically check the row-k coherence descent inequalities.

    Verifies (a) the second-order model bound g_k(X+V) <= g_k(X) +
    <V, grad g_k(X)> + 5 (||V||_X*)^2 / (1 - 2 ||V||_X*), and (b) that the
    scaled loss gradient aligns with the coherence gradient:
    <grad g_k(X), grad f(X) (X^T X)^{-1}> >= zeta g_k(X) -
    sqrt(g_k(X) g_k(Z)) / (1 - rho). Requires the same rho-ball as the
    loss checks plus ||V||_X* < 1/2.
    """
    M = Z.dot(Z.T)
    fX = full_loss(X, M)
    lam_min_Z = float(np.linalg.eigvalsh(kernel.gram(Z))[0])
    if np.sqrt(fX) > region.rho * lam_min_Z * (1.0 + _RTOL):
        return CoherenceReport(
            False, f"||XX^T - ZZ^T||_F = {np.sqrt(fX):.3e} exceeds rho * lam_min = "
            f"{region.rho * lam_min_Z:.3e}",
        )
    v_dual = local_dual_norm(V, X)
    if v_dual >= 0.5:
        return CoherenceReport(False, f"||V||_X* = {v_dual:.3e} >= 1/2")

    gk = coherence_g(X, k)
    Gk = grad_g(X, k)
    g_new = coherence_g(X + V, k)
    linear = float(np.sum(V * Gk))
    remainder = 5.0 * v_dual**2 / (1.0 - 2.0 * v_dual)
    taylor_ok = _leq(abs(g_new - gk - linear), remainder, scale=max(gk, 1.0))

    P = kernel.sym_inverse(kernel.gram(X))
    scaled_grad = full_grad(X, M).dot(P)
    lhs = float(np.sum(Gk * scaled_grad))
    rhs = region.zeta * gk - np.sqrt(gk * coherence_g(Z, k)) / (1.0 - region.rho)
    alignment_ok = _leq(rhs, lhs, scale=max(gk, 1.0))
    return CoherenceReport(True, "", taylor_ok, alignment_ok, gk, lhs, rhs)


def sg_dual_norms(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Dual local norm of the single-sample gradient for every index pair.

    Returns the d-by-d matrix whose (i, j) entry is ||SG(X)||_X* for the
    sample (i, j). Uses the closed form 2 d^2 |E_ij| sqrt(g_i + g_j)
    (with g_i + g_j read as 4 g_i when i == j), where E = X X^T - Z Z^T.
    """
    d = X.shape[0]
    E = X.dot(X.T) - Z.dot(Z.T)
    g = coherence_profile(X)
    pair = g[:, None] + g[None, :]
    np.fill_diagonal(pair, 4.0 * g)
    return 2.0 * d * d * np.abs(E) * np.sqrt(pair)


def check_sg_norm_bound(X: np.ndarray, Z: np.ndarray, g_max: float) -> bool:
    """Check ||SG(X)||_X* <= 8 d^2 sqrt(g_max) ||X X^T - Z Z^T||_F for all pairs.

    Only claimed when every row leverage score of X and of Z is at most
    g_max; raises ValueError if that precondition fails.
    """
    if float(np.max(coherence_profile(X))) > g_max * (1.0 + _RTOL):
        raise ValueError("max_i g_i(X) exceeds g_max; bound not applicable")
    if float(np.max(coherence_profile(Z))) > g_max * (1.0 + _RTOL):
        raise ValueError("max_i g_i(Z) exceeds g_max; bound not applicable")
    d = X.shape[0]
    err = np.linalg.norm(X.dot(X.T) - Z.dot(Z.T))
    bound = 8.0 * d * d * np.sqrt(g_max) * err
    worst = float(np.max(sg_dual_norms(X, Z)))
    return _leq(worst, bound, scale=bound)


# ---------------------------------------------------------------------------
# Randomized audit of the descent inequalities


def in_ball_perturbation(
    Z: np.ndarray, rho: float, rng: np.random.Generator, frac: float = 1.0
) -> np.ndarray:
    """Random X with ||X X^T - Z Z^T||_F = frac * rho * lam_min(Z^T Z).

    Scales a random Gaussian direction onto the stated sphere by bisection;
    frac = 1 lands on the ball boundary.
    """
    lam_min = float(np.linalg.eigvalsh(kernel.gram(Z))[0])
    target = frac * rho * lam_min
    if target == 0.0:
        return Z.copy()
    W = rng.standard_normal(Z.shape)
    M = Z.dot(Z.T)

    def err(t: float) -> float:
        Xt = Z + t * W
        return float(np.linalg.norm(Xt.dot(Xt.T) - M)) - target

    hi = target / np.linalg.norm(Z.dot(W.T) + W.dot(Z.T))
    while err(hi) < 0.0:
        hi *= 2.0
    lo = 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if err(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return Z + 0.5 * (lo + hi) * W


def scaled_direction(
    V: np.ndarray, X: np.ndarray, target: float, dual: bool
) -> np.ndarray:
    """Rescale V so its local (or dual local) norm at X equals target."""
    norm = local_dual_norm(V, X) if dual else local_norm(V, X)
    if norm == 0.0:
        return V
    return V * (target / norm)


@dataclass
class AuditResult:
    """Violation counts from a randomized audit of the descent bounds.

    The primary counters check the inequalities with their stated constants.
    The ``*_relaxed`` counters re-check the two domination bounds with the
    constants this audit measures to be the sharp ones (a factor-8 gradient
    domination floor instead of 13, and the alignment bound scaled by the
    factor 8 its own derivation carries); see the package notes on why the
    stated constants are violated by generic in-ball instances.
    """

    trials: int = 0
    function_taylor: int = 0
    function_lower: int = 0
    function_upper: int = 0
    coherence_taylor: int = 0
    coherence_alignment: int = 0
    sg_norm: int = 0
    sg_mean: int = 0
    function_lower_relaxed: int = 0
    coherence_alignment_relaxed: int = 0
    skipped: int = 0

    @property
    def total_violations(self) -> int:
        return (
            self.function_taylor
            + self.function_lower
            + self.function_upper
            + self.coherence_taylor
            + self.coherence_alignment
            + self.sg_norm
            + self.sg_mean
        )


def audit_descent_bounds(
    d: int = 20,
    r: int = 3,
    kappa: float = 1.0,
    trials: int = 200,
    rho: float = 0.1,
    C: float = 1.0,
    seed: int = 0,
) -> AuditResult:
    """Randomized audit of every descent inequality at one condition number.

    Each trial draws a ground truth with the requested condition number, a
    random iterate inside the rho-ball (uniform radius fraction, including a
    boundary trial), and admissible directions V, then counts violations of
    the loss and coherence inequalities, the single-sample gradient norm
    bound, and the exactness of the averaged single-sample gradient.
    """
    from . import datagen  # local import; datagen depends on nothing here

    rng = np.random.default_rng(seed)
    res = AuditResult(trials=trials)
    for trial in range(trials):
        spectrum = np.geomspace(1.0, 1.0 / kappa, r)
        Z = datagen.gen_low_rank_factor(d, spectrum, seed=int(rng.integers(2**31)))
        region = TheoryRegion.for_ground_truth(Z, rho=rho, C=C)
        frac = 1.0 if trial == 0 else float(rng.uniform(0.05, 1.0))
        X = in_ball_perturbation(Z, rho, rng, frac=frac)
        M = Z.dot(Z.T)
        fX = full_loss(X, M)

        V = scaled_direction(
            rng.standard_normal((d, r)), X,
            target=float(rng.uniform(0.0, 1.0)) * C * np.sqrt(fX), dual=False,
        )
        rep = check_function_descent(X, Z, V, region)
        if not rep.in_region:
            res.skipped += 1
            continue
        res.function_taylor += not rep.taylor_ok
        res.function_lower += not rep.lower_ok
        res.function_upper += not rep.upper_ok
        # Sharp domination floor: 8 cos^2(theta) with the angle bound the
        # rho-ball guarantees.
        floor = 8.0 * (1.0 - rho**2 / (2.0 * (1.0 - rho**2)))
        res.function_lower_relaxed += not _leq(floor * rep.f_value, rep.dual_grad_sq, rep.f_value)

        # Coherence checks run for every row: a generic direction and the
        # iteration's own scaled stochastic step. The alignment bound does
        # not depend on the direction, so it is counted once per row.
        P = kernel.sym_inverse(kernel.gram(X))
        i, j = rng.integers(0, d, size=2)
        step_dir = -sg(X, M, int(i), int(j)).dot(P)
        for k in range(d):
            for which, direction in enumerate((rng.standard_normal((d, r)), step_dir)):
                Vk = scaled_direction(
                    direction, X, target=float(rng.uniform(0.0, 0.9)) * 0.5, dual=True
                )
                crep = check_coherence_descent(X, Z, k, Vk, region)
                if not crep.in_region:
                    res.skipped += 1
                    continue
                res.coherence_taylor += not crep.taylor_ok
                if which == 0:
                    res.coherence_alignment += not crep.alignment_ok
                    res.coherence_alignment_relaxed += not _leq(
                        8.0 * crep.alignment_rhs, crep.alignment_lhs,
                        max(abs(crep.alignment_rhs), 1.0),
                    )

        g_cap = max(
            float(np.max(coherence_profile(X))),
            float(np.max(coherence_profile(Z))),
            region.g_max,
        )
        res.sg_norm += not check_sg_norm_bound(X, Z, g_cap)

    # Exactness of the averaged single-sample gradient, at a dimension small
    # enough to enumerate every pair.
    d_small = min(d, 8)
    for _ in range(min(trials, 20)):
        Xs = rng.standard_normal((d_small, r))
        Ms = rng.standard_normal((d_small, d_small))
        Ms = 0.5 * (Ms + Ms.T)
        avg = np.zeros_like(Xs)
        for i in range(d_small):
            for j in range(d_small):
                avg += sg(Xs, Ms, i, j)
        avg /= d_small * d_small
        G = full_grad(Xs, Ms)
        scale = max(1.0, float(np.linalg.norm(G)))
        res.sg_mean += float(np.linalg.norm(avg - G)) > 1e-12 * scale
    return res
