"""Per-sample stochastic update rules.

Four losses share the same skeleton: read the sampled rows, form a scalar
residual, move the touched rows against the residual, and (in scaled mode)
push the row changes into the cached preconditioner with one rank-1 update
or downdate per changed row. Plain mode is the same arithmetic with the
preconditioner replaced by the identity, leaving the cache untouched.

New rows are always computed from the pre-step rows. Steps are atomic: if a
downdate fails, the model is left exactly as it was so the caller can
refresh the preconditioner and retry.
"""

import math
from typing import NamedTuple

import numpy as np

from . import kernel
from .model import FactorModel


class DegenerateSample(Exception):
    """Sample carries no information for its loss (e.g. a diagonal distance)."""


class ElementSample(NamedTuple):
    """One observed matrix element: value is M_ij, D_ij or y_ij by loss."""

    i: int
    j: int
    value: float


class TripleSample(NamedTuple):
    """One ranking observation: y = 1 iff item i is closer to j than to k."""

    i: int
    j: int
    k: int
    y: int


class StepMode(NamedTuple):
    """Whether steps are preconditioned, and the learning rate."""

    scaled: bool
    alpha: float


def sigmoid(z):
    """Numerically stable logistic function, for scalars or arrays."""
    if isinstance(z, np.ndarray):
        out = np.empty(z.shape, dtype=float)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def _commit_pair(model: FactorModel, i: int, j: int, xi_new, xj_new, scaled: bool):
    """Write two changed rows and fold the change into the cache.

    The update direction (adding new rows) is applied before the downdate
    direction (removing old rows) so every intermediate stays positive
    definite; a SingularDowndate from drift propagates with the model
    unmodified.
    """
    X = model.X
    if scaled:
        P = kernel.smw_add(model.P, xi_new)
        if i == j:
            P = kernel.smw_sub(P, X[i])
            model.smw_calls_since_refresh += 2
        else:
            P = kernel.smw_add(P, xj_new)
            P = kernel.smw_sub(P, X[i])
            P = kernel.smw_sub(P, X[j])
            model.smw_calls_since_refresh += 4
        model.P = P
    X[i] = xi_new
    if i != j:
        X[j] = xj_new


def rmse_step(model: FactorModel, s: ElementSample, mode: StepMode) -> FactorModel:
    """One stochastic step of the squared-element loss at sample (i, j, M_ij).

    Moves rows i and j against the residual x_i^T x_j - M_ij; a diagonal
    sample (i == j) applies the combined two-term update to its single row.
    """
    X, P = model.X, model.P
    i, j = s.i, s.j
    xi, xj = X[i], X[j]
    res = xi.dot(xj) - s.value
    a = mode.alpha * res
    if a == 0.0:
        return model
    if i == j:
        step = (2.0 * a) * (P.dot(xi) if mode.scaled else xi)
        _commit_pair(model, i, j, xi - step, None, mode.scaled)
    elif mode.scaled:
        xi_new = xi - a * P.dot(xj)
        xj_new = xj - a * P.dot(xi)
        _commit_pair(model, i, j, xi_new, xj_new, True)
    else:
        xi_new = xi - a * xj
        xj_new = xj - a * xi
        X[i] = xi_new
        X[j] = xj_new
    return model


def xent_step(model: FactorModel, s: ElementSample, mode: StepMode) -> FactorModel:
    """One stochastic step of the elementwise cross-entropy (1-bit) loss.

    Identical to rmse_step except the residual is sigmoid(x_i^T x_j) - y_ij,
    with y_ij in [0, 1].
    """
    X, P = model.X, model.P
    i, j = s.i, s.j
    xi, xj = X[i], X[j]
    res = sigmoid(xi.dot(xj)) - s.value
    a = mode.alpha * res
    if a == 0.0:
        return model
    if i == j:
        step = (2.0 * a) * (P.dot(xi) if mode.scaled else xi)
        _commit_pair(model, i, j, xi - step, None, mode.scaled)
    elif mode.scaled:
        xi_new = xi - a * P.dot(xj)
        xj_new = xj - a * P.dot(xi)
        _commit_pair(model, i, j, xi_new, xj_new, True)
    else:
        xi_new = xi - a * xj
        xj_new = xj - a * xi
        X[i] = xi_new
        X[j] = xj_new
    return model


def edm_step(model: FactorModel, s: ElementSample, mode: StepMode) -> FactorModel:
    """One stochastic step of the pairwise squared-distance loss.

    The sampled value is D_ij = ||p_i - p_j||^2; the residual indexes three
    Gram entries, and both rows move along +/- P (x_i - x_j). Diagonal
    samples are rejected: D_ii = 0 always, so they carry no information.
    """
    if s.i == s.j:
        raise DegenerateSample("distance sample with i == j carries no information")
    X, P = model.X, model.P
    i, j = s.i, s.j
    xi, xj = X[i], X[j]
    diff = xi - xj
    res = diff.dot(diff) - s.value
    a = mode.alpha * res
    if a == 0.0:
        return model
    step = a * (P.dot(diff) if mode.scaled else diff)
    xi_new = xi - step
    xj_new = xj + step
    if mode.scaled:
        _commit_pair(model, i, j, xi_new, xj_new, True)
    else:
        X[i] = xi_new
        X[j] = xj_new
    return model


def bpr_step(model: FactorModel, t: TripleSample, mode: StepMode) -> FactorModel:
    """One stochastic step of the pairwise logistic ranking loss.

    With z = x_i^T (x_j - x_k) and residual sigmoid(z) - y, row i moves
    along -P(x_j - x_k) and rows j, k along -/+ P x_i. When i collides with
    j or k the colliding row receives the sum of its two updates, both
    computed from pre-step rows.
    """
    if t.j == t.k:
        raise DegenerateSample("ranking triple with j == k carries no information")
    X, P = model.X, model.P
    i, j, k = t.i, t.j, t.k
    xi, xj, xk = X[i], X[j], X[k]
    diff = xj - xk
    res = sigmoid(xi.dot(diff)) - t.y
    a = mode.alpha * res
    if a == 0.0:
        return model
    pdiff = P.dot(diff) if mode.scaled else diff
    pxi = P.dot(xi) if mode.scaled else xi

    if i == j:
        xi_new = xi - a * pdiff - a * pxi
        xk_new = xk + a * pxi
        if mode.scaled:
            _commit_pair(model, i, k, xi_new, xk_new, True)
        else:
            X[i] = xi_new
            X[k] = xk_new
    elif i == k:
        xi_new = xi - a * pdiff + a * pxi
        xj_new = xj - a * pxi
        if mode.scaled:
            _commit_pair(model, i, j, xi_new, xj_new, True)
        else:
            X[i] = xi_new
            X[j] = xj_new
    else:
        xi_new = xi - a * pdiff
        xj_new = xj - a * pxi
        xk_new = xk + a * pxi
        if mode.scaled:
            P_new = kernel.smw_add(model.P, xi_new)
            P_new = kernel.smw_add(P_new, xj_new)
            P_new = kernel.smw_add(P_new, xk_new)
            P_new = kernel.smw_sub(P_new, xi)
            P_new = kernel.smw_sub(P_new, xj)
            P_new = kernel.smw_sub(P_new, xk)
            model.P = P_new
            model.smw_calls_since_refresh += 6
        X[i] = xi_new
        X[j] = xj_new
        X[k] = xk_new
    return model


def np_step(x: np.ndarray, t: TripleSample, alpha: float) -> np.ndarray:
    """One step of the non-personalized scalar ranking baseline, in place.

    Scores live in a length-d vector; only entries j and k move, each
    rescaled by the residual sigmoid(x_j - x_k) - y. Note the update
    multiplies the residual by the entries themselves, so it is
    sign-preserving and multiplicative rather than a plain logistic
    gradient step.
    """
    if t.j == t.k:
        raise DegenerateSample("ranking triple with j == k carries no information")
    j, k = t.j, t.k
    res = sigmoid(x[j] - x[k]) - t.y
    a = alpha * res
    if a == 0.0:
        return x
    xj_new = x[j] - a * x[j]
    xk_new = x[k] + a * x[k]
    x[j] = xj_new
    x[k] = xk_new
    return x
