"""Synthetic ground truths with controlled spectra and noise.

Generators are pure: everything is a deterministic function of its seed.
Condition numbers are exact by construction (the spectrum is prescribed);
quantities that depend on the random draw, like the conditioning of a
sampled point cloud, vary by seed and are only pinned to ranges in tests.
"""

import math

import numpy as np

from . import losses


def _orthonormal_columns(d: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """d-by-r matrix with orthonormal columns from the Gaussian ensemble."""
    A = rng.standard_normal((d, r))
    Q, R = np.linalg.qr(A)
    # Fix the QR sign ambiguity so the distribution is Haar and reproducible.
    Q *= np.sign(np.diag(R))
    return Q


def gen_low_rank_factor(d: int, spectrum, seed: int = 0) -> np.ndarray:
    """Random d-by-r factor Z whose Gram matrix Z Z^T has the given spectrum.

    spectrum lists the r positive eigenvalues in descending order; the
    column space is a uniformly random r-dimensional subspace.
    """
    s = np.asarray(spectrum, dtype=float)
    if s.ndim != 1 or len(s) > d:
        raise ValueError("spectrum must be a 1-d list with at most d entries")
    if np.any(s <= 0) or np.any(np.diff(s) > 0):
        raise ValueError("spectrum must be positive and descending")
    U = _orthonormal_columns(d, len(s), np.random.default_rng(seed))
    return U * np.sqrt(s)


def gen_low_rank(d: int, spectrum, seed: int = 0) -> np.ndarray:
    """Random symmetric PSD matrix U diag(spectrum) U^T of rank len(spectrum).

    Shares its seed convention with gen_low_rank_factor: the returned matrix
    equals Z Z^T for Z = gen_low_rank_factor(d, spectrum, seed).
    """
    Z = gen_low_rank_factor(d, spectrum, seed)
    M = Z.dot(Z.T)
    M += M.T
    M *= 0.5
    return M


def gen_edm(
    n: int,
    side: float = 2.0,
    outlier_count: int = 0,
    outlier_shift: float = 10.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Random 3-d point cloud in a centered cube plus its squared-distance matrix.

    Points are uniform in [-side/2, side/2]^3; the first outlier_count points
    then have their first coordinate shifted by outlier_shift, which is what
    makes the point matrix ill-conditioned. Returns (points, D) with
    D[a, b] = ||p_a - p_b||^2.
    """
    if not 0 <= outlier_count <= n:
        raise ValueError("outlier_count must lie in [0, n]")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-side / 2.0, side / 2.0, size=(n, 3))
    pts[:outlier_count, 0] += outlier_shift
    sq = np.sum(pts * pts, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * pts.dot(pts.T)
    np.fill_diagonal(D, 0.0)
    D = np.maximum(D, 0.0)
    D = 0.5 * (D + D.T)
    return pts, D


def add_noise(M: np.ndarray, snr_db: float, seed: int = 0) -> np.ndarray:
    """Corrupt a symmetric matrix with symmetric white Gaussian noise.

    The noise matrix W is rescaled so the realized signal-to-noise ratio
    20 log10(||M||_F / ||W||_F) equals snr_db exactly. An infinite snr_db
    is the no-noise sentinel and returns a copy of M.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return M.copy()
    norm_M = float(np.linalg.norm(M))
    if norm_M == 0.0:
        raise ValueError("cannot set an SNR against a zero matrix")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal(M.shape)
    W = 0.5 * (W + W.T)
    W *= norm_M / float(np.linalg.norm(W)) * 10.0 ** (-snr_db / 20.0)
    return M + W


def rank_r_truncation(M: np.ndarray, r: int) -> np.ndarray:
    """Best rank-r approximation by zeroing all but the r largest eigenvalues.

    Eigenvalues are ranked by algebraic value (descending), matching the
    spectral definition used everywhere else in this package.
    """
    w, Q = np.linalg.eigh(M)
    w = w[::-1]
    Q = Q[:, ::-1]
    w_trunc = np.where(np.arange(len(w)) < r, w, 0.0)
    return (Q * w_trunc).dot(Q.T)


def noise_floor(M: np.ndarray, r: int, omega=None) -> float:
    """Mean squared gap between M and its best rank-r approximation over omega.

    This is the asymptote a rank-r fit converges to on noisy data:
    (1 / (2 |omega|)) * sum over sampled (i, j) of (M'_ij - M_ij)^2, with M'
    the rank-r eigentruncation. omega defaults to every matrix element.
    """
    if r > M.shape[0]:
        raise ValueError("r cannot exceed the matrix dimension")
    gap = rank_r_truncation(M, r) - M
    if omega is None:
        return float(np.sum(gap * gap)) / (2.0 * M.size)
    pairs = [(s.i, s.j) if hasattr(s, "i") else (s[0], s[1]) for s in omega]
    if not pairs:
        raise ValueError("omega must be nonempty")
    idx = np.array(pairs, dtype=np.int64)
    vals = gap[idx[:, 0], idx[:, 1]]
    return float(np.sum(vals * vals)) / (2.0 * len(pairs))


def one_bit_targets(M: np.ndarray) -> np.ndarray:
    """Elementwise logistic transform: the ideal hit-rate matrix for 1-bit data."""
    return losses.sigmoid(np.asarray(M, dtype=float))
