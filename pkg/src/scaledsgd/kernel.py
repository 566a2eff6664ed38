"""Dense linear algebra on small r-by-r symmetric matrices.

Everything here operates on the preconditioner cache P, an r-by-r symmetric
positive definite matrix tracking (X^T X)^{-1} for a tall factor matrix X.
Rank-1 updates and downdates keep the cache current in O(r^2) time per call;
an exact dense inverse is used both to refresh the cache periodically and as
the oracle in tests.

r is expected to stay small (single digits in practice, <= 64 supported);
there are no sparse or blocked code paths.
"""

import numpy as np


class SingularDowndate(Exception):
    """Rank-1 downdate would make the tracked matrix (near-)singular.

    Callers should refresh the cache with an exact inverse and retry.
    """


class NotPositiveDefinite(Exception):
    """Dense factorization failed because the input is not SPD."""


def default_downdate_tol(P: np.ndarray) -> float:
    """Scale-relative guard threshold for downdates: 1e-12 * trace(P)."""
    return 1e-12 * float(np.trace(P))


def smw_add(P: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Rank-1 update of a cached inverse: returns (P^-1 + u u^T)^-1.

    Uses the closed form P - P u u^T P / (1 + u^T P u), which is always
    well defined for SPD P. The result is explicitly re-symmetrized to stop
    asymmetry drift over long update chains. P itself is not modified.
    """
    Pu = P.dot(u)
    out = P - np.multiply(Pu[:, None], Pu) * (1.0 / (1.0 + u.dot(Pu)))
    out += out.T
    out *= 0.5
    return out


def smw_sub(P: np.ndarray, u: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Rank-1 downdate of a cached inverse: returns (P^-1 - u u^T)^-1.

    Uses P + P u u^T P / (1 - u^T P u). Unlike the update direction, the
    denominator can vanish when u carries most of the tracked matrix's mass;
    raises SingularDowndate when 1 - u^T P u <= tol so the caller can fall
    back to an exact refresh. tol defaults to 1e-12 * trace(P).
    """
    Pu = P.dot(u)
    den = 1.0 - u.dot(Pu)
    if tol is None:
        tol = default_downdate_tol(P)
    if den <= tol:
        raise SingularDowndate(
            f"downdate denominator {den:.3e} <= tol {tol:.3e}; refresh required"
        )
    out = P + np.multiply(Pu[:, None], Pu) * (1.0 / den)
    out += out.T
    out *= 0.5
    return out


def sym_inverse(G: np.ndarray) -> np.ndarray:
    """Exact inverse of an SPD matrix via Cholesky factorization.

    Raises NotPositiveDefinite when the factorization fails. This is the
    refresh path for the preconditioner cache and the oracle the rank-1
    update chain is tested against.
    """
    G = np.asarray(G, dtype=float)
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    Linv = np.linalg.inv(L)
    out = Linv.T.dot(Linv)
    out += out.T
    out *= 0.5
    return out


def gram(X: np.ndarray) -> np.ndarray:
    """Gram matrix X^T X of a d-by-r factor matrix (d >= r)."""
    X = np.asarray(X, dtype=float)
    G = X.T.dot(X)
    G += G.T
    G *= 0.5
    return G
