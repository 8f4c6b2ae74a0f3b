"""Dense matrix primitives and proximal operators.

Matrices are plain 2-D ``float64`` arrays; columns hold vectorized frames.
"""

from typing import NamedTuple

import numpy as np

# relative floor below which a singular value counts as zero
RANK_EPS = 1e-12


class SvdError(RuntimeError):
    """Raised when the SVD iteration fails to converge."""


class SvdFactors(NamedTuple):
    U: np.ndarray
    K: np.ndarray
    V: np.ndarray


def as_matrix(Q, name="Q"):
    """Validate and return `Q` as a finite 2-D float64 array."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] < 1 or Q.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise ValueError(f"{name} contains non-finite entries")
    return Q


def _check_tau(tau):
    tau = float(tau)
    if not np.isfinite(tau) or tau < 0:
        raise ValueError(f"threshold must be finite and nonnegative, got {tau}")
    return tau


def soft(q, tau):
    """Scalar soft thresholding, ``sign(q) * max(|q| - tau, 0)``."""
    tau = _check_tau(tau)
    q = float(q)
    if not np.isfinite(q):
        raise ValueError("soft: input must be finite")
    mag = max(abs(q) - tau, 0.0)
    if mag == 0.0:
        return 0.0
    return mag if q > 0 else -mag


def soft_matrix(Q, tau):
    """Elementwise soft thresholding of a matrix."""
    tau = _check_tau(tau)
    Q = as_matrix(Q)
    out = np.sign(Q) * np.maximum(np.abs(Q) - tau, 0.0)
    # normalize -0.0 so results are bit-comparable
    out[out == 0] = 0.0
    return out


def svd(Q):
    """Thin SVD ``Q = U diag(K) V^T`` with a fixed column sign convention.

    The first nonzero entry of every column of U is made nonnegative (the
    matching column of V is flipped along with it).
    """
    Q = as_matrix(Q)
    try:
        U, K, Vt = np.linalg.svd(Q, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"SVD did not converge for {Q.shape} matrix: {exc}") from exc
    V = Vt.T.copy()
    for j in range(U.shape[1]):
        nz = np.flatnonzero(U[:, j])
        if nz.size and U[nz[0], j] < 0:
            U[:, j] = -U[:, j]
            V[:, j] = -V[:, j]
    return SvdFactors(U, K, V)


def svt(Q, tau):
    """Singular value thresholding: the prox of ``tau * ||.||_*`` at `Q`."""
    tau = _check_tau(tau)
    U, K, V = svd(Q)
    k = np.maximum(K - tau, 0.0)
    keep = k > 0
    if not np.any(keep):
        return np.zeros_like(Q, dtype=np.float64)
    return (U[:, keep] * k[keep]) @ V[:, keep].T


def rank(Q):
    K = svd(Q).K
    if K[0] == 0:
        return 0
    return int(np.count_nonzero(K > RANK_EPS * K[0]))


def nuclear_norm(Q):
    return float(np.sum(svd(Q).K))


def l1_norm(Q):
    return float(np.sum(np.abs(as_matrix(Q))))


def frobenius_norm(Q):
    return float(np.sqrt(np.sum(as_matrix(Q) ** 2)))
