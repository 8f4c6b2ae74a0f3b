"""Robust PCA by proximal forward-backward splitting.

Solves::

    minimize_{L,S}  1/2 ||D - (L + S)||_F^2 + lambda_star ||L||_* + lambda_1 ||S||_1

The stacked variable ``X = [L; S]`` is kept as the pair ``(L, S)``; the
linear map ``A = [I, I]`` is applied implicitly as ``L + S``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import prox_ops

# largest singular value of A = [I, I] is sqrt(2)
MAX_ALPHA = 0.5


@dataclass(frozen=True)
class RpcaConfig:
    lambda_star: float = 1.0
    lambda_1: float = 5e-3
    alpha: float = 0.5
    max_iter: int = 5000
    tol: float = 1e-6

    def __post_init__(self):
        if not 0 < self.alpha <= MAX_ALPHA:
            raise ValueError(f"alpha must lie in (0, {MAX_ALPHA}], got {self.alpha}")
        for name in ("lambda_star", "lambda_1", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if int(self.max_iter) < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class LSDecomposition:
    L: np.ndarray
    S: np.ndarray
    iterations_run: int
    objective_history: list = field(default_factory=list)
    converged: bool = False


def objective(D, L, S, lambda_star, lambda_1):
    D = prox_ops.as_matrix(D, "D")
    L = prox_ops.as_matrix(L, "L")
    S = prox_ops.as_matrix(S, "S")
    if not D.shape == L.shape == S.shape:
        raise ValueError(f"shape mismatch: D{D.shape} L{L.shape} S{S.shape}")
    fit = 0.5 * prox_ops.frobenius_norm(D - (L + S)) ** 2
    return fit + lambda_star * prox_ops.nuclear_norm(L) + lambda_1 * prox_ops.l1_norm(S)


def step(D, L, S, cfg):
    """One forward-backward iteration; L and S both read the previous iterate."""
    G = cfg.alpha * (D - L - S)
    L_next = prox_ops.svt(L + G, cfg.alpha * cfg.lambda_star)
    S_next = prox_ops.soft_matrix(S + G, cfg.alpha * cfg.lambda_1)
    return L_next, S_next


def decompose(D, cfg=None, callback=None):
    """Split `D` into low-rank `L` and sparse `S`.

    Starts from ``L = S = 0`` and stops once
    ``||dL||_F + ||dS||_F <= tol * (1 + ||D||_F)`` or after ``max_iter``
    iterations. `callback(k, L, S)` is invoked after every iteration.
    """
    cfg = cfg or RpcaConfig()
    D = prox_ops.as_matrix(D, "D")
    L = np.zeros_like(D)
    S = np.zeros_like(D)
    threshold = cfg.tol * (1.0 + prox_ops.frobenius_norm(D))
    history = [objective(D, L, S, cfg.lambda_star, cfg.lambda_1)]
    converged = False
    k = 0
    while k < cfg.max_iter:
        L_next, S_next = step(D, L, S, cfg)
        change = np.linalg.norm(L_next - L) + np.linalg.norm(S_next - S)
        L, S = L_next, S_next
        k += 1
        history.append(objective(D, L, S, cfg.lambda_star, cfg.lambda_1))
        if callback is not None:
            callback(k, L, S)
        if change <= threshold:
            converged = True
            break
    return LSDecomposition(L, S, k, history, converged)


def fixed_point_residual(D, L, S, cfg):
    """Distances of L and S from their own forward-backward images."""
    L_next, S_next = step(D, L, S, cfg)
    return float(np.linalg.norm(L - L_next)), float(np.linalg.norm(S - S_next))
