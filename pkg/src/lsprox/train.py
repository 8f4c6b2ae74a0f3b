"""Unsupervised two-phase training of the network's sparse output.

Phase 1 minimizes ``lambda_star ||D - S(D)||_* + lambda_1 ||S(D)||_1`` with
Adam and subgradients. Phase 2 repeats a proximal refinement: snapshot the
current estimates ``L = D - S(D)``, ``S = S(D)``, then take one plain
gradient step on::

    lambda_star ||L + alpha (S - S(D))||_* + lambda_1 ||S(D) + alpha (S - S(D))||_1

where the norms backpropagate the prox residuals ``Q - svt(Q, tau)`` and
``Q - soft(Q, tau)``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import unet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Phase1Config:
    epochs: int = 2000
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_star: float = 1.0
    lambda_1: float = 5e-3

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.lambda_star < 0 or self.lambda_1 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class Phase2Config:
    iters: int = 3000
    lr: float = 3e-8
    alpha: float = 0.5
    tau_star: float = None
    tau_1: float = None
    # batch statistics in the differentiated forward; snapshots always use running stats
    bn_training: bool = True

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        for tau in (self.tau_star, self.tau_1):
            if tau is not None and tau < 0:
                raise ValueError("thresholds must be nonnegative")

    def thresholds(self, lambda_star, lambda_1):
        ts = self.alpha * lambda_star if self.tau_star is None else self.tau_star
        t1 = self.alpha * lambda_1 if self.tau_1 is None else self.tau_1
        return ts, t1


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class TrainResult:
    params: unet.NetworkParams
    history: list
    # (purpose, training flag) of every network forward, in order
    forwards: list = field(default_factory=list)


def _frames(D):
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 4 or D.shape[1] != 1:
        raise ValueError(f"expected frames of shape (n, 1, H, W), got {D.shape}")
    if not np.all(np.isfinite(D)):
        raise ValueError("frames contain non-finite values")
    return D


def output_loss(Dm, S, lambda_star, lambda_1):
    """``lambda_star ||Dm - S||_* + lambda_1 ||S||_1`` for a matrix node `S`."""
    nuc = ad.nuclear_loss(ad.sub(Dm, S))
    return ad.add(ad.scale(nuc, lambda_star), ad.scale(ad.l1_loss(S), lambda_1))


def loss_phase1(params, D, lambda_star, lambda_1, graph=None, leaves=None, training=True):
    """Phase-1 loss node for ``S = net(D)``."""
    D = _frames(D)
    graph = graph if graph is not None else ad.Graph()
    out = unet.forward(params, D, training=training, graph=graph, leaves=leaves)
    return output_loss(unet.to_matrix(D), unet.to_matrix(out), lambda_star, lambda_1)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new arrays, advances `state`."""
    state.t += 1
    t = state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(out[name])):
            raise TrainingError(f"Adam produced non-finite values in {name}")
    return out


def train_phase1(params, D, cfg, callback=None):
    """Full-batch Adam on the phase-1 loss for ``cfg.epochs`` epochs."""
    D = _frames(D)
    params = params.copy()
    state = AdamState()
    history, forwards = [], []
    for epoch in range(cfg.epochs):
        graph = ad.Graph()
        leaves = params.attach(graph)
        try:
            loss = loss_phase1(params, D, cfg.lambda_star, cfg.lambda_1, graph, leaves, training=True)
            forwards.append(("train", True))
            grads = graph.backward(loss)
        except FloatingPointError as exc:
            raise TrainingError(f"phase 1 epoch {epoch}: {exc}") from exc
        finally:
            graph.release()
        value = float(loss.data)
        history.append(value)
        params.tensors = adam_step(params.tensors, grads, state, cfg.lr,
                                   cfg.beta1, cfg.beta2, cfg.eps)
        if callback is not None:
            callback(epoch, value)
        if epoch % 100 == 0:
            log.debug("phase1 epoch %d loss %.6g", epoch, value)
    return TrainResult(params, history, forwards)


def refine_loss(Dm, S0, S, alpha, lambda_star, lambda_1, tau_star, tau_1):
    """Refinement loss node around the constant snapshot ``(L0, S0) = (Dm - S0, S0)``."""
    S0 = np.asarray(S0, dtype=np.float64)
    L0 = Dm - S0
    # L0 + alpha (S0 - S) and S + alpha (S0 - S)
    low = ad.add(ad.scale(S, -alpha), L0 + alpha * S0)
    sparse = ad.add(ad.scale(S, 1 - alpha), alpha * S0)
    nuc = ad.nuclear_loss(low, ad.ProxResidual(tau_star))
    l1 = ad.l1_loss(sparse, ad.ProxResidual(tau_1))
    return ad.add(ad.scale(nuc, lambda_star), ad.scale(l1, lambda_1))


def loss_phase2(params, D, snapshot_S, alpha, lambda_star, lambda_1, tau_star, tau_1,
                graph=None, leaves=None, training=True):
    """Phase-2 loss node for a fresh forward ``S = net(D)``."""
    D = _frames(D)
    graph = graph if graph is not None else ad.Graph()
    S = unet.to_matrix(unet.forward(params, D, training=training, graph=graph, leaves=leaves))
    return refine_loss(unet.to_matrix(D), snapshot_S, S, alpha, lambda_star, lambda_1,
                       tau_star, tau_1)


def train_phase2(params, D, cfg, lambda_star, lambda_1, callback=None):
    """Proximal refinement: ``cfg.iters`` plain gradient steps."""
    D = _frames(D)
    params = params.copy()
    tau_star, tau_1 = cfg.thresholds(lambda_star, lambda_1)
    history, forwards = [], []
    for it in range(cfg.iters):
        graph = ad.Graph()
        leaves = params.attach(graph)
        try:
            snap = unet.forward(params, D, training=False)
            forwards.append(("snapshot", False))
            S0 = unet.to_matrix(snap.data)
            snap.graph.release()
            loss = loss_phase2(params, D, S0, cfg.alpha, lambda_star, lambda_1, tau_star, tau_1,
                               graph, leaves, training=cfg.bn_training)
            forwards.append(("train", cfg.bn_training))
            grads = graph.backward(loss)
        except FloatingPointError as exc:
            raise TrainingError(f"phase 2 iteration {it}: {exc}") from exc
        finally:
            graph.release()
        value = float(loss.data)
        history.append(value)
        params.tensors = {k: p - cfg.lr * grads[k] for k, p in params.tensors.items()}
        if callback is not None:
            callback(it, value)
    return TrainResult(params, history, forwards)


def infer(params, D):
    """Eval-mode network output as an (H*W, n) matrix."""
    D = _frames(D)
    out = unet.forward(params, D, training=False)
    out.graph.release()
    return unet.to_matrix(out.data)
