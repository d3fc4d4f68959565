"""Losses and the SGD (+ FedProx proximal term) local solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from feddrl.nn.network import Network, NonFiniteError


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    batch_size: int = 10
    epochs: int = 5
    proximal_mu: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.proximal_mu < 0:
            raise ValueError("proximal_mu must be nonnegative")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, label: int) -> float:
    """``-log softmax(logits)[label]`` for one sample."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= label < logits.size:
        raise IndexError(f"label {label} out of range for {logits.size} classes")
    return float(-log_softmax(logits)[label])


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError("label out of range")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def proximal_term(params: np.ndarray, anchor: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    """Value and gradient of ``(mu/2) * ||params - anchor||^2``."""
    d = params - anchor
    return 0.5 * mu * float(d @ d), mu * d


def sgd_step(
    net: Network,
    batch: tuple[np.ndarray, np.ndarray],
    cfg: SgdConfig,
    anchor: np.ndarray | None = None,
) -> float:
    """One SGD step on ``batch``; returns the objective before the update.

    With ``cfg.proximal_mu > 0`` the FedProx term anchored at ``anchor``
    (the round's global parameters) is added to the loss.
    """
    x, y = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    if cfg.proximal_mu > 0 and anchor is None:
        raise ValueError("proximal_mu > 0 requires an anchor")
    logits = net.forward(x)
    loss, dlogits = cross_entropy(logits, y)
    net._backward(dlogits)
    grad = net.grads
    if cfg.proximal_mu > 0:
        prox, prox_grad = proximal_term(net.params, anchor, cfg.proximal_mu)
        loss += prox
        grad = grad + prox_grad
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    net.params -= cfg.learning_rate * grad
    return loss


def train_epochs(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    cfg: SgdConfig,
    rng: np.random.Generator,
    anchor: np.ndarray | None = None,
) -> float:
    """Local training for ``cfg.epochs`` reshuffled passes; returns the last batch loss."""
    n = len(y)
    loss = float("nan")
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = sgd_step(net, (x[idx], y[idx]), cfg, anchor)
    return loss


def mean_loss(net: Network, x: np.ndarray, y: np.ndarray, chunk: int = 2048) -> float:
    """Mean cross-entropy over a whole dataset (inference only)."""
    total = 0.0
    for start in range(0, len(y), chunk):
        logits = net.forward(x[start : start + chunk])
        logp = log_softmax(logits)
        total -= float(logp[np.arange(len(logits)), y[start : start + chunk]].sum())
    return total / len(y)


def predict(net: Network, x: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = [np.argmax(net.forward(x[s : s + chunk]), axis=1) for s in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)
