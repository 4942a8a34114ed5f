"""A fixed-architecture ReLU/dropout MLP with hand-written backprop.

Parameters live in one flat float64 vector ``theta`` laid out as
``W1, b1, W2, b2, W3, b3`` (row-major, ``W`` of shape ``(fan_in, fan_out)``),
so per-example gradients are plain rows of a ``(batch, P)`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN = 128
N_CLASSES = 2


def _layer_shapes(sizes):
    return [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]


def n_params(sizes) -> int:
    return sum(fi * fo + fo for fi, fo in _layer_shapes(sizes))


@dataclass
class MlpModel:
    sizes: tuple
    theta: np.ndarray
    dropout: float = 0.0
    momentum_buf: np.ndarray = field(default=None)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (n_params(self.sizes),):
            raise ValueError(f"theta has shape {self.theta.shape}, expected ({n_params(self.sizes)},)")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f"dropout must lie in [0, 1], got {self.dropout}")
        if self.momentum_buf is None:
            self.momentum_buf = np.zeros_like(self.theta)
        elif self.momentum_buf.shape != self.theta.shape:
            raise ValueError("momentum buffer must match theta")

    @classmethod
    def init(cls, n_features: int, seed: int = 0, hidden=(HIDDEN, HIDDEN),
             n_classes: int = N_CLASSES, dropout: float = 0.0) -> "MlpModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
        sizes = (n_features, *hidden, n_classes)
        rng = np.random.default_rng(seed)
        parts = []
        for fi, fo in _layer_shapes(sizes):
            bound = 1.0 / np.sqrt(fi)
            parts.append(rng.uniform(-bound, bound, size=fi * fo))
            parts.append(rng.uniform(-bound, bound, size=fo))
        return cls(sizes, np.concatenate(parts), dropout=dropout)

    @property
    def P(self) -> int:
        return self.theta.size

    def layers(self, theta: np.ndarray | None = None):
        """(W, b) views into ``theta`` (defaults to the model's own)."""
        theta = self.theta if theta is None else theta
        out, k = [], 0
        for fi, fo in _layer_shapes(self.sizes):
            W = theta[k:k + fi * fo].reshape(fi, fo)
            k += fi * fo
            b = theta[k:k + fo]
            k += fo
            out.append((W, b))
        return out

    def with_theta(self, theta: np.ndarray) -> "MlpModel":
        return MlpModel(self.sizes, np.array(theta, dtype=np.float64), self.dropout,
                        self.momentum_buf.copy())

    def copy(self) -> "MlpModel":
        return self.with_theta(self.theta)


def _dropout_masks(model: MlpModel, batch_size: int, mask_seed) -> list:
    n_hidden = len(model.sizes) - 2
    p = model.dropout
    if mask_seed is None or p == 0.0:
        return [None] * n_hidden
    rng = np.random.default_rng(mask_seed)
    masks = []
    for width in model.sizes[1:-1]:
        keep = rng.random((batch_size, width)) >= p
        scale = 0.0 if p == 1.0 else 1.0 / (1.0 - p)
        masks.append(keep * scale)
    return masks


def _forward(model: MlpModel, X, mask_seed=None, theta=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.sizes[0]:
        raise ValueError(f"expected features of width {model.sizes[0]}, got shape {X.shape}")
    layers = model.layers(theta)
    masks = _dropout_masks(model, X.shape[0], mask_seed)
    acts = [X]
    pre = []
    h = X
    for li, (W, b) in enumerate(layers[:-1]):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        if masks[li] is not None:
            h = h * masks[li]
        acts.append(h)
    W, b = layers[-1]
    logits = h @ W + b
    return logits, acts, pre, masks


def mlp_forward(model: MlpModel, X, mask_seed=None) -> np.ndarray:
    """Logits for a batch. ``mask_seed=None`` is eval mode (no dropout)."""
    return _forward(model, X, mask_seed)[0]


def cross_entropy_per_example(logits, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("logits must be (n, C) and labels (n,)")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C - 1}]")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return np.maximum(lse - logits[np.arange(logits.shape[0]), labels], 0.0)


def softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _backward_deltas(model, X, labels, mask_seed, theta=None):
    """Per-example output-side deltas for every layer, plus the losses."""
    logits, acts, pre, masks = _forward(model, X, mask_seed, theta)
    losses = cross_entropy_per_example(logits, labels)
    d = softmax(logits)
    d[np.arange(d.shape[0]), labels] -= 1.0
    layers = model.layers(theta)
    deltas = [None] * len(layers)
    deltas[-1] = d
    for li in range(len(layers) - 2, -1, -1):
        W_next = layers[li + 1][0]
        d = d @ W_next.T
        if masks[li] is not None:
            d = d * masks[li]
        d = d * (pre[li] > 0)
        deltas[li] = d
    return losses, acts, deltas


@dataclass
class PerExampleGrads:
    grads: np.ndarray
    losses: np.ndarray


def per_example_gradients(model: MlpModel, X, labels, mask_seed=None) -> PerExampleGrads:
    """Row i is the gradient of example i's loss alone."""
    labels = np.asarray(labels)
    losses, acts, deltas = _backward_deltas(model, X, labels, mask_seed)
    n = labels.shape[0]
    parts = []
    for a, d in zip(acts, deltas):
        parts.append(np.einsum("bi,bo->bio", a, d).reshape(n, -1))
        parts.append(d)
    return PerExampleGrads(np.concatenate(parts, axis=1), losses)


def weighted_gradient(model: MlpModel, X, labels, weights=None, mask_seed=None, theta=None):
    """Gradient of ``sum_i weights_i * loss_i`` (mean loss when weights is None).

    Returns ``(gradient, per-example losses)``.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    losses, acts, deltas = _backward_deltas(model, X, labels, mask_seed, theta)
    parts = []
    for a, d in zip(acts, deltas):
        dw = d * w[:, None]
        parts.append((a.T @ dw).ravel())
        parts.append(dw.sum(axis=0))
    return np.concatenate(parts), losses


def per_example_dots(model: MlpModel, X, labels, directions, mask_seed=None):
    """``directions @ per_example_gradients(...).T`` without building the rows.

    ``directions`` is ``(K, P)``; the result is ``(K, batch)``. For a linear
    layer the example gradient is ``outer(a_i, d_i)``, so its inner product
    with a direction ``D`` is ``a_i^T D d_i``.
    """
    labels = np.asarray(labels)
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    losses, acts, deltas = _backward_deltas(model, X, labels, mask_seed)
    out = np.zeros((directions.shape[0], labels.shape[0]))
    for k, direction in enumerate(directions):
        for (Dw, Db), a, d in zip(model.layers(direction), acts, deltas):
            out[k] += np.einsum("bo,bo->b", a @ Dw, d) + d @ Db
    return out, losses


def sgd_momentum_step(model: MlpModel, gradient, lr: float, momentum: float = 0.9,
                      weight_decay: float = 5e-4) -> MlpModel:
    """One SGD step with heavy-ball momentum and L2 weight decay (PyTorch convention)."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != model.theta.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(gradient)):
        raise FloatingPointError("non-finite gradient")
    buf = momentum * model.momentum_buf + (gradient + weight_decay * model.theta)
    theta = model.theta - lr * buf
    return MlpModel(model.sizes, theta, model.dropout, buf)
