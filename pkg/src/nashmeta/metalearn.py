"""One-step-unrolled example reweighting with a bargaining warm-up stage.

Per training step the per-example weights come from group hypergradients:
``g_k[i] = -lr * a_k . b_i`` where ``a_k`` is group ``k``'s mean validation
gradient and ``b_i`` the gradient of training example ``i``, both at the
current parameters. While ``t < T_bar`` the K hypergradients are bargained
over; afterwards (or when no agreement exists) a fixed fairness protocol
combines them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import aggregation as agg
from .data import GroupedDataset
from .linalg_nn import (
    MlpModel,
    mlp_forward,
    per_example_dots,
    sgd_momentum_step,
    softmax,
    weighted_gradient,
)
from .metrics import alignment_rate, group_auc_metrics

BARGAIN = "bargain"
FAIRNESS = "fairness"


def unroll_inner_step(model: MlpModel, X, labels, eps, lr: float) -> np.ndarray:
    """Parameters after one SGD step on ``sum_i eps_i * loss_i``.

    At ``eps == 0`` this returns ``theta`` unchanged; the hypergradients below
    use the closed form of its derivative instead of calling it.
    """
    eps = np.asarray(eps, dtype=np.float64)
    labels = np.asarray(labels)
    if eps.shape != labels.shape:
        raise ValueError(f"eps has shape {eps.shape}, minibatch has {labels.shape[0]} examples")
    if not np.any(eps):
        return model.theta.copy()
    grad, _ = weighted_gradient(model, X, labels, weights=eps)
    return model.theta - lr * grad


@dataclass
class HypergradientSet:
    g: np.ndarray  # (K, B)
    val_grads: np.ndarray  # (K, P)
    val_losses: np.ndarray  # (K,)
    train_losses: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.g.shape[0]


def hypergradients_from_gradients(val_grads, train_grads, lr: float) -> np.ndarray:
    """``-lr * A @ B.T`` for validation rows ``A`` and per-example rows ``B``."""
    A = np.atleast_2d(np.asarray(val_grads, dtype=np.float64))
    B = np.atleast_2d(np.asarray(train_grads, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError("validation and training gradients differ in dimension")
    return -lr * (A @ B.T)


def group_hypergradients(model: MlpModel, X, labels, val_groups, lr: float) -> HypergradientSet:
    """Hypergradients of every group's mean validation loss w.r.t. ``eps``.

    ``val_groups`` is a sequence of ``(X_k, y_k)``. Everything runs in eval
    mode so the surface being bargained over is deterministic.
    """
    if len(val_groups) == 0:
        raise ValueError("no validation groups")
    grads, losses = [], []
    for k, (Xk, yk) in enumerate(val_groups):
        if len(yk) == 0:
            raise ValueError(f"validation group {k} is empty")
        a, lk = weighted_gradient(model, Xk, yk)
        grads.append(a)
        losses.append(float(lk.mean()))
    A = np.stack(grads)
    dots, train_losses = per_example_dots(model, X, labels, A)
    g = -lr * dots
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite hypergradient")
    return HypergradientSet(g=g, val_grads=A, val_losses=np.array(losses), train_losses=train_losses)


@dataclass
class StepRecord:
    t: int
    stage: str
    status: str | None
    alpha: list | None
    min_utility: float
    protocol: str
    group_val_losses: list
    reason: str | None = None
    w_nonzero_frac: float | None = None
    w_max: float | None = None
    lr: float | None = None
    meta_lr: float = 1.0
    epoch: int | None = None
    train_loss: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _bargain(g: np.ndarray) -> agg.BargainOutcome:
    try:
        G = agg.GradientMatrix(g.T)
    except ValueError:
        return agg.BargainOutcome(agg.INFEASIBLE, reason=agg.ZERO_GRADIENT)
    return agg.nbs_solve(G)


def epsilon_update(hg: HypergradientSet, t: int, T_bar: int, protocol_kind, group_val_losses):
    """Combine the K hypergradients into ``eps`` and describe how it was done."""
    kind = agg.ProtocolKind.parse(protocol_kind)
    losses = [float(v) for v in group_val_losses]
    g = np.asarray(hg.g, dtype=np.float64)
    if t < T_bar:
        out = _bargain(g)
        status, reason = out.status, out.reason
        if out.agreed:
            eps = out.delta
            phi_name = agg.ProtocolKind.BARGAINED.value
            alpha = out.alpha.tolist()
        else:
            eps = g.T @ agg.protocol_weights(kind, losses).weights
            phi_name = kind.value
            alpha = None
        stage = BARGAIN
    else:
        eps = g.T @ agg.protocol_weights(kind, losses).weights
        stage, status, reason, alpha, phi_name = FAIRNESS, None, None, None, kind.value
    rec = StepRecord(
        t=int(t),
        stage=stage,
        status=status,
        alpha=alpha,
        min_utility=float(np.min(g @ eps)),
        protocol=phi_name,
        group_val_losses=losses,
        reason=reason,
    )
    return eps, rec


def example_weights(eps, norm: str = "l2") -> np.ndarray:
    """``normalize(max(-eps, 0))``; an all-zero vector stays zero."""
    w = np.maximum(-np.asarray(eps, dtype=np.float64), 0.0)
    if norm == "l2":
        s = float(np.linalg.norm(w))
    elif norm == "l1":
        s = float(w.sum())
    else:
        raise ValueError(f"norm must be 'l2' or 'l1', got {norm!r}")
    return w / s if s > 0 else w


def weighted_param_update(model: MlpModel, X, labels, eps, lr: float, *, mask_seed=None,
                          norm: str = "l2", momentum: float = 0.9,
                          weight_decay: float = 5e-4):
    """Momentum step on ``sum_i w_i * loss_i``; returns ``(new_model, w)``."""
    w = example_weights(eps, norm)
    if np.any(w):
        grad, _ = weighted_gradient(model, X, labels, weights=w, mask_seed=mask_seed)
    else:
        grad = np.zeros_like(model.theta)
    return sgd_momentum_step(model, grad, lr, momentum, weight_decay), w


@dataclass
class TrainConfig:
    protocol: str = "forml"
    epochs: int = 50
    bargain_epochs: int = 15
    lr: float = 1e-3
    dropout: float = 0.0
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    norm: str = "l2"
    hidden: tuple = (128, 128)

    def __post_init__(self):
        agg.ProtocolKind.parse(self.protocol)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.bargain_epochs <= self.epochs:
            raise ValueError("bargain_epochs must lie in [0, epochs]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainResult:
    model: MlpModel
    records: list
    epochs: list = field(default_factory=list)


def evaluate(model: MlpModel, ds: GroupedDataset, idx) -> dict:
    idx = np.asarray(idx)
    scores = softmax(mlp_forward(model, ds.X[idx]))[:, 1]
    return group_auc_metrics(scores, ds.y[idx], ds.groups[idx]).to_dict()


def train_two_stage(config: TrainConfig, ds: GroupedDataset, on_epoch=None) -> TrainResult:
    """Run the full schedule; bargaining covers the first ``bargain_epochs`` epochs."""
    if ds.train_idx.size == 0:
        raise ValueError("empty training split")
    val = [(ds.X[idx], ds.y[idx]) for idx in ds.val_groups()]
    for name, (_, yk) in zip(ds.group_names, val):
        if len(yk) == 0:
            raise ValueError(f"validation group {name!r} is empty")
    model = MlpModel.init(ds.n_features, seed=config.seed, hidden=config.hidden,
                          dropout=config.dropout)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    n_train = ds.train_idx.size
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    T_bar = config.bargain_epochs * steps_per_epoch
    records, epochs = [], []
    t = 0
    for epoch in range(config.epochs):
        order = ds.train_idx[shuffle_rng.permutation(n_train)]
        start = len(records)
        for s in range(steps_per_epoch):
            batch = order[s * config.batch_size:(s + 1) * config.batch_size]
            Xb, yb = ds.X[batch], ds.y[batch]
            hg = group_hypergradients(model, Xb, yb, val, config.lr)
            eps, rec = epsilon_update(hg, t, T_bar, config.protocol, hg.val_losses)
            model, w = weighted_param_update(
                model, Xb, yb, eps, config.lr,
                mask_seed=[config.seed, t, 2], norm=config.norm,
                momentum=config.momentum, weight_decay=config.weight_decay,
            )
            rec.epoch = epoch
            rec.lr = config.lr
            rec.w_nonzero_frac = float(np.mean(w > 0))
            rec.w_max = float(w.max())
            rec.train_loss = float(hg.train_losses.mean())
            records.append(rec)
            t += 1
        align = alignment_rate(records[start:], [0])[0]
        bargain_steps = [r for r in records[start:] if r.status == agg.AGREED]
        row = {
            "epoch": epoch,
            "stage": BARGAIN if epoch < config.bargain_epochs else FAIRNESS,
            "align_rate": align.rate,
            "agreed_steps": len(bargain_steps),
            "val_losses": records[-1].group_val_losses,
            "test": evaluate(model, ds, ds.test_idx),
        }
        epochs.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(model=model, records=records, epochs=epochs)
