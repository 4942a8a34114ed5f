"""Hypergradient aggregation: Nash bargaining and the baseline combiners.

Gradients are handled as the columns of a matrix ``G`` of shape ``(n, K)``.
The bargained coefficients ``alpha`` satisfy ``G.T @ G @ alpha == 1 / alpha``
with ``alpha > 0``; the update is ``delta = G @ alpha``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

AGREED = "agreed"
INFEASIBLE = "infeasible"

NO_POSITIVE_ROOT = "no-positive-root"
NOT_CONVERGED = "residual-not-converged"
ALIGNMENT_VIOLATED = "alignment-violated"
# not produced by nbs_solve itself; callers use it when a zero hypergradient
# makes the bargaining problem ill-posed
ZERO_GRADIENT = "zero-gradient"


class ProtocolKind(str, enum.Enum):
    LTR = "ltr"
    FORML = "forml"
    METAGDRO = "gdro"
    BARGAINED = "bargained"

    @classmethod
    def parse(cls, value: "str | ProtocolKind") -> "ProtocolKind":
        if isinstance(value, cls):
            return value
        aliases = {"metagdro": cls.METAGDRO, "meta-gdro": cls.METAGDRO, "nbs": cls.BARGAINED}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


class GradientMatrix:
    """K gradient columns with a cached Gram matrix.

    Accepts either an ``(n, K)`` array or a sequence of K length-n vectors.
    """

    def __init__(self, columns):
        if isinstance(columns, np.ndarray) and columns.ndim == 2:
            G = np.array(columns, dtype=np.float64)
        else:
            cols = [np.asarray(c, dtype=np.float64).ravel() for c in columns]
            if not cols:
                raise ValueError("need at least one gradient")
            if len({c.shape for c in cols}) != 1:
                raise ValueError("gradients must share one dimension")
            G = np.stack(cols, axis=1)
        if G.ndim != 2 or G.shape[1] == 0:
            raise ValueError(f"expected an (n, K) matrix, got shape {G.shape}")
        if not np.all(np.isfinite(G)):
            raise ValueError("gradient entries must be finite")
        norms = np.linalg.norm(G, axis=0)
        if np.any(norms == 0.0):
            bad = [int(i) for i in np.flatnonzero(norms == 0.0)]
            raise ValueError(f"zero gradient column(s) {bad}; every g_i must be nonzero")
        self.G = G
        self.norms = norms
        self.gram = G.T @ G

    @property
    def K(self) -> int:
        return self.G.shape[1]

    @property
    def n(self) -> int:
        return self.G.shape[0]

    def column(self, i: int) -> np.ndarray:
        return self.G[:, i]


@dataclass
class BargainOutcome:
    status: str
    alpha: np.ndarray | None = None
    delta: np.ndarray | None = None
    residual: float = math.inf
    iterations: int = 0
    reason: str | None = None

    @property
    def agreed(self) -> bool:
        return self.status == AGREED

    def utilities(self, G: GradientMatrix) -> np.ndarray:
        if self.delta is None:
            raise RuntimeError("no update on an infeasible outcome")
        return G.G.T @ self.delta


@dataclass
class Protocol:
    kind: ProtocolKind
    weights: np.ndarray


@dataclass
class DecompositionReport:
    self_terms: np.ndarray
    interaction_terms: np.ndarray
    totals: np.ndarray = field(init=False)

    def __post_init__(self):
        self.totals = self.self_terms + self.interaction_terms


def utility(g_i, delta) -> float:
    """How much of ``delta`` lands along ``g_i``: the inner product."""
    g_i = np.asarray(g_i, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if g_i.shape != delta.shape:
        raise ValueError(f"shape mismatch {g_i.shape} vs {delta.shape}")
    return float(g_i @ delta)


def _as_gradient_matrix(G) -> GradientMatrix:
    return G if isinstance(G, GradientMatrix) else GradientMatrix(G)


def nbs_solve(G, tol: float = 1e-8, max_iter: int = 100) -> BargainOutcome:
    """Solve ``G^T G alpha = 1/alpha`` for the positive root.

    Damped Newton on ``F(b) = A exp(b) - exp(-b)`` in log-coordinates
    ``alpha = exp(b)``, where ``A`` is the Gram matrix of the columns
    rescaled by their largest norm (the root is scale-equivariant, so the
    scaled problem is solved and mapped back). The Newton direction is a
    descent direction of ``psi(alpha) = 0.5 alpha^T A alpha - sum(log alpha)``,
    whose stationary points are exactly the roots; steps are backtracked on
    ``psi``. ``residual`` is the scale-free ``max |alpha_i (A alpha)_i - 1|``.
    """
    G = _as_gradient_matrix(G)
    K = G.K
    scale = float(G.norms.max())
    A = G.gram / scale**2
    norms = G.norms / scale

    def psi(a):
        return 0.5 * a @ A @ a - np.sum(np.log(a))

    b = -np.log(math.sqrt(K) * norms)
    a = np.exp(b)
    residual = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        Aa = A @ a
        residual = float(np.max(np.abs(a * Aa - 1.0)))
        if residual <= tol:
            it -= 1
            break
        F = Aa - 1.0 / a
        J = A * a[None, :] + np.diag(1.0 / a)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return BargainOutcome(INFEASIBLE, residual=residual, iterations=it, reason=NO_POSITIVE_ROOT)
        if not np.all(np.isfinite(step)):
            return BargainOutcome(INFEASIBLE, residual=residual, iterations=it, reason=NO_POSITIVE_ROOT)
        # -F^T H^{-1} F in alpha-space, always negative
        slope = float((a * F) @ step)
        f0 = psi(a)
        t = 1.0
        while t >= 1e-12:
            with np.errstate(over="ignore"):
                a_new = np.exp(b + t * step)
            if np.all(np.isfinite(a_new)) and np.all(a_new > 0):
                f_new = psi(a_new)
                if np.isfinite(f_new) and f_new <= f0 + 1e-4 * t * slope:
                    break
            t *= 0.5
        else:
            # no measurable decrease left: rounding floor near the root
            t = 1.0
        b = b + t * step
        with np.errstate(over="ignore"):
            a = np.exp(b)
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            return BargainOutcome(INFEASIBLE, residual=math.inf, iterations=it, reason=NO_POSITIVE_ROOT)
    else:
        Aa = A @ a
        residual = float(np.max(np.abs(a * Aa - 1.0)))
        if not residual <= tol:
            return BargainOutcome(INFEASIBLE, residual=residual, iterations=max_iter, reason=NOT_CONVERGED)

    alpha = a / scale
    delta = G.G @ alpha
    if np.any(G.G.T @ delta <= 0) or not np.all(np.isfinite(delta)):
        return BargainOutcome(INFEASIBLE, residual=residual, iterations=it, reason=ALIGNMENT_VIOLATED)
    return BargainOutcome(AGREED, alpha=alpha, delta=delta, residual=residual, iterations=it)


def decomposition_report(outcome: BargainOutcome, G) -> DecompositionReport:
    """Split each player's unit budget into its own and its interaction share."""
    if not outcome.agreed:
        raise RuntimeError("decomposition requires an agreed bargaining outcome")
    G = _as_gradient_matrix(G)
    scaled = G.G * outcome.alpha[None, :]
    inner = scaled.T @ scaled
    self_terms = np.diag(inner).copy()
    interaction = inner.sum(axis=1) - self_terms
    return DecompositionReport(self_terms=self_terms, interaction_terms=interaction)


def protocol_weights(kind, group_losses) -> Protocol:
    """Aggregation weights for the fixed fairness protocols.

    Ties in argmax/argmin go to the lowest group index; FORML over equal
    losses returns the zero vector.
    """
    kind = ProtocolKind.parse(kind)
    losses = np.asarray(group_losses, dtype=np.float64).ravel()
    K = losses.size
    if K == 0:
        raise ValueError("group_losses is empty")
    w = np.zeros(K)
    if kind is ProtocolKind.LTR:
        w[:] = 1.0 / K
    elif kind is ProtocolKind.FORML:
        hi, lo = int(np.argmax(losses)), int(np.argmin(losses))
        if hi != lo and losses[hi] != losses[lo]:
            w[hi] = 1.0
            w[lo] = -1.0
    elif kind is ProtocolKind.METAGDRO:
        w[int(np.argmax(losses))] = 1.0
    else:
        raise ValueError("bargained weights come from nbs_solve, not protocol_weights")
    return Protocol(kind=kind, weights=w)


def pcgrad_aggregate(G) -> np.ndarray:
    """PCGrad with a fixed projection order j = 1..K."""
    G = np.asarray(G.G if isinstance(G, GradientMatrix) else G, dtype=np.float64)
    K = G.shape[1]
    out = np.zeros(G.shape[0])
    for i in range(K):
        gi = G[:, i].copy()
        for j in range(K):
            if j == i:
                continue
            gj = G[:, j]
            d = gi @ gj
            if d < 0:
                gi -= d / (gj @ gj) * gj
        out += gi
    return out


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_section(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def cagrad_objective(x: float, gram: np.ndarray, c: float) -> float:
    """Inner CAGrad objective ``g_w^T g_0 + c ||g_0|| ||g_w||`` for ``w = (x, 1 - x)``."""
    g11, g12, g22 = gram[0, 0], gram[0, 1], gram[1, 1]
    g0_norm = 0.5 * math.sqrt(max(g11 + g22 + 2.0 * g12, 0.0))
    gw_sq = x * x * g11 + (1.0 - x) ** 2 * g22 + 2.0 * x * (1.0 - x) * g12
    gw_g0 = 0.5 * (x * (g11 + g12) + (1.0 - x) * (g12 + g22))
    return gw_g0 + c * g0_norm * math.sqrt(max(gw_sq, 0.0))


def cagrad_from_weight(G: np.ndarray, x: float, c: float) -> np.ndarray:
    g0 = G.mean(axis=1)
    g0_norm = float(np.linalg.norm(g0))
    gw = x * G[:, 0] + (1.0 - x) * G[:, 1]
    gw_norm = float(np.linalg.norm(gw))
    if gw_norm == 0.0 or g0_norm == 0.0:
        return g0 / (1.0 + c)
    lam = c * g0_norm / gw_norm
    return (g0 + lam * gw) / (1.0 + c)


def cagrad_aggregate(G, c: float = 0.5) -> np.ndarray:
    """Two-objective CAGrad; the simplex weight is found by golden-section search."""
    G = np.asarray(G.G if isinstance(G, GradientMatrix) else G, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] != 2:
        raise NotImplementedError("cagrad_aggregate supports exactly K = 2 gradients")
    gram = G.T @ G
    x = _golden_section(lambda v: cagrad_objective(v, gram, c), 0.0, 1.0, tol=1e-10)
    return cagrad_from_weight(G, x, c)


def generalized_mean(losses, p: float = 2.0) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    return float(np.mean(losses**p) ** (1.0 / p))


def generalized_mean_aggregate(G, group_losses, p: float = 2.0) -> np.ndarray:
    """Gradient of ``((1/K) sum L_i^p)^(1/p)`` by the chain rule."""
    G = np.asarray(G.G if isinstance(G, GradientMatrix) else G, dtype=np.float64)
    losses = np.asarray(group_losses, dtype=np.float64).ravel()
    if losses.size != G.shape[1]:
        raise ValueError("one loss per gradient column")
    if np.any(losses <= 0):
        raise ValueError("generalized mean needs strictly positive losses")
    if p < 1:
        raise ValueError("p must be >= 1")
    K = losses.size
    gm = generalized_mean(losses, p)
    weights = losses ** (p - 1.0) / (K * gm ** (p - 1.0))
    return G @ weights
