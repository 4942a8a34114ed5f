"""Two-objective toy problem on R^2 and a gradient-descent trajectory runner.

Both losses mix a log-valley term (active for theta_2 > 0) with a quadratic
bowl (active for theta_2 < 0) through tanh gates, which produces the
conflicting-gradient geometry used to compare aggregation rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import aggregation as agg

CLAMP = 5e-6
REFERENCE_INITS = (
    (-8.5, 7.5),
    (0.0, 0.0),
    (9.0, 9.0),
    (-7.5, -0.5),
    (9.0, -1.0),
    (9.0, -20.0),
)
# both losses are bounded below by -20; the generalized mean needs positive inputs
GM_LOSS_OFFSET = 21.0

PARETO_TOL = 1e-2
FAIRNESS_TOL = 0.1

ONE_STAGE = ("ltr", "forml", "gdro")
METHODS = ("ltr", "forml", "gdro", "nbs-full", "nbs-two-stage", "pcgrad", "cagrad", "gm")


def _parts(theta):
    t1, t2 = float(theta[0]), float(theta[1])
    th = math.tanh(t2)
    u1 = -0.5 * t1 - 3.5 + th
    u2 = -0.5 * t1 + 3.5 + th
    f1 = math.log(max(abs(u1), CLAMP)) + 6.0
    f2 = math.log(max(abs(u2), CLAMP)) + 6.0
    g1 = ((7.0 - t1) ** 2 + 0.1 * (-t2 - 8.0) ** 2) / 10.0 - 20.0
    g2 = ((-t1 - 7.0) ** 2 + 0.1 * (-t2 - 8.0) ** 2) / 10.0 - 20.0
    c1 = max(math.tanh(0.5 * t2), 0.0)
    c2 = max(math.tanh(-0.5 * t2), 0.0)
    return t1, t2, th, u1, u2, f1, f2, g1, g2, c1, c2


def eval_losses(theta) -> tuple[float, float]:
    _, _, _, _, _, f1, f2, g1, g2, c1, c2 = _parts(theta)
    return c1 * f1 + c2 * g1, c1 * f2 + c2 * g2


def eval_gradients(theta) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients; every max/abs kink and the clamp plateau get subgradient 0."""
    t1, t2, th, u1, u2, f1, f2, g1, g2, c1, c2 = _parts(theta)
    sech2 = 1.0 - th * th
    du = np.array([-0.5, sech2])
    df1 = du / u1 if abs(u1) > CLAMP else np.zeros(2)
    df2 = du / u2 if abs(u2) > CLAMP else np.zeros(2)
    dg1 = np.array([(t1 - 7.0) / 5.0, 0.02 * (t2 + 8.0)])
    dg2 = np.array([(t1 + 7.0) / 5.0, 0.02 * (t2 + 8.0)])
    half = 0.5 * (1.0 - math.tanh(0.5 * t2) ** 2)
    dc1 = np.array([0.0, half if t2 > 0 else 0.0])
    dc2 = np.array([0.0, -half if t2 < 0 else 0.0])
    grad1 = c1 * df1 + f1 * dc1 + c2 * dg1 + g1 * dc2
    grad2 = c1 * df2 + f2 * dc1 + c2 * dg2 + g2 * dc2
    return grad1, grad2


def pareto_stationarity(grad1, grad2) -> float:
    """min over lambda in [0, 1] of ||lambda g1 + (1 - lambda) g2||."""
    a = np.asarray(grad1, dtype=np.float64)
    b = np.asarray(grad2, dtype=np.float64)
    diff = a - b
    denom = float(diff @ diff)
    lam = 0.5 if denom == 0.0 else float(np.clip(-(b @ diff) / denom, 0.0, 1.0))
    return float(np.linalg.norm(lam * a + (1.0 - lam) * b))


def fairness_gap(losses) -> float:
    l1, l2 = losses
    return abs(l1 - l2)


@dataclass
class SyntheticPoint:
    theta: np.ndarray
    losses: tuple
    grads: tuple

    @classmethod
    def at(cls, theta) -> "SyntheticPoint":
        theta = np.asarray(theta, dtype=np.float64).copy()
        return cls(theta, eval_losses(theta), eval_gradients(theta))

    @property
    def stationarity(self) -> float:
        return pareto_stationarity(*self.grads)

    @property
    def gap(self) -> float:
        return fairness_gap(self.losses)


@dataclass
class Trajectory:
    method: str
    init: tuple
    points: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    @property
    def final(self) -> SyntheticPoint:
        return self.points[-1]

    def classify(self, pareto_tol: float = PARETO_TOL, fairness_tol: float = FAIRNESS_TOL) -> dict:
        end = self.final
        pareto = end.stationarity <= pareto_tol
        fair = end.gap <= fairness_tol
        return {
            "stationarity": end.stationarity,
            "gap": end.gap,
            "pareto": pareto,
            "fair": fair,
            "ideal": pareto and fair,
        }


def _bargain(grads):
    """Bargain over the two gradients; zero gradients count as a failed bargain."""
    try:
        G = agg.GradientMatrix(grads)
    except ValueError:
        return agg.BargainOutcome(agg.INFEASIBLE, reason=agg.ZERO_GRADIENT)
    return agg.nbs_solve(G)


def aggregate_direction(method: str, point: SyntheticPoint, t: int, bargain_steps: int,
                        protocol: str = "ltr"):
    """Direction to descend along plus step metadata."""
    g1, g2 = point.grads
    G = np.stack([g1, g2], axis=1)
    meta = {"t": t, "stage": None, "status": None, "alpha": None}
    if method in ONE_STAGE:
        w = agg.protocol_weights(method, point.losses).weights
        d = G @ w
        meta["stage"] = "fairness"
        meta["protocol"] = method
    elif method in ("nbs-full", "nbs-two-stage"):
        bargaining = method == "nbs-full" or t < bargain_steps
        meta["stage"] = "bargain" if bargaining else "fairness"
        d = None
        if bargaining:
            out = _bargain([g1, g2])
            meta["status"] = out.status
            if out.agreed:
                d = out.delta
                meta["alpha"] = out.alpha.tolist()
                meta["protocol"] = "bargained"
            else:
                meta["reason"] = out.reason
        if d is None:
            d = G @ agg.protocol_weights(protocol, point.losses).weights
            meta["protocol"] = protocol
    elif method == "pcgrad":
        d = agg.pcgrad_aggregate(G)
    elif method == "cagrad":
        d = agg.cagrad_aggregate(G)
    elif method == "gm":
        d = agg.generalized_mean_aggregate(G, np.asarray(point.losses) + GM_LOSS_OFFSET)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    meta["min_utility"] = float(min(g1 @ d, g2 @ d))
    return d, meta


def run_trajectory(method: str, init, steps: int = 1000, lr: float = 0.1,
                   bargain_steps: int = 100, protocol: str = "ltr") -> Trajectory:
    """Plain gradient descent along the aggregated direction."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    point = SyntheticPoint.at(init)
    traj = Trajectory(method=method, init=tuple(float(v) for v in init), points=[point])
    for t in range(steps):
        d, meta = aggregate_direction(method, point, t, bargain_steps, protocol)
        point = SyntheticPoint.at(point.theta - lr * d)
        traj.points.append(point)
        traj.steps.append(meta)
    return traj
