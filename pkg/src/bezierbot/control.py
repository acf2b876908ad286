"""Model-based Jacobian estimation and resolved-rate shape/position control."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import node

DEFAULT_DELTA_U = 0.01
DEFAULT_DAMPING = 1e-2
DEFAULT_POSITION_DAMPING = 3e-3

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class JacobianEstimate:
    matrix: np.ndarray
    delta_u: float
    tick: int = 0
    one_sided: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


@dataclass
class Reference:
    x_d: np.ndarray
    x_d_rate: np.ndarray | None = None

    def __post_init__(self):
        self.x_d = np.asarray(self.x_d, dtype=float)
        self.x_d_rate = (np.zeros_like(self.x_d) if self.x_d_rate is None
                         else np.asarray(self.x_d_rate, dtype=float))
        if self.x_d_rate.shape != self.x_d.shape:
            raise ValueError("reference rate and state have different shapes")


@dataclass
class ControllerGains:
    lam_s: float = 1.0
    lam_p: float = 1.0
    lam_damp: float = DEFAULT_DAMPING
    u_dot_max: float = 1.0
    # position-loop damping; None -> lam_damp.  Tip Jacobians are in metres per
    # unit input, and the vertical singular value (~1e-3) sits below 1e-2
    lam_damp_p: float | None = DEFAULT_POSITION_DAMPING

    def __post_init__(self):
        if self.lam_s <= 0 or self.lam_p <= 0:
            raise ValueError("controller gains must be positive")
        if self.lam_damp < 0 or (self.lam_damp_p is not None and self.lam_damp_p < 0):
            raise ValueError("damping must be non-negative")

    @property
    def position_damping(self) -> float:
        return self.lam_damp if self.lam_damp_p is None else self.lam_damp_p


# (lam_s, lam_p) per task.  Regulation from far-off poses converges more
# reliably with a gentle gain; trajectory tracking needs a stiff one to keep the
# lag behind the reference rate small; holding the tip while the escape command
# reshapes the body needs a stiff position loop.
TASK_GAINS = {"regulate": (1.0, 1.0), "obstacle-regulate": (1.0, 1.0),
              "self-motion": (1.0, 10.0), "track": (5.0, 5.0)}


def default_gains(task: str) -> ControllerGains:
    lams = TASK_GAINS.get(task)
    if lams is None:
        raise ValueError(f"unknown task {task!r}")
    return ControllerGains(lam_s=lams[0], lam_p=lams[1])


def _predictor(model: Union[node.DynamicsModel, Predictor]) -> Predictor:
    if isinstance(model, node.DynamicsModel):
        return lambda xb, ub: node.integrate(model, xb, ub)
    return model


def estimate_jacobian(model, x, u, delta_u: float = DEFAULT_DELTA_U, u_bound: float = 1.0,
                      tick: int = 0) -> JacobianEstimate:
    """Finite-difference sensitivity of the one-period prediction to each input.

    Central differences; a column whose perturbation would leave ``[-u_bound,
    u_bound]`` falls back to a one-sided difference and is flagged.  ``model``
    is a :class:`DynamicsModel` or any batched ``predict(x, u) -> x_plus``.
    """
    if delta_u <= 0:
        raise ValueError("delta_u must be positive")
    predict = _predictor(model)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    m = u.size
    eye = np.eye(m) * delta_u
    up = u + eye
    dn = u - eye
    hi = up.max(1) > u_bound + 1e-12
    lo = dn.min(1) < -u_bound - 1e-12
    # one-sided columns replace the out-of-range side with the unperturbed input
    up[hi] = u
    dn[lo & ~hi] = u
    ub = np.vstack([up, dn])
    xb = np.repeat(x[None, :], 2 * m, axis=0)
    try:
        pred = predict(xb, ub)
    except node.DivergedIntegration as exc:
        for j in range(m):
            try:
                predict(xb[[j, m + j]], ub[[j, m + j]])
            except node.DivergedIntegration:
                raise node.DivergedIntegration(f"column {j}: {exc}") from exc
        raise
    if not np.all(np.isfinite(pred)):
        raise node.DivergedIntegration("non-finite prediction in Jacobian estimate")
    span = np.where(hi | lo, delta_u, 2.0 * delta_u)
    jac = (pred[:m] - pred[m:]).T / span
    return JacobianEstimate(jac, float(delta_u), tick, hi | lo)


def damped_pinv(jac, lam_damp: float = DEFAULT_DAMPING) -> np.ndarray:
    """Damped least-squares inverse; the plain pseudo-inverse at zero damping."""
    if lam_damp < 0:
        raise ValueError("damping must be non-negative")
    j = np.asarray(jac, dtype=float)
    rows, cols = j.shape
    if lam_damp == 0:
        return np.linalg.pinv(j)
    if rows <= cols:
        return j.T @ np.linalg.solve(j @ j.T + lam_damp ** 2 * np.eye(rows), np.eye(rows))
    return np.linalg.solve(j.T @ j + lam_damp ** 2 * np.eye(cols), j.T)


def clamp_rate(u_dot, u_dot_max: float) -> tuple[np.ndarray, bool]:
    """Scale the whole command so no component exceeds ``u_dot_max``.

    Uniform scaling keeps the commanded direction, unlike per-channel clipping.
    """
    u_dot = np.asarray(u_dot, dtype=float)
    peak = np.max(np.abs(u_dot)) if u_dot.size else 0.0
    if peak <= u_dot_max:
        return u_dot, False
    return u_dot * (u_dot_max / peak), True


def saturated(u, u_dot, u_bound: float, tol: float = 1e-9) -> np.ndarray:
    """Inputs sitting on a bound and commanded further outward."""
    u = np.asarray(u, dtype=float)
    u_dot = np.asarray(u_dot, dtype=float)
    return (np.abs(u) >= u_bound - tol) & (u * u_dot > 0)


def drop_columns(jac, mask) -> np.ndarray:
    """Copy of the Jacobian with the masked input columns zeroed.

    A zero column gets a zero command from either pseudo-inverse, so the
    remaining inputs absorb the task instead of a saturated one.
    """
    j = _matrix(jac).copy()
    j[:, np.asarray(mask, dtype=bool)] = 0.0
    return j


def _matrix(jac) -> np.ndarray:
    return jac.matrix if isinstance(jac, JacobianEstimate) else np.asarray(jac, dtype=float)


def _rate_step(x, ref: Reference, jac, lam: float, lam_damp: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != ref.x_d.shape:
        raise ValueError(f"state shape {x.shape} does not match reference {ref.x_d.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(ref.x_d)) and np.all(np.isfinite(ref.x_d_rate))):
        raise ValueError("non-finite controller input")
    j = _matrix(jac)
    if j.shape[0] != x.size:
        raise ValueError(f"Jacobian has {j.shape[0]} rows for a state of size {x.size}")
    return damped_pinv(j, lam_damp) @ (ref.x_d_rate + lam * (ref.x_d - x))


def shape_control_step(x_s, ref: Reference, jac_s, gains: ControllerGains = ControllerGains(),
                       clamp: bool = True) -> np.ndarray:
    u_dot = _rate_step(x_s, ref, jac_s, gains.lam_s, gains.lam_damp)
    return clamp_rate(u_dot, gains.u_dot_max)[0] if clamp else u_dot


def position_control_step(x_p, ref: Reference, jac_p, gains: ControllerGains = ControllerGains(),
                          clamp: bool = True) -> np.ndarray:
    u_dot = _rate_step(x_p, ref, jac_p, gains.lam_p, gains.position_damping)
    return clamp_rate(u_dot, gains.u_dot_max)[0] if clamp else u_dot


def hybrid_step(x_s, ref_s: Reference, jac_s, x_p, ref_p: Reference, jac_p,
                gains: ControllerGains = ControllerGains(), clamp: bool = True) -> np.ndarray:
    """Sum of the shape and position commands, limited after summation."""
    u_dot = (shape_control_step(x_s, ref_s, jac_s, gains, clamp=False)
             + position_control_step(x_p, ref_p, jac_p, gains, clamp=False))
    return clamp_rate(u_dot, gains.u_dot_max)[0] if clamp else u_dot
