"""Image-space obstacle avoidance on top of the shape/position controllers.

Distances are measured per view between the projected obstacle centre and the
closest point of that view's fitted chain.  When both views are inside the
warning distance, the view that is currently further from the obstacle is
pushed further away, so at least one view keeps a clear line between robot
and obstacle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import control
from .bezier import DEFAULT_N_D, BezierChain, ChainSample, closest_point, distribute_velocity
from .encoding import view_indices
from .plant import ViewSpec, project


class DegenerateContact(ValueError):
    """Obstacle exactly on the curve: the escape direction is undefined."""


@dataclass(frozen=True)
class Obstacle:
    position_3d: np.ndarray
    radius: float = 6.0  # px, drawing only

    def in_view(self, view: ViewSpec) -> np.ndarray:
        return project(np.asarray(self.position_3d, float), view)[0]


@dataclass(frozen=True)
class AvoidanceConfig:
    d_w: float = 25.0
    alpha: float = 60.0  # 1/s: control-point speed per px of intrusion
    n_d: int = DEFAULT_N_D

    def __post_init__(self):
        if self.d_w <= 0 or self.alpha <= 0:
            raise ValueError("d_w and alpha must be positive")


@dataclass
class ViewResult:
    view: int  # 1 or 2
    d: float
    sample: ChainSample
    v_c: np.ndarray  # unit escape direction (zero when undefined)


def view_distance(chain: BezierChain, p_obs, n_d: int = DEFAULT_N_D) -> tuple[float, ChainSample]:
    sample, d = closest_point(chain, p_obs, n_d)
    return d, sample


def escape_velocity(sample: ChainSample, p_obs) -> np.ndarray:
    diff = sample.point - np.asarray(p_obs, float)
    norm = float(np.hypot(*diff))
    if norm == 0.0:
        raise DegenerateContact("obstacle lies on the curve")
    return diff / norm


def assess_view(view: int, chain: BezierChain, p_obs, cfg: AvoidanceConfig = AvoidanceConfig(),
                previous: np.ndarray | None = None) -> ViewResult:
    """Distance and escape direction for one view.

    On exact contact the previous escape direction is reused (zero if none).
    """
    d, sample = view_distance(chain, p_obs, cfg.n_d)
    try:
        v_c = escape_velocity(sample, p_obs)
    except DegenerateContact:
        v_c = np.zeros(2) if previous is None else np.asarray(previous, float)
    return ViewResult(view, d, sample, v_c)


def escape_control_step(d: float, cfg: AvoidanceConfig, jac_s, sample: ChainSample, v_c,
                        view: int = 1, lam_damp: float = control.DEFAULT_DAMPING,
                        n_segments: int = 3) -> np.ndarray:
    """Actuation rate that moves the closest point of ``view`` along ``v_c``.

    The point velocity is spread over that view's control points, embedded in
    the full shape-velocity vector with the other view left at rest, and
    mapped through the damped inverse of the shape Jacobian.
    """
    jac = control._matrix(jac_s)
    v_view = distribute_velocity(sample, v_c, n_segments=n_segments)
    v_s = np.zeros(jac.shape[0])
    v_s[view_indices(view, n_segments)] = v_view
    return cfg.alpha * (cfg.d_w - d) * (control.damped_pinv(jac, lam_damp) @ v_s)


def select_view(d1: float, d2: float) -> int:
    return 1 if d1 > d2 else 2


def obstacle_control_step(r1: ViewResult, r2: ViewResult, cfg: AvoidanceConfig, jac_s,
                          lam_damp: float = control.DEFAULT_DAMPING,
                          n_segments: int = 3) -> tuple[np.ndarray, int]:
    """Escape command from the view chosen by :func:`select_view`, and that view."""
    r = r1 if select_view(r1.d, r2.d) == 1 else r2
    u_dot = escape_control_step(r.d, cfg, jac_s, r.sample, r.v_c, r.view, lam_damp, n_segments)
    return u_dot, r.view


@dataclass
class OverallResult:
    u_dot: np.ndarray
    active: bool
    view: int  # escaping view, 0 when inactive
    clamped: bool


def overall_step(r1: ViewResult, r2: ViewResult, cfg: AvoidanceConfig,
                 x_s, ref_s: control.Reference, jac_s,
                 x_p, ref_p: control.Reference, jac_p,
                 gains: control.ControllerGains = control.ControllerGains(),
                 n_segments: int = 3) -> OverallResult:
    """Hybrid control while either view is clear of the warning distance.

    Otherwise the shape term is replaced by the obstacle escape command.
    """
    u_dot_p = control.position_control_step(x_p, ref_p, jac_p, gains, clamp=False)
    if r1.d > cfg.d_w or r2.d > cfg.d_w:
        u_dot = control.shape_control_step(x_s, ref_s, jac_s, gains, clamp=False) + u_dot_p
        active, view = False, 0
    else:
        u_dot_o, view = obstacle_control_step(r1, r2, cfg, jac_s, gains.lam_damp, n_segments)
        u_dot = u_dot_o + u_dot_p
        active = True
    u_dot, clamped = control.clamp_rate(u_dot, gains.u_dot_max)
    return OverallResult(u_dot, active, view, clamped)
