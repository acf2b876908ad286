"""Synthetic cable-driven continuum robot used as ground truth.

Three constant-curvature segments of 0.1 m hang from a base at the world
origin and extend along -Y.  Each segment has two actuation inputs that set
its curvature components about the X and Z directions.  Two orthographic
cameras image the robot: view 1 looks at the X-Y plane, view 2 at the Z-Y
plane.  Images are 256 x 256, background 0 and an anti-aliased bright stroke.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMAGE_SIZE = 256


class ViewportOverflow(RuntimeError):
    pass


@dataclass(frozen=True)
class PlantConfig:
    n_segments: int = 3
    segment_length: float = 0.1
    gain: float = 5.0  # curvature (1/m) per unit actuation
    epsilon: float = 0.1  # cubic input nonlinearity
    tau: float = 0.05  # actuator lag time constant (s); 0 disables
    u_bound: float = 1.0
    u_dot_max: float = 4.0
    points_per_segment: int = 40

    @property
    def m(self) -> int:
        return 2 * self.n_segments

    @property
    def length(self) -> float:
        return self.n_segments * self.segment_length


@dataclass(frozen=True)
class ViewSpec:
    view_id: int
    scale: float = 620.0  # px per metre, shared by both views
    anchor: tuple[float, float] = (128.0, 24.0)
    stroke_width: float = 7.0
    size: int = IMAGE_SIZE

    @property
    def lateral_axis(self) -> int:
        """World axis drawn along image x (0 = X for view 1, 2 = Z for view 2)."""
        return 0 if self.view_id == 1 else 2


def default_views(**kw) -> tuple[ViewSpec, ViewSpec]:
    return ViewSpec(1, **kw), ViewSpec(2, **kw)


@dataclass(frozen=True)
class PlantState:
    u: np.ndarray  # commanded actuation
    u_act: np.ndarray  # actuator position after lag
    q: np.ndarray  # (n_segments, 2) curvature pairs
    backbone: np.ndarray  # (N, 3) metres
    tip: np.ndarray


def cable_to_config(u, cfg: PlantConfig = PlantConfig()) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (cfg.m,):
        raise ValueError(f"expected actuation of length {cfg.m}, got {u.shape}")
    kappa = cfg.gain * (u + cfg.epsilon * u ** 3)
    return kappa.reshape(cfg.n_segments, 2)


def _arc(kx: float, ky: float, sigma: np.ndarray):
    """Points and end rotation of a constant-curvature arc in its local frame.

    Local frame: columns (bend-x, bend-y, tangent).  Analytic at zero curvature.
    """
    k = np.hypot(kx, ky)
    a = k * sigma
    along = sigma * np.sinc(a / np.pi)  # sin(a)/k
    lateral = sigma * np.sin(a / 2) * np.sinc(a / (2 * np.pi))  # (1 - cos a)/k
    if k > 0:
        c, s = kx / k, ky / k
    else:
        c, s = 1.0, 0.0
    pts = np.column_stack([c * lateral, s * lateral, along])
    theta = k * sigma[-1]
    ct, st = np.cos(theta), np.sin(theta)
    # R = Rz(phi) Ry(theta) Rz(-phi)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
    return pts, rz @ ry @ rz.T


def forward_kinematics(q, cfg: PlantConfig = PlantConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Backbone points (``points_per_segment`` per segment plus the base) and tip."""
    q = np.asarray(q, dtype=float).reshape(cfg.n_segments, 2)
    # base frame columns: bend-x -> +X, bend-y -> +Z, tangent -> -Y (right-handed)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    pos = np.zeros(3)
    sigma = np.linspace(0.0, cfg.segment_length, cfg.points_per_segment + 1)
    pts = [pos[None, :]]
    for kx, ky in q:
        local, r_end = _arc(kx, ky, sigma)
        world = pos + local @ rot.T
        pts.append(world[1:])
        pos = world[-1]
        rot = rot @ r_end
    backbone = np.vstack(pts)
    return backbone, backbone[-1].copy()


def make_state(u, cfg: PlantConfig = PlantConfig(), u_act=None) -> PlantState:
    u = np.clip(np.asarray(u, dtype=float), -cfg.u_bound, cfg.u_bound)
    u_act = u.copy() if u_act is None else np.asarray(u_act, dtype=float)
    q = cable_to_config(u_act, cfg)
    backbone, tip = forward_kinematics(q, cfg)
    return PlantState(u=u, u_act=u_act, q=q, backbone=backbone, tip=tip)


def step(state: PlantState, u_dot, dt: float, cfg: PlantConfig = PlantConfig()) -> PlantState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    u_dot = np.clip(np.asarray(u_dot, dtype=float), -cfg.u_dot_max, cfg.u_dot_max)
    u = np.clip(state.u + u_dot * dt, -cfg.u_bound, cfg.u_bound)
    if cfg.tau > 0:
        # exact zero-order-hold response of a first-order lag
        u_act = u + (state.u_act - u) * np.exp(-dt / cfg.tau)
    else:
        u_act = u
    return make_state(u, cfg, u_act=u_act)


def project(points3d, view: ViewSpec) -> np.ndarray:
    """Orthographic projection of world points (metres) into view pixels."""
    p = np.atleast_2d(np.asarray(points3d, dtype=float))
    ax, ay = view.anchor
    return np.column_stack([ax + view.scale * p[:, view.lateral_axis],
                            ay - view.scale * p[:, 1]])


@dataclass
class Rendering:
    image: np.ndarray  # uint8 (size, size)
    centerline: np.ndarray  # projected backbone, (N, 2) pixels
    stroke_mask: np.ndarray  # bool, pixels within half the stroke width


def _polyline_distance(px: np.ndarray, py: np.ndarray, line: np.ndarray) -> np.ndarray:
    a = line[:-1]
    ab = line[1:] - a
    len2 = np.maximum((ab ** 2).sum(1), 1e-12)
    best = np.full(px.shape, np.inf)
    for k in range(len(a)):
        t = np.clip(((px - a[k, 0]) * ab[k, 0] + (py - a[k, 1]) * ab[k, 1]) / len2[k], 0.0, 1.0)
        dx = px - (a[k, 0] + t * ab[k, 0])
        dy = py - (a[k, 1] + t * ab[k, 1])
        np.minimum(best, dx * dx + dy * dy, out=best)
    return np.sqrt(best)


def render_centerline(line: np.ndarray, view: ViewSpec) -> Rendering:
    half = view.stroke_width / 2.0
    n = view.size
    lo, hi = line.min(0), line.max(0)
    if lo.min() < half or hi.max() > n - 1 - half:
        raise ViewportOverflow(f"view {view.view_id}: centerline spans {lo} .. {hi}")
    pad = half + 2
    x0, y0 = (np.floor(lo - pad)).astype(int).clip(0, n - 1)
    x1, y1 = (np.ceil(hi + pad)).astype(int).clip(0, n - 1)
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(float)
    dist = _polyline_distance(xs, ys, line)
    cover = np.clip(half + 0.5 - dist, 0.0, 1.0)
    image = np.zeros((n, n), dtype=np.uint8)
    image[y0:y1 + 1, x0:x1 + 1] = np.rint(255.0 * cover).astype(np.uint8)
    mask = np.zeros((n, n), dtype=bool)
    mask[y0:y1 + 1, x0:x1 + 1] = dist <= half
    return Rendering(image, line, mask)


def render(state: PlantState, view: ViewSpec) -> Rendering:
    return render_centerline(project(state.backbone, view), view)


@dataclass
class TipSensor:
    noise_std: float = 0.0
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def measure(self, state: PlantState) -> np.ndarray:
        if self.noise_std == 0.0:
            return state.tip.copy()
        return state.tip + self.rng.normal(0.0, self.noise_std, size=3)


def measure_tip(state: PlantState, noise_std: float = 0.0, rng: np.random.Generator | None = None):
    if noise_std == 0.0:
        return state.tip.copy()
    rng = np.random.default_rng() if rng is None else rng
    return state.tip + rng.normal(0.0, noise_std, size=3)


__all__ = [
    "IMAGE_SIZE", "PlantConfig", "PlantState", "Rendering", "TipSensor", "ViewSpec",
    "ViewportOverflow", "cable_to_config", "default_views", "forward_kinematics",
    "make_state", "measure_tip", "project", "render", "render_centerline", "step",
]
