"""Experiment orchestration: data collection, training, references, closed-loop runs."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import node
from .encoding import EncodingConfig, EncodingError, chains_to_state, encode_views, fit_chain, resample_polyline
from .plant import PlantConfig, PlantState, ViewSpec, default_views, make_state, project, render, step

log = logging.getLogger(__name__)


class CollectionDegraded(UserWarning):
    pass


@dataclass
class World:
    """Simulated plant together with its two cameras and the image encoder."""

    plant: PlantConfig = field(default_factory=PlantConfig)
    views: tuple = field(default_factory=default_views)
    tip_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig(anchors=tuple(tuple(v.anchor) for v in self.views),
                              n_segments=self.plant.n_segments)

    def images(self, state: PlantState) -> list[np.ndarray]:
        return [render(state, v).image for v in self.views]

    def observe_shape(self, state: PlantState, images=None) -> np.ndarray:
        return encode_views(self.images(state) if images is None else images, self.encoding)

    def exact_shape(self, state: PlantState) -> np.ndarray:
        """Shape state fitted to the true projected centreline, skipping the images."""
        n = self.plant.n_segments
        return chains_to_state([fit_chain(resample_polyline(project(state.backbone, v), 1.0, n), n, v.anchor)
                                for v in self.views])

    def observe_tip(self, state: PlantState) -> np.ndarray:
        if self.tip_noise == 0.0:
            return state.tip.copy()
        return state.tip + self.rng.normal(0.0, self.tip_noise, size=3)


def reflect(u: np.ndarray, bound: float) -> np.ndarray:
    """Fold values back into ``[-bound, bound]``."""
    period = 4.0 * bound
    v = np.mod(u + bound, period)
    return np.where(v > 2 * bound, period - v, v) - bound


def collect(n_samples: int, seed: int = 0, bound: float = 0.9, dt: float = 0.05,
            world: World | None = None, max_skip_fraction: float = 0.05):
    """Reflected random walk in actuation space, recording one-period transitions.

    Returns ``(shape_dataset, position_dataset, n_skipped)``.  A transition is
    dropped when either of its frames fails to encode.
    """
    world = World() if world is None else world
    cfg = world.plant
    m = cfg.m
    n_shape = 4 * cfg.n_segments * len(world.views)
    rng = np.random.default_rng(seed)
    u = np.zeros(m)
    state = make_state(u, cfg)

    def observe(s):
        try:
            return world.observe_shape(s)
        except EncodingError:
            return None

    xs0, xp0 = observe(state), world.observe_tip(state)
    rows_s, rows_p = [], []
    skipped = 0
    while len(rows_s) < n_samples:
        step_max = cfg.u_dot_max * dt
        u_new = reflect(u + rng.uniform(-step_max, step_max, m), bound)
        state = step(state, (u_new - u) / dt, dt, cfg)
        u = state.u
        xs1, xp1 = observe(state), world.observe_tip(state)
        if xs0 is None or xs1 is None:
            skipped += 1
            if skipped > max(10, n_samples):
                raise RuntimeError(f"encoding failed on {skipped} transitions")
        else:
            rows_s.append((xs0, u.copy(), xs1))
            rows_p.append((xp0, u.copy(), xp1))
        xs0, xp0 = xs1, xp1
    total = n_samples + skipped
    if total and skipped / total > max_skip_fraction:
        warnings.warn(CollectionDegraded(f"{skipped} of {total} transitions skipped"))

    def build(rows, n):
        if not rows:
            return node.empty_dataset(n, m)
        return node.Dataset(*(np.array(c) for c in zip(*rows)))

    return build(rows_s, n_shape), build(rows_p, 3), skipped


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# references


class InfeasibleReference(RuntimeError):
    pass


@dataclass
class Trajectory:
    """Sampled reference: times, shape states, tip positions and the actuation
    that produced them (the references are replayed plant poses)."""

    t: np.ndarray
    xs: np.ndarray
    xp: np.ndarray
    u: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def at(self, k: int):
        """Reference state and backward-difference rate at tick ``k``."""
        from .control import Reference

        i = min(k, len(self) - 1)
        if i == 0 or k >= len(self):
            zs, zp = np.zeros(self.xs.shape[1]), np.zeros(3)
            return Reference(self.xs[i], zs), Reference(self.xp[i], zp)
        h = self.t[i] - self.t[i - 1]
        return (Reference(self.xs[i], (self.xs[i] - self.xs[i - 1]) / h),
                Reference(self.xp[i], (self.xp[i] - self.xp[i - 1]) / h))

    def to_csv(self, path) -> None:
        n_s, m = self.xs.shape[1], self.u.shape[1]
        head = (["t"] + [f"xs_{i}" for i in range(n_s)] + [f"xp_{i}" for i in range(3)]
                + [f"u_{i}" for i in range(m)])
        table = np.column_stack([self.t, self.xs, self.xp, self.u])
        _write_csv(path, head, table)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        head, table = _read_csv(path)
        n_s = sum(1 for h in head if h.startswith("xs_"))
        m = sum(1 for h in head if h.startswith("u_"))
        if head[0] != "t" or len(head) != 1 + n_s + 3 + m:
            raise ValueError(f"{path}: not a reference trajectory file")
        return cls(table[:, 0], table[:, 1:1 + n_s], table[:, 1 + n_s:4 + n_s], table[:, 4 + n_s:])


def _write_csv(path, head, table) -> None:
    lines = [",".join(head)]
    lines += [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(table)]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_csv(path):
    text = Path(path).read_text().strip().splitlines()
    head = text[0].split(",")
    table = np.array([[float(v) for v in line.split(",")] for line in text[1:]]).reshape(-1, len(head))
    return head, table


def lissajous(kind: str, theta, a: float, b: float, depth: float) -> np.ndarray:
    """Tip path: ``infinity`` is (a sin 2t, depth, b sin t), ``eight`` is (a sin t, depth, b sin 2t)."""
    theta = np.asarray(theta, dtype=float)
    if kind == "infinity":
        x, z = a * np.sin(2 * theta), b * np.sin(theta)
    elif kind == "eight":
        x, z = a * np.sin(theta), b * np.sin(2 * theta)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return np.column_stack([x, np.full_like(x, depth), z])


def solve_tip_ik(targets: np.ndarray, cfg: PlantConfig, u_limit: float = 0.8,
                 smooth: float = 1e-3, rest: float = 1e-4, tol: float = 1e-4) -> np.ndarray:
    """Actuation sequence reaching each tip target, warm-started along the path.

    The redundancy is resolved by small penalties on the change from the
    previous solution (smoothness) and on the distance from ``u = 0``, which
    makes the solution depend on the target rather than on the path taken.
    """
    from scipy.optimize import least_squares

    from .plant import cable_to_config, forward_kinematics

    def tip(u):
        return forward_kinematics(cable_to_config(u, cfg), cfg)[1]

    def solve(p, start, anchor):
        return least_squares(lambda u: np.r_[tip(u) - p, smooth * (u - anchor), rest * u], start,
                             bounds=(-u_limit, u_limit), xtol=1e-12, ftol=1e-12, gtol=1e-12).x

    targets = np.atleast_2d(targets)
    # the straight pose is a stationary point of the tip depth, so the first
    # target gets several seeded starts and the smallest-norm solution
    starts = np.random.default_rng(0).uniform(-0.5 * u_limit, 0.5 * u_limit, (8, cfg.m))
    first = [solve(targets[0], s, np.zeros(cfg.m)) for s in starts]
    first = [u for u in first if np.linalg.norm(tip(u) - targets[0]) <= tol] or first
    u_prev = min(first, key=np.linalg.norm)
    out = []
    for k, p in enumerate(targets):
        u = solve(p, u_prev, u_prev)
        err = np.linalg.norm(tip(u) - p)
        if err > tol:
            raise InfeasibleReference(f"tip target {k} at {p} unreachable (residual {err:.2e} m)")
        u_prev = u
        out.append(u)
    return np.array(out)


def replay(u_seq: np.ndarray, t: np.ndarray, world: World) -> Trajectory:
    """Encode the quasi-static plant pose of every actuation in ``u_seq``."""
    xs, xp = [], []
    for u in u_seq:
        state = make_state(u, world.plant)
        xs.append(world.observe_shape(state))
        xp.append(state.tip.copy())
    return Trajectory(np.asarray(t, float), np.array(xs), np.array(xp), np.asarray(u_seq, float))


def make_reference(kind: str, world: World | None = None, duration: float = 30.0, dt: float = 0.05,
                   amplitude_x: float = 0.04, amplitude_z: float = 0.04, depth: float = -0.29,
                   u_limit: float = 0.8, seed: int = 0) -> Trajectory:
    """Feasible reference trajectory.

    ``infinity`` / ``eight`` follow a closed Lissajous tip path over ``duration``;
    ``random`` is a single seeded pose with ``|u| <= u_limit``.
    """
    world = World() if world is None else world
    if kind == "random":
        u = np.random.default_rng(seed).uniform(-u_limit, u_limit, world.plant.m)
        return replay(u[None, :], np.zeros(1), world)
    n = int(round(duration / dt))
    t = np.arange(n + 1) * dt
    targets = lissajous(kind, 2 * np.pi * t / duration, amplitude_x, amplitude_z, depth)
    targets[-1] = targets[0]
    u_seq = solve_tip_ik(targets, world.plant, u_limit)
    return replay(u_seq, t, world)


# --------------------------------------------------------------------------
# obstacles


@dataclass
class ObstaclePath:
    """Piecewise-linear obstacle motion through ``(t, x, y, z)`` waypoints."""

    t: np.ndarray
    points: np.ndarray
    radius: float = 6.0

    def at(self, t: float) -> np.ndarray:
        if len(self.t) == 1:
            return self.points[0].copy()
        return np.array([np.interp(t, self.t, self.points[:, i]) for i in range(3)])

    @classmethod
    def static(cls, position, radius: float = 6.0) -> "ObstaclePath":
        return cls(np.zeros(1), np.asarray(position, float).reshape(1, 3), radius)

    @classmethod
    def from_csv(cls, path, radius: float = 6.0) -> "ObstaclePath":
        head, table = _read_csv(path)
        if head != ["t", "x", "y", "z"]:
            raise ValueError(f"{path}: expected header t,x,y,z")
        if np.any(np.diff(table[:, 0]) <= 0):
            raise ValueError(f"{path}: waypoint times must increase")
        return cls(table[:, 0], table[:, 1:], radius)

    def to_csv(self, path) -> None:
        _write_csv(path, ["t", "x", "y", "z"], np.column_stack([self.t, self.points]))


class InfeasibleScenario(RuntimeError):
    pass


def view_clearance(world: World, state: PlantState, point) -> tuple[float, float]:
    """Image distance from ``point`` to the encoded chain in each view."""
    from .avoidance import view_distance
    from .encoding import state_to_chains

    chains = state_to_chains(world.observe_shape(state), world.encoding.anchors,
                             world.plant.n_segments)
    return tuple(float(view_distance(ch, project(np.asarray(point, float), v)[0])[0])
                 for ch, v in zip(chains, world.views))


def en_route_obstacle(world: World, u_start, reference: Trajectory, fraction: float = 0.5,
                      d_w: float = 25.0, clearance: float = 5.0, radius: float = 6.0,
                      offset: float = 0.04) -> ObstaclePath:
    """Static obstacle beside the straight line from the start tip to the target tip.

    The point ``fraction`` of the way along the line is shifted ``offset``
    metres horizontally, to the left of the direction of travel.  A head-on
    obstacle tends to trap the escape and position commands in a standstill;
    a side one is passed.  Both end poses must keep one view at least
    ``d_w + clearance`` away, so the obstacle can only interfere along the way.
    """
    cfg = world.plant
    tip0 = make_state(u_start, cfg).tip
    travel = reference.xp[-1] - tip0
    side = np.array([-travel[2], 0.0, travel[0]])
    norm = np.linalg.norm(side)
    if offset and norm < 1e-9:
        raise InfeasibleScenario("target tip is straight below the start tip; no sideways direction")
    point = tip0 + fraction * travel + (offset / norm * side if offset else 0.0)
    for name, u in (("start", u_start), ("target", reference.u[-1])):
        d = view_clearance(world, make_state(u, cfg), point)
        if max(d) < d_w + clearance:
            raise InfeasibleScenario(f"{name} pose is within {max(d):.1f} px of the obstacle "
                                     f"in both views (need {d_w + clearance:.1f})")
    return ObstaclePath.static(point, radius)


def approach_sweep(world: World, u_hold, duration: float, body_fraction: float = 2 / 3,
                   direction=(1.0, 0.0, 1.0), start: float = 0.09, stop: float = 0.02,
                   radius: float = 6.0) -> ObstaclePath:
    """Obstacle moving along ``direction`` toward a backbone point of the held pose.

    It starts ``start`` metres short of the point and ends ``stop`` metres short.
    """
    backbone = make_state(u_hold, world.plant).backbone
    target = backbone[int(round(body_fraction * (len(backbone) - 1)))]
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    return ObstaclePath(np.array([0.0, float(duration)]),
                        np.array([target - start * d, target - stop * d]), radius)


# the held pose of a self-motion run needs actuation headroom to reshape the body
TARGET_U_LIMIT = {"regulate": 0.8, "obstacle-regulate": 0.8, "track": 0.8, "self-motion": 0.4}


def initial_actuation(task: str, reference: Trajectory) -> np.ndarray:
    """Regulation starts from the straight pose; the other tasks start on the reference."""
    if task in ("regulate", "obstacle-regulate"):
        return np.zeros(reference.u.shape[1])
    return reference.u[0].copy()


# --------------------------------------------------------------------------
# closed-loop runs


class RunAborted(RuntimeError):
    def __init__(self, tick: int, cause: Exception):
        super().__init__(f"run aborted at tick {tick}: {type(cause).__name__}: {cause}")
        self.tick = tick
        self.cause = cause


def log_columns(n_shape: int = 24, m: int = 6) -> list[str]:
    return (["t"] + [f"xs_{i}" for i in range(n_shape)] + ["xp_0", "xp_1", "xp_2"]
            + ["e_shape_max", "e_tip", "e_tip_x", "e_tip_y", "e_tip_z"]
            + [f"u_{i}" for i in range(m)] + [f"udot_{i}" for i in range(m)]
            + ["d1", "d2", "active", "view", "clamped", "one_sided", "locked"])


@dataclass
class RunLog:
    columns: list
    rows: list = field(default_factory=list)

    def append(self, row) -> None:
        row = np.asarray(row, dtype=float)
        if row.size != len(self.columns):
            raise ValueError(f"log row has {row.size} values for {len(self.columns)} columns")
        self.rows.append(row)

    def table(self) -> np.ndarray:
        return np.array(self.rows).reshape(-1, len(self.columns))

    def column(self, name: str) -> np.ndarray:
        return self.table()[:, self.columns.index(name)]

    def to_csv(self, path) -> None:
        _write_csv(path, self.columns, self.table())

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        head, table = _read_csv(path)
        return cls(head, list(table))


def _stats(v: np.ndarray) -> dict:
    return {"final": float(v[-1]), "max": float(v.max()), "mean": float(v.mean())}


def summarize(run_log: RunLog) -> dict:
    """Metrics derived from the log alone, so they can be recomputed from the CSV."""
    col = run_log.column
    t = col("t")
    summary = {
        "ticks": len(t),
        "duration": float(t[-1] - t[0]) if len(t) else 0.0,
        "shape_error_px": _stats(col("e_shape_max")),
        "tip_error_m": _stats(col("e_tip")),
        "tip_axis_mean_abs_m": [float(np.abs(col(f"e_tip_{a}")).mean()) for a in "xyz"],
        "tip_axis_max_abs_m": [float(np.abs(col(f"e_tip_{a}")).max()) for a in "xyz"],
        "clamped_ticks": int(col("clamped").sum()),
    }
    d1, d2, active = col("d1"), col("d2"), col("active") > 0
    avoid = {"active_ticks": int(active.sum()), "first_activation_t": None,
             "min_max_distance_after_activation_px": None,
             "min_d1_px": None, "min_d2_px": None}
    if np.isfinite(d1).any():
        avoid["min_d1_px"] = float(np.nanmin(d1))
        avoid["min_d2_px"] = float(np.nanmin(d2))
    if active.any():
        first = int(np.argmax(active))
        avoid["first_activation_t"] = float(t[first])
        avoid["min_max_distance_after_activation_px"] = float(np.maximum(d1, d2)[first:].min())
        avoid["view1_ticks"] = int((col("view") == 1).sum())
        avoid["view2_ticks"] = int((col("view") == 2).sum())
    summary["avoidance"] = avoid
    return summary


@dataclass
class RunResult:
    log: RunLog
    summary: dict
    out_dir: Path | None = None


def run_task(task: str, world: World, shape_model, position_model, reference: Trajectory,
             duration: float, dt: float = 0.05, gains=None, avoidance=None,
             obstacle: ObstaclePath | None = None, initial_u=None, delta_u: float = 0.01,
             out_dir=None, snapshot_ticks=(0,), jacobian_fn=None) -> RunResult:
    """Closed loop: render, encode, estimate Jacobians, control, step the plant.

    ``jacobian_fn(x_s, x_p, u, state)`` may replace the model-based Jacobians
    (returns ``(J_s, J_p)``); it is used for oracle checks.  On any error the
    partial log is flushed to ``out_dir`` and :class:`RunAborted` is raised.
    """
    from . import avoidance as av
    from . import control
    from .encoding import control_point_errors, state_to_chains
    from .encoding import write_pgm

    gains = control.default_gains(task) if gains is None else gains
    avoid_cfg = av.AvoidanceConfig() if avoidance is None else avoidance
    uses_obstacle = task in ("obstacle-regulate", "self-motion")
    if uses_obstacle and obstacle is None:
        raise ValueError(f"task {task!r} needs an obstacle")
    cfg = world.plant
    n_ticks = int(round(duration / dt))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    u0 = initial_actuation(task, reference) if initial_u is None else np.asarray(initial_u, float)
    state = make_state(u0, cfg)
    anchors = world.encoding.anchors
    n_shape = world.encoding.state_dim
    run_log = RunLog(log_columns(n_shape, cfg.m))
    prev_dir = {1: None, 2: None}
    tick = 0
    try:
        for tick in range(n_ticks + 1):
            t = tick * dt
            images = world.images(state)
            if out is not None and tick in snapshot_ticks:
                for k, img in enumerate(images, start=1):
                    write_pgm(out / f"snapshot_{tick:05d}_view{k}.pgm", img)
            x_s = world.observe_shape(state, images)
            x_p = world.observe_tip(state)
            ref_s, ref_p = reference.at(tick)
            e_shape = control_point_errors(x_s, ref_s.x_d, cfg.n_segments).max()
            e_tip = ref_p.x_d - x_p
            d1 = d2 = np.nan
            active, view, clamped, one_sided, n_locked = False, 0, False, False, 0
            u_dot = np.zeros(cfg.m)
            r1 = r2 = None
            if uses_obstacle:
                obs = av.Obstacle(obstacle.at(t), obstacle.radius)
                chains = state_to_chains(x_s, anchors, cfg.n_segments)
                r1 = av.assess_view(1, chains[0], obs.in_view(world.views[0]), avoid_cfg, prev_dir[1])
                r2 = av.assess_view(2, chains[1], obs.in_view(world.views[1]), avoid_cfg, prev_dir[2])
                prev_dir = {1: r1.v_c, 2: r2.v_c}
                d1, d2 = r1.d, r2.d
            if tick < n_ticks:
                if jacobian_fn is not None:
                    j_s, j_p = jacobian_fn(x_s, x_p, state.u, state)
                else:
                    est_s = control.estimate_jacobian(shape_model, x_s, state.u, delta_u, cfg.u_bound, tick)
                    est_p = control.estimate_jacobian(position_model, x_p, state.u, delta_u, cfg.u_bound, tick)
                    j_s, j_p = est_s.matrix, est_p.matrix
                    one_sided = bool(est_s.one_sided.any() or est_p.one_sided.any())
                # inputs pinned at a bound cannot follow an outward command, and
                # would otherwise dominate the uniform rate clamp; re-solve without them
                locked = np.zeros(cfg.m, dtype=bool)
                for _ in range(cfg.m + 1):
                    js, jp = control.drop_columns(j_s, locked), control.drop_columns(j_p, locked)
                    if uses_obstacle:
                        res = av.overall_step(r1, r2, avoid_cfg, x_s, ref_s, js, x_p, ref_p, jp,
                                              gains, cfg.n_segments)
                        u_dot, active, view, clamped = res.u_dot, res.active, res.view, res.clamped
                    else:
                        raw = control.hybrid_step(x_s, ref_s, js, x_p, ref_p, jp, gains, clamp=False)
                        u_dot, clamped = control.clamp_rate(raw, gains.u_dot_max)
                    grown = locked | control.saturated(state.u, u_dot, cfg.u_bound)
                    if np.array_equal(grown, locked):
                        break
                    locked = grown
                n_locked = int(locked.sum())
            run_log.append(np.concatenate([
                [t], x_s, x_p, [e_shape, np.linalg.norm(e_tip)], e_tip, state.u, u_dot,
                [d1, d2, float(active), float(view), float(clamped), float(one_sided), float(n_locked)]]))
            if tick < n_ticks:
                state = step(state, u_dot, dt, cfg)
    except Exception as exc:
        if out is not None and run_log.rows:
            run_log.to_csv(out / "runlog.csv")
        raise RunAborted(tick, exc) from exc
    summary = summarize(run_log)
    if out is not None:
        write_outputs(out, run_log, summary, reference, obstacle,
                      avoid_cfg.d_w if uses_obstacle else None)
    return RunResult(run_log, summary, out)


def write_outputs(out: Path, run_log: RunLog, summary: dict, reference: Trajectory,
                  obstacle: ObstaclePath | None, d_w: float | None = None) -> None:
    from . import plots

    run_log.to_csv(out / "runlog.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    t = run_log.column("t")
    plots.line_plot(out / "errors.svg",
                    [("max control-point error (px)", t, run_log.column("e_shape_max")),
                     ("tip error (mm)", t, 1000 * run_log.column("e_tip"))],
                    title="Tracking errors", xlabel="t (s)", ylabel="error")
    xp = np.column_stack([run_log.column(f"xp_{i}") for i in range(3)])
    n = len(t)
    ref_tip = np.array([reference.xp[min(k, len(reference) - 1)] for k in range(n)])
    plots.line_plot(out / "tip_trajectory.svg",
                    [("tip", 1000 * xp[:, 0], 1000 * xp[:, 2]),
                     ("reference", 1000 * ref_tip[:, 0], 1000 * ref_tip[:, 2])],
                    title="Tip path (top view)", xlabel="x (mm)", ylabel="z (mm)", equal_axes=True)
    if obstacle is not None:
        plots.line_plot(out / "distances.svg",
                        [("view 1", t, run_log.column("d1")), ("view 2", t, run_log.column("d2"))],
                        title="Robot-obstacle image distance", xlabel="t (s)", ylabel="px",
                        hlines=() if d_w is None else (("d_w", d_w),))
