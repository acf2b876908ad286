"""Quadratic multi-segment Bezier chains.

Points are ``(x, y)`` pixel coordinates (origin top-left, y downward).  A chain
with ``M`` segments carries ``2M + 1`` control points; segment ``i`` uses
``p[2i], p[2i+1], p[2i+2]`` so neighbouring segments share an endpoint.

Per-view shape parameters exclude the fixed base point ``p[0]`` and are laid
out as ``[x_1 .. x_2M, y_1 .. y_2M]``, i.e. the column-stacked transpose of the
``2 x 2M`` feature matrix ``[p_1 .. p_2M]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_SEGMENTS = 3
DEFAULT_N_D = 300
DEFAULT_PINV_DAMPING = 1e-6


def _check_unit(s: float) -> float:
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"curve parameter s={s} outside [0, 1]")
    return s


def bernstein_weights(s: float) -> tuple[float, float, float]:
    s = _check_unit(s)
    return ((1.0 - s) ** 2, 2.0 * (1.0 - s) * s, s * s)


def eval_segment(p0, p1, p2, s: float) -> np.ndarray:
    w0, w1, w2 = bernstein_weights(s)
    return w0 * np.asarray(p0, float) + w1 * np.asarray(p1, float) + w2 * np.asarray(p2, float)


@dataclass(frozen=True)
class BezierChain:
    control_points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.control_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3 or pts.shape[0] % 2 == 0:
            raise ValueError(f"expected (2M+1, 2) control points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("control points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "control_points", pts)

    @property
    def n_segments(self) -> int:
        return (self.control_points.shape[0] - 1) // 2

    @property
    def base(self) -> np.ndarray:
        return self.control_points[0]

    def segment(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n_segments:
            raise IndexError(f"segment index {i} out of range [0, {self.n_segments})")
        return self.control_points[2 * i: 2 * i + 3]

    def params(self) -> np.ndarray:
        """Per-view shape parameters ``[x_1..x_2M, y_1..y_2M]``."""
        rest = self.control_points[1:]
        return np.concatenate([rest[:, 0], rest[:, 1]])

    @classmethod
    def from_params(cls, params, base) -> "BezierChain":
        params = np.asarray(params, dtype=float)
        n = params.size // 2
        pts = np.column_stack([params[:n], params[n:]])
        return cls(np.vstack([np.asarray(base, float)[None, :], pts]))

    def translated(self, offset) -> "BezierChain":
        return BezierChain(self.control_points + np.asarray(offset, float))


@dataclass(frozen=True)
class ChainSample:
    point: np.ndarray
    segment_index: int
    local_param: float


def eval_chain(chain: BezierChain, i: int, s: float) -> np.ndarray:
    p0, p1, p2 = chain.segment(i)
    return eval_segment(p0, p1, p2, s)


def _sample_grid(n_segments: int, n_d: int) -> tuple[np.ndarray, np.ndarray]:
    if n_d < 2:
        raise ValueError(f"n_d must be >= 2, got {n_d}")
    if n_d % n_segments or n_d // n_segments < 2:
        raise ValueError(f"n_d={n_d} must be a multiple of {n_segments} with >= 2 samples per segment")
    per_seg = n_d // n_segments
    seg = np.repeat(np.arange(n_segments), per_seg)
    s = np.tile(np.linspace(0.0, 1.0, per_seg), n_segments)
    return seg, s


def _eval_grid(chain: BezierChain, seg: np.ndarray, s: np.ndarray) -> np.ndarray:
    pts = chain.control_points
    w = np.column_stack([(1 - s) ** 2, 2 * (1 - s) * s, s * s])
    return (w[:, 0:1] * pts[2 * seg] + w[:, 1:2] * pts[2 * seg + 1]
            + w[:, 2:3] * pts[2 * seg + 2])


def discretize_chain(chain: BezierChain, n_d: int = DEFAULT_N_D) -> list[ChainSample]:
    """Uniform samples ``n_d / M`` per segment, base to tip.

    Shared endpoints appear twice (end of one segment, start of the next);
    this is harmless for distance queries and keeps per-segment counts equal.
    """
    seg, s = _sample_grid(chain.n_segments, n_d)
    pts = _eval_grid(chain, seg, s)
    return [ChainSample(pts[k], int(seg[k]), float(s[k])) for k in range(len(s))]


def closest_point(chain: BezierChain, target, n_d: int = DEFAULT_N_D) -> tuple[ChainSample, float]:
    seg, s = _sample_grid(chain.n_segments, n_d)
    pts = _eval_grid(chain, seg, s)
    dist = np.hypot(*(pts - np.asarray(target, float)).T)
    # argmin returns the first minimum; the grid is ordered by (segment, s)
    k = int(np.argmin(dist))
    return ChainSample(pts[k], int(seg[k]), float(s[k])), float(dist[k])


def chain_point_jacobian(sample: ChainSample, n_segments: int = N_SEGMENTS) -> np.ndarray:
    """d(point)/d(per-view shape params), a ``2 x 4M`` matrix.

    Columns follow the ``[x_1..x_2M, y_1..y_2M]`` layout; the base point has no
    columns because it never moves.
    """
    n_pts = 2 * n_segments
    jac = np.zeros((2, 2 * n_pts))
    weights = bernstein_weights(sample.local_param)
    for k, w in enumerate(weights):
        j = 2 * sample.segment_index + k  # control point index in 0..2M
        if j == 0 or w == 0.0:
            continue
        jac[0, j - 1] = w
        jac[1, n_pts + j - 1] = w
    return jac


def distribute_velocity(sample: ChainSample, v_c, damping: float = DEFAULT_PINV_DAMPING,
                        n_segments: int = N_SEGMENTS) -> np.ndarray:
    """Least-norm per-view parameter velocity that moves the sample point by ``v_c``.

    Uses ``A^T (A A^T + damping I)^-1`` with ``A`` from :func:`chain_point_jacobian`.
    """
    a = chain_point_jacobian(sample, n_segments)
    gram = a @ a.T + damping * np.eye(2)
    return a.T @ np.linalg.solve(gram, np.asarray(v_c, dtype=float))
