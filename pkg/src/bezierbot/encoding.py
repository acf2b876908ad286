"""Image -> Bezier shape state.

Per view: binarize, keep the largest 8-connected component, close small gaps,
thin to a one-pixel skeleton, order it from the base outwards and fit an
``M``-segment quadratic Bezier chain by per-segment least squares.  Two views
are stacked into the shape vector.

Shape vector layout (``K = 2`` views, ``M`` segments): the per-view feature
matrices ``S_k = [p_1 .. p_2M]`` (2 x 2M) are concatenated side by side,
transposed to ``4M x 2`` and column-stacked.  The result is::

    [x(view 1, p_1..p_2M), x(view 2, p_1..p_2M),
     y(view 1, p_1..p_2M), y(view 2, p_1..p_2M)]

:func:`view_indices` returns the positions belonging to one view.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import thin as _thin

from .bezier import N_SEGMENTS, BezierChain

N_VIEWS = 2
_EIGHT = np.ones((3, 3), dtype=bool)
_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class EncodingError(RuntimeError):
    pass


class NoForeground(EncodingError):
    pass


class BranchedSkeleton(EncodingError):
    pass


class CyclicSkeleton(EncodingError):
    pass


class FitUnderdetermined(EncodingError):
    pass


class ViewEncodingError(EncodingError):
    def __init__(self, view: int, cause: Exception):
        super().__init__(f"view {view}: {type(cause).__name__}: {cause}")
        self.view = view
        self.cause = cause


@dataclass(frozen=True)
class EncodingConfig:
    anchors: tuple[tuple[float, float], ...] = ((128.0, 24.0), (128.0, 24.0))
    policy: str = "otsu"  # or "fixed"
    threshold: int = 128
    closing_radius: int = 2
    spur_length: int = 3
    n_segments: int = N_SEGMENTS
    resample_spacing: float = 1.0  # px along the skeleton; 0 keeps raw pixels
    smooth_window: int = 5  # moving-average length after resampling; <= 1 disables
    subpixel: bool = True  # centre points on the grey-level stroke profile

    @property
    def state_dim(self) -> int:
        return 4 * self.n_segments * len(self.anchors)


# --------------------------------------------------------------------------
# image I/O


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


# --------------------------------------------------------------------------
# binary morphology


def binarize(img: np.ndarray, policy: str = "otsu", threshold: int = 128) -> np.ndarray:
    img = np.asarray(img)
    if policy == "otsu":
        if img.min() == img.max():
            raise NoForeground("uniform image")
        threshold = threshold_otsu(img)
    elif policy != "fixed":
        raise ValueError(f"unknown binarization policy {policy!r}")
    mask = img > threshold
    if mask.sum() > mask.size / 2:
        mask = ~mask
    if not mask.any():
        raise NoForeground("no pixel above threshold")
    return mask


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        raise NoForeground("empty mask")
    sizes = np.bincount(labels.ravel())[1:]
    # labels are numbered in raster order, so argmax picks the top-left one on ties
    return labels == (int(np.argmax(sizes)) + 1)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def close(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    if radius < 0:
        raise ValueError("closing radius must be >= 0")
    if radius == 0:
        return mask.copy()
    pad = radius + 1
    padded = np.pad(mask, pad)
    closed = ndimage.binary_closing(padded, structure=disk(radius))
    return closed[pad:-pad, pad:-pad]


def _degree(pixels: set, p) -> int:
    return sum((p[0] + dy, p[1] + dx) in pixels for dy, dx in _OFFSETS)


def _neighbour_list(pixels: set, p) -> list:
    return [(p[0] + dy, p[1] + dx) for dy, dx in _OFFSETS if (p[0] + dy, p[1] + dx) in pixels]


def _redundant(pixels: set, p) -> bool:
    """True if ``p`` is not an end and its neighbours stay 8-connected without it."""
    nb = _neighbour_list(pixels, p)
    if len(nb) < 2:
        return False
    seen = {nb[0]}
    stack = [nb[0]]
    while stack:
        a = stack.pop()
        for b in nb:
            if b not in seen and max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1:
                seen.add(b)
                stack.append(b)
    return len(seen) == len(nb)


def _remove_redundant(pixels: set) -> set:
    pixels = set(pixels)
    changed = True
    while changed:
        changed = False
        for p in sorted(pixels):
            if _redundant(pixels, p):
                pixels.discard(p)
                changed = True
    return pixels


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Two-subiteration parallel thinning plus removal of staircase corner pixels.

    Thinning is scikit-image's Guo-Hall implementation (the same rule as
    MATLAB's ``bwmorph(..., 'thin', Inf)``).  Unlike the textbook Zhang-Suen
    rule it does not eat into diagonal stroke ends.  The result is one pixel
    wide in the 8-connected sense: every pixel that is not an end or a
    junction has exactly two neighbours.
    """
    thin = _thin(np.asarray(mask, dtype=bool))
    pixels = _remove_redundant(set(zip(*np.nonzero(thin))))
    out = np.zeros_like(thin)
    if pixels:
        rr, cc = zip(*pixels)
        out[list(rr), list(cc)] = True
    return out


def _prune_spurs(pixels: set, max_len: int) -> set:
    pixels = set(pixels)
    ends = sorted(p for p in pixels if _degree(pixels, p) == 1)
    doomed = set()
    for e in ends:
        branch = [e]
        prev, cur = None, e
        while True:
            nxt = [n for n in _neighbour_list(pixels, cur) if n != prev]
            if len(nxt) != 1:
                break
            prev, cur = cur, nxt[0]
            if _degree(pixels, cur) != 2:
                break
            branch.append(cur)
        if _degree(pixels, cur) >= 3 and len(branch) <= max_len:
            doomed.update(branch)
    if doomed:
        pixels -= doomed
        pixels = _remove_redundant(pixels)
    return pixels


def _bfs_path(pixels: set, start, goal) -> list:
    parent = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur == goal:
            break
        for n in _neighbour_list(pixels, cur):
            if n not in parent:
                parent[n] = cur
                queue.append(n)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def order_skeleton(skel: np.ndarray, base_anchor, spur_length: int = 3) -> np.ndarray:
    """Ordered ``(x, y)`` skeleton pixels, from the end nearest the anchor outwards."""
    pixels = set(zip(*np.nonzero(skel)))
    if not pixels:
        raise NoForeground("empty skeleton")
    pixels = _prune_spurs(_remove_redundant(pixels), spur_length)
    if len(pixels) == 1:
        (r, c), = pixels
        return np.array([[c, r]], dtype=float)
    ends = sorted(p for p in pixels if _degree(pixels, p) <= 1)
    if not ends:
        raise CyclicSkeleton("skeleton has no end points")
    if len(ends) > 2:
        raise BranchedSkeleton(f"skeleton has {len(ends)} end points after spur pruning")
    if len(ends) == 1:
        raise BranchedSkeleton("skeleton has a single end point (closed loop with a tail)")
    ax, ay = base_anchor
    d = [np.hypot(c - ax, r - ay) for r, c in ends]
    start = ends[0] if d[0] <= d[1] else ends[1]
    goal = ends[1] if start == ends[0] else ends[0]
    path = _bfs_path(pixels, start, goal)
    return np.array([[c, r] for r, c in path], dtype=float)


def _pixel_line(a, b) -> np.ndarray:
    """8-connected pixel run from ``a`` to ``b`` (both included)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n = int(np.max(np.abs(np.rint(b) - np.rint(a))))
    if n == 0:
        return np.rint(a)[None, :]
    t = np.arange(n + 1)[:, None] / n
    return np.rint(a + t * (b - a))


def _edge_midpoint(inside: np.ndarray, outside: np.ndarray, sign: float):
    """Boundary position between the outermost inside and innermost outside samples."""
    if inside.size == 0 or outside.size == 0:
        return None
    if sign > 0:
        return 0.5 * (inside.max() + outside.min())
    return 0.5 * (inside.min() + outside.max())


def estimate_tip(points: np.ndarray, mask: np.ndarray, tail: int = 12, radius: int = 14):
    """Sub-pixel centre of the round stroke end beyond the last skeleton pixel.

    A line fitted to the last ``tail`` skeleton pixels gives the local axis.
    Stroke edges are located on both sides a few pixels before the end, which
    fixes the axis offset and the half-width.  Along the axis, every mask pixel
    near it bounds the cap centre from below and every background pixel bounds
    it from above; the estimate is the middle of that interval.
    """
    pts = np.asarray(points, dtype=float)
    seg = pts[-tail:]
    centre = seg.mean(0)
    _, _, vt = np.linalg.svd(seg - centre)
    d = vt[0] if vt[0] @ (seg[-1] - seg[0]) >= 0 else -vt[0]
    nrm = np.array([-d[1], d[0]])
    h, w = mask.shape
    c0, r0 = int(pts[-1, 0]), int(pts[-1, 1])
    rows, cols = np.mgrid[max(r0 - radius, 0):min(r0 + radius + 1, h),
                          max(c0 - radius, 0):min(c0 + radius + 1, w)]
    inside = mask[rows, cols].ravel()
    rel = np.column_stack([cols.ravel(), rows.ravel()]) - centre
    along = rel @ d
    across = rel @ nrm
    a_end = (pts[-1] - centre) @ d

    body = (along > a_end - 10) & (along < a_end - 2)
    left = _edge_midpoint(across[body & inside & (across > 0)], across[body & ~inside & (across > 0)], 1)
    right = _edge_midpoint(across[body & inside & (across < 0)], across[body & ~inside & (across < 0)], -1)
    if left is None or right is None:
        return pts[-1].copy()
    offset = 0.5 * (left + right)
    half = 0.5 * (left - right)
    across = across - offset
    # stay a pixel inside the edge where the circle model is least sensitive
    cap = (along > a_end - 1) & (np.abs(across) < half - 1.0)
    bound = along - np.sqrt(np.maximum(half ** 2 - across ** 2, 0.0))
    lower = max(bound[cap & inside].max(initial=a_end), a_end)
    upper = bound[cap & ~inside]
    reach = 0.5 * (lower + upper.min()) if upper.size else lower
    return centre + offset * nrm + reach * d


def recover_ends(points: np.ndarray, mask: np.ndarray, base_anchor) -> np.ndarray:
    """Undo the end shortening that thinning leaves on the ordered skeleton.

    The base end is joined to ``base_anchor`` by a straight pixel run and the
    tip is extended, with unit spacing, to :func:`estimate_tip`.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 12:
        return pts
    head = _pixel_line(base_anchor, pts[0])[:-1]
    tip = estimate_tip(pts, mask)
    gap = tip - pts[-1]
    n = int(np.ceil(np.hypot(*gap)))
    tail = pts[-1] + gap * (np.arange(1, n + 1)[:, None] / n) if n else np.empty((0, 2))
    out = np.vstack([head, pts, tail])
    keep = np.ones(len(out), dtype=bool)
    seen = set()
    for i, (x, y) in enumerate(out):
        if (x, y) in seen:
            keep[i] = False
        seen.add((x, y))
    return out[keep]


def resample_polyline(points, spacing: float = 1.0, multiple: int = 1) -> np.ndarray:
    """Equally spaced points along an ordered polyline, endpoints kept.

    The point count is rounded to a multiple of ``multiple`` (spacing adjusts
    slightly), so an equal-count split into that many runs lands at fixed arc
    length fractions instead of jumping by a point as the length changes.
    """
    p = np.asarray(points, dtype=float)
    if len(p) < 2 or spacing <= 0:
        return p
    cum = np.r_[0.0, np.cumsum(np.hypot(*np.diff(p, axis=0).T))]
    n = max(2, int(round(cum[-1] / spacing)) + 1)
    if multiple > 1:
        n = multiple * max(2, int(round(n / multiple)))
    t = np.linspace(0.0, cum[-1], n)
    return np.column_stack([np.interp(t, cum, p[:, 0]), np.interp(t, cum, p[:, 1])])


def smooth_polyline(points, window: int = 5) -> np.ndarray:
    """Moving average along the curve with both endpoints pinned."""
    p = np.asarray(points, dtype=float)
    if window <= 1 or len(p) < 3:
        return p
    q = ndimage.uniform_filter1d(p, window, axis=0, mode="nearest")
    q[0], q[-1] = p[0], p[-1]
    return q


def regularize(points, spacing: float = 1.0, window: int = 5, multiple: int = 1) -> np.ndarray:
    """Even out the 1 / sqrt(2) step lengths of an 8-connected pixel path.

    Index-based segment splitting assumes evenly spaced points; raw pixel
    paths make the split drift with the local staircase pattern.
    """
    if spacing <= 0:
        return smooth_polyline(points, window)
    p = resample_polyline(points, spacing)
    if window > 1:
        p = smooth_polyline(p, window)
    return resample_polyline(p, spacing, multiple)


def centre_on_profile(points, img: np.ndarray, mask: np.ndarray, half_span: float = 6.0,
                      step: float = 0.5, iterations: int = 2) -> np.ndarray:
    """Move each point along its local normal to the intensity centroid of the stroke.

    Anti-aliased strokes have a symmetric cross-section, so the centroid of
    the foreground-relative grey levels sits on the centreline with sub-pixel
    accuracy.  The first point (the base anchor) is left in place.
    """
    p = np.array(points, dtype=float)
    if len(p) < 3:
        return p
    img = np.asarray(img, dtype=float)
    outside = ~ndimage.binary_dilation(mask, iterations=3)
    bg = float(np.median(img[outside])) if outside.any() else 0.0
    sign = 1.0 if img[mask].mean() >= bg else -1.0
    weight = np.clip(sign * (img - bg), 0.0, None)
    offs = np.arange(-half_span, half_span + step / 2, step)
    for _ in range(iterations):
        tang = ndimage.uniform_filter1d(np.gradient(p, axis=0), 5, axis=0, mode="nearest")
        tang /= np.maximum(np.hypot(*tang.T), 1e-12)[:, None]
        nrm = np.column_stack([-tang[:, 1], tang[:, 0]])
        xs = p[:, 0, None] + offs[None, :] * nrm[:, 0, None]
        ys = p[:, 1, None] + offs[None, :] * nrm[:, 1, None]
        vals = ndimage.map_coordinates(weight, [ys.ravel(), xs.ravel()], order=1,
                                       mode="constant").reshape(xs.shape)
        total = vals.sum(1)
        shift = np.where(total > 0, (vals @ offs) / np.maximum(total, 1e-12), 0.0)
        shift[0] = 0.0
        p += shift[:, None] * nrm
    return p


def _foreground_weight(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grey levels rescaled so background is 0 and the stroke core is 1."""
    img = np.asarray(img, dtype=float)
    outside = ~ndimage.binary_dilation(mask, iterations=3)
    bg = float(np.median(img[outside])) if outside.any() else 0.0
    core = ndimage.binary_erosion(mask, iterations=1)
    level = float(np.median(img[core if core.any() else mask]))
    if level == bg:
        return mask.astype(float)
    return np.clip((img - bg) / (level - bg), 0.0, None)


def refine_tip(points, img: np.ndarray, mask: np.ndarray, back: float = 8.0,
               reach: float = 16.0, step: float = 0.25) -> np.ndarray:
    """Re-place the tip from the integrated grey-level profile of the end cap.

    Along the tip axis, the integral of the normalised intensity from a point
    ``back`` pixels inside the stroke equals the distance to the tip plus half
    the stroke width; the width is the integral across the stroke at that
    point.  Points beyond the reference are replaced by a unit-spaced run to
    the refined tip.
    """
    p = np.asarray(points, dtype=float)
    if len(p) < 2 * back + 2:
        return p
    weight = _foreground_weight(img, mask)
    cum = np.r_[0.0, np.cumsum(np.hypot(*np.diff(p, axis=0).T))]
    k = int(np.searchsorted(cum, cum[-1] - back))
    a0 = p[k]
    d = p[-1] - p[max(0, k - int(back))]
    d /= max(np.hypot(*d), 1e-12)
    nrm = np.array([-d[1], d[0]])
    t = np.arange(0.0, back + reach, step)
    c = np.arange(-reach / 2, reach / 2 + step / 2, step)

    def sample(pts):
        return ndimage.map_coordinates(weight, [pts[:, 1], pts[:, 0]], order=1, mode="constant")

    along = sample(a0 + t[:, None] * d).sum() * step
    across = sample(a0 + c[:, None] * nrm).sum() * step
    length = along - across / 2.0
    if not np.isfinite(length) or length <= 0:
        return p
    tip = a0 + length * d
    n = max(1, int(np.ceil(length)))
    tail = a0 + (tip - a0) * (np.arange(1, n + 1)[:, None] / n)
    return np.vstack([p[:k + 1], tail])


# --------------------------------------------------------------------------
# Bezier fitting


def split_counts(n_points: int, n_segments: int) -> list[int]:
    base = n_points // n_segments
    counts = [base] * n_segments
    counts[-1] += n_points - base * n_segments
    return counts


def fit_chain(points, n_segments: int = N_SEGMENTS, base_anchor=None) -> BezierChain:
    """Least-squares chain through ordered points.

    The points are split into ``n_segments`` consecutive runs of equal length
    (the remainder joins the last run).  Segment end points are the last point
    of each run; the first control point is ``base_anchor`` when given, else
    the first point.  Each middle control point has the closed form
    ``sum(w_j r_j) / sum(w_j^2)`` with ``w_j = 2 (1 - s_j) s_j``.
    """
    q = np.asarray(points, dtype=float)
    if len(q) < 3 * n_segments + 1:
        raise FitUnderdetermined(f"{len(q)} points cannot fit {n_segments} segments")
    counts = split_counts(len(q), n_segments)
    ctrl = np.empty((2 * n_segments + 1, 2))
    ctrl[0] = q[0] if base_anchor is None else base_anchor
    start = 0
    for i, n_i in enumerate(counts):
        sub = q[start:start + n_i]
        start += n_i
        ctrl[2 * i + 2] = sub[-1]
        s = np.arange(n_i) / (n_i - 1)
        w = 2.0 * (1.0 - s) * s
        r = sub - np.outer((1.0 - s) ** 2, ctrl[2 * i]) - np.outer(s * s, ctrl[2 * i + 2])
        ctrl[2 * i + 1] = (w @ r) / (w @ w)
    return BezierChain(ctrl)


def fit_objective(points, chain: BezierChain, segment: int) -> float:
    """Sum of squared residuals of one segment's least-squares problem."""
    q = np.asarray(points, dtype=float)
    counts = split_counts(len(q), chain.n_segments)
    start = sum(counts[:segment])
    sub = q[start:start + counts[segment]]
    s = np.arange(len(sub)) / (len(sub) - 1)
    p0, p1, p2 = chain.segment(segment)
    model = np.outer((1 - s) ** 2, p0) + np.outer(2 * (1 - s) * s, p1) + np.outer(s * s, p2)
    return float(((model - sub) ** 2).sum())


# --------------------------------------------------------------------------
# shape vector


def view_indices(view: int, n_segments: int = N_SEGMENTS, n_views: int = N_VIEWS) -> np.ndarray:
    """Positions of one view's ``[x_1..x_2M, y_1..y_2M]`` inside the shape vector."""
    n = 2 * n_segments
    xs = np.arange(n) + (view - 1) * n
    return np.concatenate([xs, xs + n * n_views])


def chains_to_state(chains) -> np.ndarray:
    n_views = len(chains)
    n_seg = chains[0].n_segments
    x = np.empty(4 * n_seg * n_views)
    for k, chain in enumerate(chains, start=1):
        x[view_indices(k, n_seg, n_views)] = chain.params()
    return x


def state_to_chains(x, anchors, n_segments: int = N_SEGMENTS) -> list[BezierChain]:
    x = np.asarray(x, dtype=float)
    n_views = len(anchors)
    if x.size != 4 * n_segments * n_views:
        raise ValueError(f"shape vector has {x.size} entries, expected {4 * n_segments * n_views}")
    return [BezierChain.from_params(x[view_indices(k, n_segments, n_views)], anchors[k - 1])
            for k in range(1, n_views + 1)]


def control_point_errors(x, x_ref, n_segments: int = N_SEGMENTS, n_views: int = N_VIEWS) -> np.ndarray:
    """Euclidean error per (view, control point), shape ``(n_views, 2M)``."""
    e = np.asarray(x_ref, float) - np.asarray(x, float)
    out = np.empty((n_views, 2 * n_segments))
    for k in range(1, n_views + 1):
        ev = e[view_indices(k, n_segments, n_views)]
        out[k - 1] = np.hypot(ev[:2 * n_segments], ev[2 * n_segments:])
    return out


# --------------------------------------------------------------------------
# pipeline


@dataclass
class ViewTrace:
    """Intermediate products of one view's encoding, kept for debugging."""
    mask: np.ndarray
    skeleton: np.ndarray
    points: np.ndarray
    chain: BezierChain
    extras: dict = field(default_factory=dict)


def encode_view(img: np.ndarray, base_anchor, cfg: EncodingConfig = EncodingConfig(),
                trace: bool = False):
    mask = binarize(img, cfg.policy, cfg.threshold)
    mask = close(largest_component(mask), cfg.closing_radius)
    skel = skeletonize(mask)
    points = order_skeleton(skel, base_anchor, cfg.spur_length)
    points = recover_ends(points, mask, base_anchor)
    points = regularize(points, cfg.resample_spacing, cfg.smooth_window, cfg.n_segments)
    if cfg.subpixel:
        points = refine_tip(centre_on_profile(points, img, mask), img, mask)
        points = resample_polyline(points, cfg.resample_spacing, cfg.n_segments)
    chain = fit_chain(points, cfg.n_segments, base_anchor)
    if trace:
        return ViewTrace(mask, skel, points, chain)
    return chain


def encode_views(images, cfg: EncodingConfig = EncodingConfig()) -> np.ndarray:
    if len(images) != len(cfg.anchors):
        raise ValueError(f"got {len(images)} images for {len(cfg.anchors)} views")
    chains = []
    for k, (img, anchor) in enumerate(zip(images, cfg.anchors), start=1):
        try:
            chains.append(encode_view(img, anchor, cfg))
        except EncodingError as exc:
            raise ViewEncodingError(k, exc) from exc
    return chains_to_state(chains)
