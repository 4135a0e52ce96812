"""Pinhole projection, P3P, RANSAC pose estimation and pose-error metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .model import LabeledPointCloud, PinholeCamera, Pose


class DegenerateConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class Match2D3D:
    pixel: tuple  # (u, v)
    point_id: int
    ratio: float = 0.0


@dataclass(eq=False)
class MatchSet:
    """Column-oriented 2D-3D matches.

    ``best_dist`` / ``second_dist`` are the descriptor distances of the first
    and second nearest neighbour; ``is_inlier`` is simulation ground truth
    and is never read by the estimators.
    """

    pixels: np.ndarray
    point_ids: np.ndarray
    best_dist: Optional[np.ndarray] = None
    second_dist: Optional[np.ndarray] = None
    is_inlier: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64).reshape(-1)
        n = len(self.pixels)
        if len(self.point_ids) != n:
            raise ValueError("pixels and point_ids differ in length")
        for name in ("best_dist", "second_dist", "is_inlier"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=bool if name == "is_inlier" else np.float64).reshape(-1)
                if len(v) != n:
                    raise ValueError(f"{name} length does not match")
                setattr(self, name, v)

    def __len__(self):
        return len(self.pixels)

    @property
    def ratios(self) -> np.ndarray:
        if self.best_dist is None or self.second_dist is None:
            return np.zeros(len(self))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = self.best_dist / self.second_dist
        return np.clip(np.nan_to_num(r, nan=1.0, posinf=1.0), 0.0, 1.0)

    def subset(self, index) -> "MatchSet":
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return MatchSet(self.pixels[index], self.point_ids[index], pick(self.best_dist), pick(self.second_dist), pick(self.is_inlier))

    def to_list(self) -> list:
        return [Match2D3D(tuple(p), int(i), float(r)) for p, i, r in zip(self.pixels, self.point_ids, self.ratios)]

    @classmethod
    def from_list(cls, matches) -> "MatchSet":
        matches = list(matches)
        return cls(
            np.array([m.pixel for m in matches], dtype=np.float64).reshape(-1, 2),
            np.array([m.point_id for m in matches], dtype=np.int64),
        )

    def to_dict(self) -> dict:
        out = {"pixels": self.pixels.tolist(), "point_ids": self.point_ids.tolist()}
        for name in ("best_dist", "second_dist", "is_inlier"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MatchSet":
        return cls(d["pixels"], d["point_ids"], d.get("best_dist"), d.get("second_dist"), d.get("is_inlier"))


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 10000
    inlier_threshold_px: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier threshold must be positive")


@dataclass
class RansacResult:
    pose: Optional[Pose]
    inlier_mask: np.ndarray
    inlier_count: int
    inlier_ratio: float
    success: bool


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project_points(camera: PinholeCamera, R: np.ndarray, t: np.ndarray, points: np.ndarray):
    """Project world points ``(M, 3)`` under poses ``R (..., 3, 3)``, ``t (..., 3)``.

    Returns ``(pixels (..., M, 2), depth (..., M), visible (..., M))``.
    """
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    X = np.einsum("...ij,mj->...mi", R, np.asarray(points, dtype=np.float64)) + t[..., None, :]
    z = X[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * X[..., 0] / z + camera.cx
        v = camera.fy * X[..., 1] / z + camera.cy
    pix = np.stack([u, v], axis=-1)
    visible = (z > 0) & np.isfinite(u) & np.isfinite(v)
    rows = np.floor(v + 0.5)
    cols = np.floor(u + 0.5)
    visible &= (rows >= 0) & (rows < camera.height) & (cols >= 0) & (cols < camera.width)
    return pix, z, visible


def project(camera: PinholeCamera, pose: Pose, point) -> Optional[tuple]:
    """Pixel ``(u, v)`` of a world point, or ``None`` when not visible."""
    pix, _, vis = project_points(camera, pose.rotation, pose.translation, np.asarray(point, dtype=np.float64).reshape(1, 3))
    return (float(pix[0, 0]), float(pix[0, 1])) if vis[0] else None


# ---------------------------------------------------------------------------
# P3P
# ---------------------------------------------------------------------------


def _solve3(J: np.ndarray, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched 3x3 solve via the adjugate; returns ``(x, ok)``."""
    c0 = np.cross(J[..., 1, :], J[..., 2, :])
    c1 = np.cross(J[..., 2, :], J[..., 0, :])
    c2 = np.cross(J[..., 0, :], J[..., 1, :])
    det = np.einsum("...i,...i->...", J[..., 0, :], c0)
    scale = np.abs(J).reshape(*J.shape[:-2], 9).max(-1) ** 3
    ok = np.abs(det) > 1e-14 * np.maximum(scale, 1e-300)
    safe = np.where(ok, det, 1.0)
    inv_t = np.stack([c0, c1, c2], axis=-1) / safe[..., None, None]
    x = np.einsum("...ij,...j->...i", inv_t, F)
    return np.where(ok[..., None], x, 0.0), ok


def _triangle_frame(P: np.ndarray) -> np.ndarray:
    """Orthonormal frame (columns) spanned by a stack of triangles ``(..., 3, 3)``."""
    e1 = P[..., 1, :] - P[..., 0, :]
    e1 = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    e3 = np.cross(e1, P[..., 2, :] - P[..., 0, :])
    e3 = e3 / np.linalg.norm(e3, axis=-1, keepdims=True)
    e2 = np.cross(e3, e1)
    return np.stack([e1, e2, e3], axis=-1)


def _align_triangles(P: np.ndarray, X: np.ndarray):
    """Rigid ``R, t`` with ``X = R P + t`` for congruent triangle stacks."""
    R = _triangle_frame(X) @ np.swapaxes(_triangle_frame(P), -1, -2)
    t = X[..., 0, :] - np.einsum("...ij,...j->...i", R, P[..., 0, :])
    return R, t


def p3p_batch(bearings: np.ndarray, points: np.ndarray):
    """Solve many P3P instances at once.

    Parameters
    ----------
    bearings : (B, 3, 3)
        Unit viewing rays in the camera frame, one per row.
    points : (B, 3, 3)
        Matching world points.

    Returns
    -------
    R : (B, 4, 3, 3), t : (B, 4, 3), valid : (B, 4)

    Notes
    -----
    Grunert's formulation: with depths ``s2 = u s1`` and ``s3 = v s1`` the
    three law-of-cosines constraints reduce to a quartic in ``v``.  Roots are
    taken from the companion matrix, the depths are polished by Newton steps
    on the original distance equations, and the pose follows from aligning
    the three camera-frame points with their world counterparts.
    """
    f = np.asarray(bearings, dtype=np.float64)
    P = np.asarray(points, dtype=np.float64)
    B = len(f)
    a2 = ((P[:, 1] - P[:, 2]) ** 2).sum(-1)
    b2 = ((P[:, 0] - P[:, 2]) ** 2).sum(-1)
    c2 = ((P[:, 0] - P[:, 1]) ** 2).sum(-1)
    ca = (f[:, 1] * f[:, 2]).sum(-1)
    cb = (f[:, 0] * f[:, 2]).sum(-1)
    cg = (f[:, 0] * f[:, 1]).sum(-1)

    # collinear world points have zero triangle area
    area2 = (np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]) ** 2).sum(-1)
    scale2 = np.maximum(np.maximum(a2, b2), c2)
    good = (area2 > 1e-12 * scale2**2) & (b2 > 0)

    with np.errstate(divide="ignore", invalid="ignore"):
        b2s = np.where(b2 > 0, b2, 1.0)
        k1 = (a2 - c2) / b2s
        k2 = (a2 + c2) / b2s
        A4 = (k1 - 1) ** 2 - 4 * c2 / b2s * ca**2
        A3 = 4 * (k1 * (1 - k1) * cb - (1 - k2) * ca * cg + 2 * c2 / b2s * ca**2 * cb)
        A2 = 2 * (
            k1**2 - 1 + 2 * k1**2 * cb**2 + 2 * (b2 - c2) / b2s * ca**2 - 4 * k2 * ca * cb * cg + 2 * (b2 - a2) / b2s * cg**2
        )
        A1 = 4 * (-k1 * (1 + k1) * cb + 2 * a2 / b2s * cg**2 * cb - (1 - k2) * ca * cg)
        A0 = (1 + k1) ** 2 - 4 * a2 / b2s * cg**2
    coeffs = np.stack([A4, A3, A2, A1, A0], axis=-1)
    lead_ok = np.abs(A4) > 1e-12 * np.abs(coeffs).max(-1)
    good &= lead_ok & np.all(np.isfinite(coeffs), -1)
    lead = np.where(good, A4, 1.0)
    comp = np.zeros((B, 4, 4))
    comp[:, 0, :] = -coeffs[:, 1:] / lead[:, None]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    comp[~good] = np.diag([1.0, 1.0, 1.0], -1)  # placeholder with real roots
    roots = np.linalg.eigvals(comp)
    real = np.abs(roots.imag) <= 1e-6 * np.maximum(1.0, np.abs(roots.real))
    v = roots.real.copy()

    # Newton polish of the quartic roots
    for _ in range(3):
        pv = (((A4[:, None] * v + A3[:, None]) * v + A2[:, None]) * v + A1[:, None]) * v + A0[:, None]
        dp = ((4 * A4[:, None] * v + 3 * A3[:, None]) * v + 2 * A2[:, None]) * v + A1[:, None]
        step = np.where(np.abs(dp) > 1e-300, pv / np.where(dp == 0, 1.0, dp), 0.0)
        v = np.where(np.isfinite(step) & (np.abs(step) < 1e-2 * (1 + np.abs(v))), v - step, v)

    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = np.sqrt(b2[:, None] / (1 + v**2 - 2 * v * cb[:, None]))
        s3 = v * s1
        den = 2 * (s1 * cg[:, None] - s3 * ca[:, None])
        s2 = (s1**2 - s3**2 - c2[:, None] + a2[:, None]) / den
    depths = np.stack([s1, s2, s3], axis=-1)  # (B, 4, 3)
    ok = real & good[:, None] & np.all(np.isfinite(depths), -1) & np.all(depths > 0, -1)
    depths = np.where(ok[..., None], depths, 1.0)

    # Newton polish on the distance equations
    cab = np.stack([cg, ca, cb], -1)[:, None, :]
    d2 = np.stack([c2, a2, b2], -1)[:, None, :]
    for _ in range(3):
        s1, s2, s3 = depths[..., 0], depths[..., 1], depths[..., 2]
        F = np.stack(
            [
                s1**2 + s2**2 - 2 * s1 * s2 * cab[..., 0] - d2[..., 0],
                s2**2 + s3**2 - 2 * s2 * s3 * cab[..., 1] - d2[..., 1],
                s1**2 + s3**2 - 2 * s1 * s3 * cab[..., 2] - d2[..., 2],
            ],
            -1,
        )
        z = np.zeros_like(s1)
        J = np.stack(
            [
                np.stack([2 * s1 - 2 * s2 * cab[..., 0], 2 * s2 - 2 * s1 * cab[..., 0], z], -1),
                np.stack([z, 2 * s2 - 2 * s3 * cab[..., 1], 2 * s3 - 2 * s2 * cab[..., 1]], -1),
                np.stack([2 * s1 - 2 * s3 * cab[..., 2], z, 2 * s3 - 2 * s1 * cab[..., 2]], -1),
            ],
            -2,
        )
        dx, solvable = _solve3(J, F)
        depths = depths - np.where(solvable[..., None], dx, 0.0)
    ok &= np.all(depths > 0, -1) & np.all(np.isfinite(depths), -1)
    depths = np.where(ok[..., None], depths, 1.0)

    R = np.tile(np.eye(3), (B, 4, 1, 1))
    t = np.zeros((B, 4, 3))
    bi, ki = np.nonzero(ok)
    X = depths[bi, ki][..., None] * f[bi]  # camera-frame points
    Rk, tk = _align_triangles(P[bi], X)
    # reject spurious roots: the aligned points must reproduce the camera-frame points
    Xp = np.einsum("kij,knj->kni", Rk, P[bi]) + tk[:, None, :]
    resid = np.linalg.norm(Xp - X, axis=-1).max(-1) / np.sqrt(scale2[bi])
    keep = resid < 1e-6
    R[bi, ki] = Rk
    t[bi, ki] = tk
    ok[bi[~keep], ki[~keep]] = False
    return R, t, ok


def p3p_solve(bearings, points) -> list[Pose]:
    """All (0-4) poses consistent with three bearing/point pairs."""
    f = np.asarray(bearings, dtype=np.float64).reshape(3, 3)
    P = np.asarray(points, dtype=np.float64).reshape(3, 3)
    if np.abs(np.linalg.norm(f, axis=1) - 1.0).max() > 1e-9:
        raise ValueError("bearings must be unit vectors")
    area2 = (np.cross(P[1] - P[0], P[2] - P[0]) ** 2).sum()
    scale2 = max(((P[i] - P[j]) ** 2).sum() for i, j in ((0, 1), (0, 2), (1, 2)))
    if area2 <= 1e-12 * scale2**2:
        raise DegenerateConfiguration("degenerate configuration: world points are collinear")
    R, t, ok = p3p_batch(f[None], P[None])
    poses: list[Pose] = []
    for k in np.flatnonzero(ok[0]):
        pose = Pose(R[0, k], t[0, k])
        if not any(np.allclose(pose.rotation, q.rotation, atol=1e-9) and np.allclose(pose.translation, q.translation, atol=1e-9) for q in poses):
            poses.append(pose)
    return poses


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


def _uniform_triples(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """``k`` uniformly random ordered triples of distinct indices in ``[0, n)``."""
    i0 = rng.integers(0, n, size=k)
    i1 = rng.integers(0, n - 1, size=k)
    i1 = i1 + (i1 >= i0)
    i2 = rng.integers(0, n - 2, size=k)
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 = i2 + (i2 >= lo)
    i2 = i2 + (i2 >= hi)
    return np.stack([i0, i1, i2], axis=1)


def _weighted_triples(rng: np.random.Generator, weights: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Sequential weighted sampling without replacement (Gumbel top-3)."""
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    out = np.empty((k, 3), dtype=np.int64)
    for s in range(0, k, chunk):
        m = min(chunk, k - s)
        keys = logw[None, :] + rng.gumbel(size=(m, len(weights)))
        top = np.argpartition(-keys, 2, axis=1)[:, :3]
        order = np.argsort(-np.take_along_axis(keys, top, 1), axis=1)
        out[s : s + m] = np.take_along_axis(top, order, 1)
    return out


def reprojection_errors(camera: PinholeCamera, R, t, points, pixels) -> np.ndarray:
    """Pixel distance per match; ``inf`` behind the camera."""
    X = points @ np.swapaxes(R, -1, -2) + t[..., None, :]
    z = X[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = camera.fx * X[..., 0] / z + camera.cx - pixels[:, 0]
        dv = camera.fy * X[..., 1] / z + camera.cy - pixels[:, 1]
        err = np.sqrt(du * du + dv * dv)
    return np.where((z > 0) & np.isfinite(err), err, np.inf)


@njit(cache=True)
def _score_hypotheses(R, t, points, pixels, fx, fy, cx, cy, threshold):
    """Inlier count and summed inlier error per hypothesis (compiled loop)."""
    h = R.shape[0]
    counts = np.zeros(h, dtype=np.int64)
    costs = np.zeros(h)
    for k in range(h):
        c = 0
        e = 0.0
        for m in range(points.shape[0]):
            px, py, pz = points[m, 0], points[m, 1], points[m, 2]
            z = R[k, 2, 0] * px + R[k, 2, 1] * py + R[k, 2, 2] * pz + t[k, 2]
            if z <= 0:
                continue
            x = R[k, 0, 0] * px + R[k, 0, 1] * py + R[k, 0, 2] * pz + t[k, 0]
            y = R[k, 1, 0] * px + R[k, 1, 1] * py + R[k, 1, 2] * pz + t[k, 1]
            du = fx * x / z + cx - pixels[m, 0]
            dv = fy * y / z + cy - pixels[m, 1]
            err = np.sqrt(du * du + dv * dv)
            if err < threshold:
                c += 1
                e += err
        counts[k] = c
        costs[k] = e
    return counts, costs


def ransac_pose(
    matches: MatchSet,
    cloud: LabeledPointCloud,
    camera: PinholeCamera,
    config: RansacConfig = RansacConfig(),
    sampling_weights=None,
) -> RansacResult:
    """P3P RANSAC over 2D-3D matches.

    Every iteration draws three distinct matches (uniformly, or with
    probability proportional to ``sampling_weights`` without replacement),
    solves P3P and counts matches reprojecting within
    ``inlier_threshold_px``.  The hypothesis with most inliers wins; among
    equal counts the smaller summed inlier error wins, then the earlier
    hypothesis.  No refinement follows.
    """
    if isinstance(matches, list):
        matches = MatchSet.from_list(matches)
    n = len(matches)
    if n < 3:
        raise ValueError(f"need at least 3 matches, got {n}")
    if np.any(matches.point_ids < 0) or np.any(matches.point_ids >= len(cloud)):
        raise IndexError("match point_id outside the point cloud")
    rng = np.random.default_rng(config.seed)
    if sampling_weights is None:
        triples = _uniform_triples(rng, n, config.iterations)
    else:
        w = np.asarray(sampling_weights, dtype=np.float64).reshape(-1)
        if len(w) != n or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise ValueError("sampling weights must be finite, non-negative, one per match, with positive sum")
        if np.count_nonzero(w) < 3:
            raise ValueError("need at least 3 matches with positive sampling weight")
        if np.all(w == w[0]):
            triples = _uniform_triples(rng, n, config.iterations)
        else:
            triples = _weighted_triples(rng, w / w.sum(), config.iterations)

    pts = cloud.points[matches.point_ids]
    bearings = camera.bearings(matches.pixels)
    # repeated triples give identical hypotheses, so solve each once in
    # order of first draw; that keeps the earliest-hypothesis tie-break
    uniq, first = np.unique(np.sort(triples, axis=1), axis=0, return_index=True)
    uniq = uniq[np.argsort(first)]
    R, t, ok = p3p_batch(bearings[uniq], pts[uniq])
    R = np.ascontiguousarray(R[ok])
    t = np.ascontiguousarray(t[ok])
    if len(R) == 0:
        return RansacResult(None, np.zeros(n, dtype=bool), 0, 0.0, False)

    thr = config.inlier_threshold_px
    counts, costs = _score_hypotheses(R, t, pts, matches.pixels, camera.fx, camera.fy, camera.cx, camera.cy, thr)
    top = np.flatnonzero(counts == counts.max())
    best = top[np.argmin(costs[top])]
    err = reprojection_errors(camera, R[best][None], t[best][None], pts, matches.pixels)[0]
    mask = err < thr
    pose = Pose(_orthonormalize(R[best]), t[best])
    return RansacResult(pose, mask, int(mask.sum()), float(mask.mean()), True)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    return U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def rotation_angle_deg(R: np.ndarray) -> float:
    """Rotation angle of ``R`` in degrees, stable near 0 and 180."""
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(np.linalg.norm(w) / 2.0, (np.trace(R) - 1.0) / 2.0)))


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """``(camera-centre distance in m, relative rotation angle in deg)``."""
    pos = float(np.linalg.norm(estimate.center - truth.center))
    return pos, rotation_angle_deg(estimate.rotation @ truth.rotation.T)


def axis_angle(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * Kx + (1 - np.cos(angle_rad)) * Kx @ Kx
