"""Semantic localization: SSMC, GSMC and a particle filter (PFSL).

Cameras are assumed level: the image ``y`` axis points along gravity and the
optical axis is horizontal at some heading.  That is the only orientation
freedom GSMC searches over and the only one PFSL tracks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from numba import njit

from . import geometry
from .geometry import MatchSet, RansacConfig, RansacResult
from .model import LabeledPointCloud, LabelMap, PinholeCamera, Pose


# ---------------------------------------------------------------------------
# level cameras
# ---------------------------------------------------------------------------


def horizontal_basis(gravity_dir) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(east, north, up)`` with heading 0 along ``east``.

    For the default gravity ``(0, 0, -1)`` this is the world x, y, z axes.
    """
    g = np.asarray(gravity_dir, dtype=np.float64)
    g = g / np.linalg.norm(g)
    up = -g
    ref = np.array([1.0, 0.0, 0.0]) if abs(up[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    east = ref - (ref @ up) * up
    east /= np.linalg.norm(east)
    north = np.cross(up, east)
    return east, north, up


def level_rotation(heading: float, gravity_dir=(0.0, 0.0, -1.0)) -> np.ndarray:
    """World-to-camera rotation of a level camera looking along ``heading``."""
    east, north, up = horizontal_basis(gravity_dir)
    z = np.cos(heading) * east + np.sin(heading) * north
    y = -up
    x = np.cross(y, z)
    return np.stack([x, y, z])


def level_rotations(headings: np.ndarray, gravity_dir=(0.0, 0.0, -1.0)) -> np.ndarray:
    east, north, up = horizontal_basis(gravity_dir)
    h = np.asarray(headings, dtype=np.float64)[:, None]
    z = np.cos(h) * east + np.sin(h) * north
    y = np.broadcast_to(-up, z.shape)
    x = np.cross(y, z)
    return np.stack([x, y, z], axis=1)


def planar_pose(x: float, y: float, heading: float, height: float, gravity_dir=(0.0, 0.0, -1.0)) -> Pose:
    """Camera pose of a level camera at planar position ``(x, y)``."""
    east, north, up = horizontal_basis(gravity_dir)
    center = x * east + y * north + height * up
    return Pose.from_center(level_rotation(heading, gravity_dir), center)


# ---------------------------------------------------------------------------
# match filters
# ---------------------------------------------------------------------------


def ratio_test(matches: MatchSet, threshold: float = 0.9) -> MatchSet:
    """Keep matches whose best/second-best distance ratio is below ``threshold``."""
    if matches.best_dist is None or matches.second_dist is None:
        raise ValueError("ratio test needs best and second-best descriptor distances")
    keep = matches.best_dist < threshold * matches.second_dist
    return matches.subset(np.flatnonzero(keep))


def match_labels(matches: MatchSet, query_labels: LabelMap) -> np.ndarray:
    rows, cols = _cells(matches.pixels)
    if np.any(rows < 0) or np.any(rows >= query_labels.height) or np.any(cols < 0) or np.any(cols >= query_labels.width):
        raise ValueError("match pixel outside the query label map")
    return query_labels.labels[rows, cols]


def _cells(pixels):
    return np.floor(pixels[:, 1] + 0.5).astype(np.int64), np.floor(pixels[:, 0] + 0.5).astype(np.int64)


def ssmc_filter(matches: MatchSet, query_labels: LabelMap, cloud: LabeledPointCloud) -> MatchSet:
    """Drop matches whose query-pixel label differs from the 3-D point's label."""
    if np.any(matches.point_ids < 0) or np.any(matches.point_ids >= len(cloud)):
        raise IndexError("match point_id outside the point cloud")
    keep = match_labels(matches, query_labels) == cloud.labels[matches.point_ids]
    return matches.subset(np.flatnonzero(keep))


def ssmc_localize(matches, query_labels, cloud, camera, config: RansacConfig = RansacConfig()):
    """SSMC: semantic filter then P3P RANSAC.  Returns ``(result, kept_matches)``."""
    kept = ssmc_filter(matches, query_labels, cloud)
    if len(kept) < 3:
        return RansacResult(None, np.zeros(len(kept), dtype=bool), 0, 0.0, False), kept
    return geometry.ransac_pose(kept, cloud, camera, config), kept


# ---------------------------------------------------------------------------
# GSMC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GravityPrior:
    gravity_dir: tuple = (0.0, 0.0, -1.0)
    camera_height_m: float = 1.5
    yaw_samples: int = 360

    def __post_init__(self):
        g = np.asarray(self.gravity_dir, dtype=np.float64)
        if g.shape != (3,) or abs(np.linalg.norm(g) - 1.0) > 1e-9:
            raise ValueError("gravity_dir must be a unit 3-vector")
        if self.yaw_samples < 1:
            raise ValueError("yaw_samples must be >= 1")

    @property
    def yaws(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.yaw_samples) / self.yaw_samples


@njit(cache=True)
def _agreement_kernel(R, t, points, point_labels, label_img, fx, fy, cx, cy, radius):
    h, w = label_img.shape
    n = R.shape[0]
    matched = np.zeros(n, dtype=np.int64)
    visible = np.zeros(n, dtype=np.int64)
    for k in range(n):
        for m in range(points.shape[0]):
            px, py, pz = points[m, 0], points[m, 1], points[m, 2]
            z = R[k, 2, 0] * px + R[k, 2, 1] * py + R[k, 2, 2] * pz + t[k, 2]
            if not z > 0:
                continue
            x = R[k, 0, 0] * px + R[k, 0, 1] * py + R[k, 0, 2] * pz + t[k, 0]
            y = R[k, 1, 0] * px + R[k, 1, 1] * py + R[k, 1, 2] * pz + t[k, 1]
            u = fx * x / z + cx
            v = fy * y / z + cy
            if not (np.isfinite(u) and np.isfinite(v)):
                continue
            row = np.floor(v + 0.5)
            col = np.floor(u + 0.5)
            if row < 0 or row >= h or col < 0 or col >= w:
                continue
            visible[k] += 1
            r0, c0 = int(row), int(col)
            hit = False
            for dr in range(-radius, radius + 1):
                rr = r0 + dr
                if rr < 0 or rr >= h:
                    continue
                for dc in range(-radius, radius + 1):
                    cc = c0 + dc
                    if 0 <= cc < w and label_img[rr, cc] == point_labels[m]:
                        hit = True
                        break
                if hit:
                    break
            if hit:
                matched[k] += 1
    return matched, visible


def agreement_counts(R, t, points, point_labels, query_labels: LabelMap, camera: PinholeCamera, radius: int = 0):
    """Per pose ``(matched, visible)`` point counts.

    A point is visible when it lies in front of the camera and its pixel
    cell is inside the image; it matches when some pixel within ``radius``
    cells carries its label.
    """
    R = np.ascontiguousarray(np.asarray(R, dtype=np.float64).reshape(-1, 3, 3))
    t = np.ascontiguousarray(np.asarray(t, dtype=np.float64).reshape(-1, 3))
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    lab = np.ascontiguousarray(np.asarray(point_labels, dtype=np.int64).reshape(-1))
    img = np.ascontiguousarray(query_labels.labels, dtype=np.int64)
    return _agreement_kernel(R, t, pts, lab, img, camera.fx, camera.fy, camera.cx, camera.cy, int(radius))


def gsmc_hypotheses(pixel, point, camera: PinholeCamera, prior: GravityPrior, ground_z: float):
    """Gravity-aligned pose hypotheses ``(yaws, R, t)`` for one match.

    For each sampled heading the camera centre is placed on the back-projected
    ray at height ``ground_z + camera_height_m``.  Headings with a near
    horizontal ray or the point behind the camera are dropped.
    """
    yaws = prior.yaws
    R = level_rotations(yaws, prior.gravity_dir)
    _, _, up = horizontal_basis(prior.gravity_dir)
    b = camera.bearings(np.asarray(pixel, dtype=np.float64).reshape(1, 2))[0]
    d = np.einsum("sji,j->si", R, b)  # ray direction in the world frame
    du = d @ up
    point = np.asarray(point, dtype=np.float64)
    ok = np.abs(du) >= 1e-6
    s = np.where(ok, (point @ up - (ground_z + prior.camera_height_m)) / np.where(ok, du, 1.0), -1.0)
    ok &= s > 0
    centers = point - s[:, None] * d
    t = -np.einsum("sij,sj->si", R, centers)
    return yaws[ok], R[ok], t[ok]


def gsmc_score(
    match_pixel,
    match_point_id: int,
    cloud: LabeledPointCloud,
    camera: PinholeCamera,
    query_labels: LabelMap,
    prior: GravityPrior,
    ground_z: float = 0.0,
    radius: int = 0,
    score_points: Optional[np.ndarray] = None,
) -> int:
    """Best semantic agreement count over the match's gravity-aligned poses.

    For every feasible heading, counts cloud points that project inside the
    image, in front of the camera, onto a pixel carrying the point's label.
    ``score_points`` optionally restricts the counted points to a subset.
    """
    _, R, t = gsmc_hypotheses(match_pixel, cloud.points[match_point_id], camera, prior, ground_z)
    if len(R) == 0:
        return 0
    idx = np.arange(len(cloud)) if score_points is None else np.asarray(score_points)
    matched, _ = agreement_counts(R, t, cloud.points[idx], cloud.labels[idx], query_labels, camera, radius)
    return int(matched.max())


def gsmc_scores(matches: MatchSet, cloud, camera, query_labels, prior, ground_z=0.0, radius=0, score_points=None) -> np.ndarray:
    return np.array(
        [
            gsmc_score(p, i, cloud, camera, query_labels, prior, ground_z, radius, score_points)
            for p, i in zip(matches.pixels, matches.point_ids)
        ],
        dtype=np.float64,
    )


def gsmc_weights(scores) -> np.ndarray:
    """Normalised sampling weights; uniform when every score is zero."""
    s = np.asarray(scores, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        return np.full(len(s), 1.0 / len(s))
    return s / total


def gsmc_localize(
    matches: MatchSet,
    cloud: LabeledPointCloud,
    camera: PinholeCamera,
    query_labels: LabelMap,
    prior: GravityPrior,
    ground_z: float = 0.0,
    config: RansacConfig = RansacConfig(),
    radius: int = 0,
    score_points: Optional[np.ndarray] = None,
):
    """GSMC: score every match, then RANSAC sampling biased by the scores.

    Returns ``(result, scores)``.
    """
    if len(matches) < 3:
        raise ValueError(f"need at least 3 matches, got {len(matches)}")
    scores = gsmc_scores(matches, cloud, camera, query_labels, prior, ground_z, radius, score_points)
    weights = gsmc_weights(scores)
    if np.count_nonzero(weights) < 3:
        # too few consistent matches to sample from; fall back to uniform
        weights = np.full(len(matches), 1.0 / len(matches))
    return geometry.ransac_pose(matches, cloud, camera, config, weights), scores


# ---------------------------------------------------------------------------
# particle filter
# ---------------------------------------------------------------------------


@dataclass
class ParticleSet:
    """Planar particles: ``states`` rows are ``(x, y, heading)``."""

    states: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.states) < 1 or len(self.weights) != len(self.states):
            raise ValueError("need at least one particle and one weight per particle")

    def __len__(self):
        return len(self.states)

    def mean(self) -> np.ndarray:
        """Weighted mean ``(x, y, heading)`` (circular mean for the heading)."""
        w = self.weights
        xy = w @ self.states[:, :2]
        th = np.arctan2(w @ np.sin(self.states[:, 2]), w @ np.cos(self.states[:, 2]))
        return np.array([xy[0], xy[1], th])

    def covariance(self) -> np.ndarray:
        """Weighted 2x2 covariance of the planar position."""
        d = self.states[:, :2] - self.mean()[:2]
        return (self.weights[:, None] * d).T @ d

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    @classmethod
    def gaussian(cls, center, std_xy: float, std_theta: float, n: int, rng: np.random.Generator) -> "ParticleSet":
        center = np.asarray(center, dtype=np.float64)
        noise = rng.normal(size=(n, 3)) * np.array([std_xy, std_xy, std_theta])
        return cls(center + noise, np.full(n, 1.0 / n))


def move(states: np.ndarray, odometry) -> np.ndarray:
    """Apply body-frame increments ``(dx, dy, dtheta)`` (broadcastable)."""
    odometry = np.asarray(odometry, dtype=np.float64)
    x, y, th = states[:, 0], states[:, 1], states[:, 2]
    dx, dy, dth = odometry[..., 0], odometry[..., 1], odometry[..., 2]
    c, s = np.cos(th), np.sin(th)
    return np.column_stack([x + c * dx - s * dy, y + s * dx + c * dy, th + dth])


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").clip(0, n - 1)


def match_fractions(
    states: np.ndarray,
    points: np.ndarray,
    point_labels: np.ndarray,
    query_labels: LabelMap,
    camera: PinholeCamera,
    camera_height: float,
    gravity_dir=(0.0, 0.0, -1.0),
):
    """Per particle: (label-consistent projected points, visible points)."""
    east, north, up = horizontal_basis(gravity_dir)
    R = level_rotations(states[:, 2], gravity_dir)
    centers = states[:, :1] * east + states[:, 1:2] * north + camera_height * up
    t = -np.einsum("nij,nj->ni", R, centers)
    return agreement_counts(R, t, points, point_labels, query_labels, camera)


@dataclass(frozen=True)
class PFSLConfig:
    odometry_std_xy: float = 0.05
    odometry_std_theta: float = 0.005
    sharpness: float = 10.0
    camera_height: float = 1.5
    gravity_dir: tuple = (0.0, 0.0, -1.0)


def pfsl_step(
    particles: ParticleSet,
    odometry,
    query_labels: LabelMap,
    cloud: LabeledPointCloud,
    camera: PinholeCamera,
    stationary_mask: Optional[np.ndarray],
    config: PFSLConfig,
    rng: np.random.Generator,
) -> ParticleSet:
    """One predict/update/resample cycle.

    Particles move by the odometry plus Gaussian noise.  Each particle's
    weight is multiplied by ``exp(sharpness * m)`` where ``m`` is the share
    of visible stationary cloud points whose projected pixel carries their
    own label.  Systematic resampling runs when the effective sample size
    drops below half the particle count.
    """
    n = len(particles)
    noise = rng.normal(size=(n, 3)) * np.array([config.odometry_std_xy, config.odometry_std_xy, config.odometry_std_theta])
    states = move(particles.states, np.asarray(odometry, dtype=np.float64)[None, :] + noise)
    mask = np.ones(len(cloud), dtype=bool) if stationary_mask is None else np.asarray(stationary_mask, dtype=bool)
    matched, visible = match_fractions(
        states, cloud.points[mask], cloud.labels[mask], query_labels, camera, config.camera_height, config.gravity_dir
    )
    weights = particles.weights
    if np.any(visible > 0) and config.sharpness != 0:
        m = np.where(visible > 0, matched / np.maximum(visible, 1), 0.0)
        logw = np.log(np.maximum(weights, 1e-300)) + config.sharpness * m
        logw -= logw.max()
        weights = np.exp(logw)
        weights = np.where(particles.weights > 0, weights, 0.0)
        weights /= weights.sum()
    out = ParticleSet(states, weights)
    if out.ess() < n / 2:
        idx = systematic_resample(weights, rng)
        out = ParticleSet(states[idx], np.full(n, 1.0 / n))
    return out


def pfsl_track(
    initial: ParticleSet,
    odometry: Iterable,
    query_labels: Iterable[LabelMap],
    cloud: LabeledPointCloud,
    camera: PinholeCamera,
    stationary_mask,
    config: PFSLConfig,
    seed: int,
    callback: Optional[Callable[[int, ParticleSet], None]] = None,
) -> ParticleSet:
    """Run :func:`pfsl_step` over a sequence; returns the final particles."""
    rng = np.random.default_rng(seed)
    particles = initial
    for i, (odo, labels) in enumerate(zip(odometry, query_labels)):
        particles = pfsl_step(particles, odo, labels, cloud, camera, stationary_mask, config, rng)
        if callback is not None:
            callback(i, particles)
    return particles


# ---------------------------------------------------------------------------
# stationary classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassFrequencyStats:
    p_c: np.ndarray  # share of correspondences per class
    p_p: np.ndarray  # share of pixels per class

    @classmethod
    def from_counts(cls, correspondence_labels, pixel_labels, num_classes: int) -> "ClassFrequencyStats":
        cc = np.bincount(np.asarray(correspondence_labels).ravel(), minlength=num_classes).astype(np.float64)
        pc = np.bincount(np.asarray(pixel_labels).ravel(), minlength=num_classes).astype(np.float64)
        return cls(cc / cc.sum(), pc / pc.sum())


def select_stationary(stats: ClassFrequencyStats, threshold: float = 0.2) -> set:
    """Classes with ``p_c / p_p > threshold``; classes never seen in pixels are skipped."""
    p_c = np.asarray(stats.p_c, dtype=np.float64)
    p_p = np.asarray(stats.p_p, dtype=np.float64)
    seen = p_p > 0
    ratio = np.where(seen, p_c / np.where(seen, p_p, 1.0), 0.0)
    return {int(c) for c in np.flatnonzero(seen & (ratio > threshold))}
