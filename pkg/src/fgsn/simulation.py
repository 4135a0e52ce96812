"""Synthetic localization benchmark.

A scene is a street: points fill a box around a straight corridor the
vehicle drives along.  Labels are spatial Voronoi regions, so a label marks
a coherent patch of the scene and more labels mean smaller patches.  Query
observations are rendered from ground-truth poses: label maps by z-buffered
disk splats, 2D-3D matches by projecting unoccluded points with pixel noise
and rematching a fraction of them to random points.

Label noise grows with the label count, ``mislabel_rate(k) = base +
slope * log2(k)`` capped at ``cap``: finer segmentations are harder to
predict consistently.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import evaluation, geometry, localization
from .clustering import nearest_centroid
from .geometry import MatchSet, RansacConfig
from .localization import GravityPrior, ParticleSet, PFSLConfig
from .model import CorrespondenceSample, FeatureMap, LabeledPointCloud, LabelMap, PinholeCamera, Pose

log = logging.getLogger(__name__)

METHODS = ("plain", "ssmc", "gsmc", "pfsl")


@dataclass(frozen=True)
class SceneSpec:
    num_points: int = 100000
    extent_m: tuple = (-20.0, 220.0, -6.5, 6.5, 0.0, 12.0)  # x0, x1, y0, y1, z0, z1
    corridor_halfwidth_m: float = 6.0
    ground_fraction: float = 0.0
    label_concentration: float = 0.0
    k_fine: int = 100
    k_coarse: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_points < 1:
            raise ValueError("num_points must be >= 1")
        if not (1 <= self.k_coarse <= self.k_fine):
            raise ValueError("need 1 <= k_coarse <= k_fine")
        if self.k_fine > self.num_points:
            raise ValueError("k_fine exceeds num_points")
        x0, x1, y0, y1, z0, z1 = self.extent_m
        if not (x1 > x0 and y1 > y0 and z1 > z0):
            raise ValueError("extent must have positive size on every axis")
        if not (0.0 <= self.ground_fraction <= 1.0):
            raise ValueError("ground_fraction must lie in [0, 1]")
        if not (y0 < -self.corridor_halfwidth_m or y1 > self.corridor_halfwidth_m):
            raise ValueError("corridor covers the whole extent")


@dataclass(frozen=True)
class NoiseSpec:
    pixel_noise_px: float = 2.0
    outlier_rate: float = 0.998
    mislabel_base: float = 0.02
    mislabel_slope: float = 0.015
    mislabel_cap: float = 0.5
    odometry_std_xy: float = 0.05
    odometry_std_theta: float = 0.005
    max_features: int = 5000
    boundary_jitter_px: int = 3
    splat_radius_m: float = 0.25
    max_splat_px: int = 4
    inlier_ratio_range: tuple = (0.3, 0.95)
    outlier_ratio_low: float = 13.0 / 15.0  # ~25% of outliers pass a 0.9 ratio test

    def __post_init__(self):
        for name in ("outlier_rate", "mislabel_base", "mislabel_cap"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mislabel_slope < 0:
            raise ValueError("mislabel_slope must be non-negative")
        if self.pixel_noise_px < 0:
            raise ValueError("pixel noise must be non-negative")
        if self.boundary_jitter_px < 0:
            raise ValueError("boundary jitter must be non-negative")
        if self.odometry_std_xy < 0 or self.odometry_std_theta < 0:
            raise ValueError("odometry noise must be non-negative")

    def mislabel_rate(self, k: int) -> float:
        return float(min(self.mislabel_cap, self.mislabel_base + self.mislabel_slope * np.log2(max(k, 1))))


DEFAULT_CAMERA = PinholeCamera(fx=400.0, fy=400.0, cx=320.0, cy=240.0, width=640, height=480)
CAMERA_HEIGHT = 1.5
REGION_HEIGHT_SCALE = 8.0


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scene:
    cloud: LabeledPointCloud  # fine labels
    coarse: LabeledPointCloud
    coarse_map: np.ndarray  # fine label -> coarse label
    spec: SceneSpec


def _sample_points(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    x0, x1, y0, y1, z0, z1 = spec.extent_m
    w = spec.corridor_halfwidth_m
    n_ground = int(round(spec.ground_fraction * spec.num_points))
    out = np.empty((0, 3))
    while len(out) < spec.num_points - n_ground:
        need = spec.num_points - n_ground - len(out)
        cand = rng.uniform([x0, y0, z0], [x1, y1, z1], size=(2 * need + 16, 3))
        cand = cand[np.abs(cand[:, 1]) >= w]
        out = np.concatenate([out, cand[:need]])
    # the street surface between the facades
    ground = np.column_stack([rng.uniform(x0, x1, n_ground), rng.uniform(max(y0, -w), min(y1, w), n_ground), np.full(n_ground, z0)])
    return np.concatenate([out, ground])


def region_labels(points: np.ndarray, k: int, seed: int, concentration: float = 0.0) -> np.ndarray:
    """Spatially coherent labels from ``k`` random seed points.

    Each point takes the seed minimising ``|x - s_j|^2 / w_j``, a
    multiplicatively weighted Voronoi diagram, so a region's extent grows
    with its weight.  Weights are ``Gamma(concentration)`` draws, giving
    Dirichlet-like region sizes: small concentrations mean a few dominant
    labels, ``0`` means equal weights.  Height counts ``REGION_HEIGHT_SCALE``
    times more than horizontal distance, so regions form horizontal bands.
    """
    if k > len(points):
        raise ValueError("more labels than points")
    rng = np.random.default_rng([seed, k])
    seeds = points[rng.choice(len(points), size=k, replace=False)]
    weights = rng.gamma(concentration, size=k) if concentration > 0 else np.ones(k)
    weights = np.maximum(weights / weights.max(), 1e-12)
    scale = np.array([1.0, 1.0, REGION_HEIGHT_SCALE])
    x, c = points * scale, seeds * scale
    out = np.empty(len(points), dtype=np.int64)
    step = max(1, 4_000_000 // k)
    for s in range(0, len(x), step):
        d = ((x[s : s + step, None, :] - c[None, :, :]) ** 2).sum(-1) / weights
        out[s : s + step] = np.argmin(d, axis=1)
    return out


def gen_scene(spec: SceneSpec) -> Scene:
    """Uniform points outside the driving corridor with fine and coarse labels."""
    rng = np.random.default_rng(spec.seed)
    pts = _sample_points(spec, rng)
    fine = region_labels(pts, spec.k_fine, spec.seed, spec.label_concentration)
    # fine regions are grouped by their seed positions; the first k_coarse
    # fine regions are their own coarse anchors, so the map is onto
    centers = np.array([pts[fine == j].mean(axis=0) if np.any(fine == j) else pts[0] for j in range(spec.k_fine)])
    coarse_map = nearest_centroid(centers, centers[: spec.k_coarse])
    coarse_map[: spec.k_coarse] = np.arange(spec.k_coarse)
    cloud = LabeledPointCloud(pts, fine, spec.k_fine)
    return Scene(cloud, LabeledPointCloud(pts, coarse_map[fine], spec.k_coarse), coarse_map, spec)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # (T, 3) planar x, y, heading
    odometry: np.ndarray  # (T - 1, 3) body-frame increments
    camera_height: float = CAMERA_HEIGHT

    def __len__(self):
        return len(self.states)

    def pose(self, i: int) -> Pose:
        x, y, th = self.states[i]
        return localization.planar_pose(x, y, th, self.camera_height)

    def poses(self) -> list:
        return [self.pose(i) for i in range(len(self))]

    def to_dict(self) -> dict:
        return {"states": self.states.tolist(), "odometry": self.odometry.tolist(), "camera_height": self.camera_height}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(np.array(d["states"], dtype=np.float64).reshape(-1, 3), np.array(d["odometry"], dtype=np.float64).reshape(-1, 3), float(d["camera_height"]))


def body_increments(states: np.ndarray) -> np.ndarray:
    d = np.diff(states[:, :2], axis=0)
    th = states[:-1, 2]
    c, s = np.cos(th), np.sin(th)
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], np.diff(states[:, 2])])


def gen_trajectory(
    length_m: float,
    step_m: float,
    seed: int,
    curvature: float = 0.0,
    lateral_m: float = 2.0,
    start=(0.0, 0.0, 0.0),
    camera_height: float = CAMERA_HEIGHT,
) -> Trajectory:
    """Smooth planar drive of ``length_m`` sampled every ``step_m`` metres.

    ``curvature = 0`` gives a straight line.  Otherwise the path weaves
    laterally with amplitude ``curvature * lateral_m`` and a seeded phase,
    and the heading follows the path tangent.
    """
    if step_m <= 0:
        raise ValueError("step_m must be positive")
    n = int(np.floor(length_m / step_m + 1e-9)) + 1
    x0, y0, th0 = start
    if curvature == 0:
        s = np.arange(n) * step_m
        states = np.column_stack([x0 + s * np.cos(th0), y0 + s * np.sin(th0), np.full(n, th0)])
    else:
        rng = np.random.default_rng(seed)
        phase = rng.uniform(0, 2 * np.pi)
        period = max(length_m / 2.0, 10.0 * step_m)
        amp = curvature * lateral_m
        x = x0 + np.arange(n) * step_m
        y = y0 + amp * (np.sin(2 * np.pi * (x - x0) / period + phase) - np.sin(phase))
        slope = amp * 2 * np.pi / period * np.cos(2 * np.pi * (x - x0) / period + phase)
        states = np.column_stack([x, y, th0 + np.arctan(slope)])
    return Trajectory(states, body_increments(states), camera_height)


# ---------------------------------------------------------------------------
# rendering and observations
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _ring_offsets(radius: int) -> np.ndarray:
    """Pixel offsets at distance ``radius`` (in the rounded-disk sense) from the centre."""
    r = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(r, r, indexing="ij")
    d2 = dr**2 + dc**2
    outer = d2 <= radius**2 + radius  # slightly rounder than a strict circle
    inner = d2 <= (radius - 1) ** 2 + (radius - 1) if radius > 0 else np.zeros_like(outer)
    keep = outer & ~inner
    return np.column_stack([dr[keep], dc[keep]])


def render(cloud: LabeledPointCloud, camera: PinholeCamera, pose: Pose, splat_radius_m: float = 0.25, max_splat_px: int = 4, subset=None):
    """Z-buffered label render.

    Each visible point is drawn as a disk whose pixel radius is its world
    radius ``splat_radius_m`` at its depth (at least 0, at most
    ``max_splat_px``); the nearest point wins every pixel, ties going to
    the lower point index.  Returns ``(label_map, owner)`` where unobserved
    pixels carry the background label ``cloud.num_classes`` and ``owner``
    holds the winning point index or -1.
    """
    idx = np.arange(len(cloud)) if subset is None else np.asarray(subset)
    pix, z, vis = geometry.project_points(camera, pose.rotation, pose.translation, cloud.points[idx])
    idx, pix, z = idx[vis], pix[vis], z[vis]
    order = np.lexsort((idx, z))  # nearest first
    idx, pix, z = idx[order], pix[order], z[order]
    rank = np.arange(len(idx), dtype=np.int64)
    rows = np.floor(pix[:, 1] + 0.5).astype(np.int64)
    cols = np.floor(pix[:, 0] + 0.5).astype(np.int64)
    radius = np.clip(np.floor(splat_radius_m * camera.fx / z), 0, max_splat_px).astype(np.int64)
    flat, who = [rows * camera.width + cols], [rank]
    for r in range(1, max_splat_px + 1):
        sel = np.flatnonzero(radius >= r)
        if len(sel) == 0:
            break
        ring = _ring_offsets(r)
        rr = rows[sel][:, None] + ring[:, 0]
        cc = cols[sel][:, None] + ring[:, 1]
        inside = (rr >= 0) & (rr < camera.height) & (cc >= 0) & (cc < camera.width)
        flat.append((rr * camera.width + cc)[inside])
        who.append(np.broadcast_to(sel[:, None], rr.shape)[inside])
    n = max(len(idx), 1)
    key = np.sort(np.concatenate(flat) * n + np.concatenate(who))
    pixel = key // n
    first = np.ones(len(key), dtype=bool)
    first[1:] = pixel[1:] != pixel[:-1]
    owner_img = np.full(camera.height * camera.width, -1, dtype=np.int64)
    owner_img[pixel[first]] = idx[key[first] % n]
    labels = np.where(owner_img >= 0, cloud.labels[np.maximum(owner_img, 0)], cloud.num_classes)
    shape = (camera.height, camera.width)
    return LabelMap(labels.reshape(shape), cloud.num_classes + 1), owner_img.reshape(shape)


def jitter_labels(label_map: LabelMap, jitter_px: int, rng: np.random.Generator) -> LabelMap:
    """Each pixel copies the label at a uniform random offset within ``jitter_px``.

    Region interiors are unchanged; boundaries become ragged, so the damage
    grows with the amount of boundary and hence with the label count.
    """
    if jitter_px <= 0:
        return label_map
    h, w = label_map.labels.shape
    rows = np.arange(h)[:, None] + rng.integers(-jitter_px, jitter_px + 1, size=(h, w))
    cols = np.arange(w)[None, :] + rng.integers(-jitter_px, jitter_px + 1, size=(h, w))
    return LabelMap(label_map.labels[np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)], label_map.num_classes)


def corrupt_labels(label_map: LabelMap, rate: float, num_labels: int, rng: np.random.Generator) -> LabelMap:
    """Flip each rendered (non-background) pixel to a different random label with probability ``rate``."""
    labels = label_map.labels.copy()
    fg = labels < num_labels
    if num_labels > 1 and rate > 0:
        flip = fg & (rng.random(labels.shape) < rate)
        shift = rng.integers(1, num_labels, size=int(flip.sum()))
        labels[flip] = (labels[flip] + shift) % num_labels
    return LabelMap(labels, label_map.num_classes)


@dataclass(eq=False)
class Observation:
    matches: MatchSet
    labels: LabelMap
    pose: Pose


def gen_observations(
    cloud: LabeledPointCloud,
    camera: PinholeCamera,
    pose: Pose,
    noise: NoiseSpec,
    k: Optional[int] = None,
    seed: int = 0,
) -> Observation:
    """Simulated query: 2D-3D matches with ratio-test distances and a label map.

    Up to ``noise.max_features`` features are drawn from the visible points.
    Each is an outlier with probability ``outlier_rate``: its 3-D point is
    swapped for a uniformly random other cloud point.  Inliers are drawn
    from unoccluded points so their pixel shows their own surface.  Every
    feature sits at its point's projection plus Gaussian pixel noise.  The
    label map is the z-buffered render with ragged boundaries
    (:func:`jitter_labels`) and ``mislabel_rate(k)`` pixel flips.
    """
    k = cloud.num_classes if k is None else k
    rng = np.random.default_rng(seed)
    clean, owner = render(cloud, camera, pose, noise.splat_radius_m, noise.max_splat_px)
    pix, _, vis = geometry.project_points(camera, pose.rotation, pose.translation, cloud.points)
    visible = np.flatnonzero(vis)
    if len(visible) == 0:
        raise ValueError("no visible points from this pose")
    rows = np.floor(pix[visible, 1] + 0.5).astype(np.int64)
    cols = np.floor(pix[visible, 0] + 0.5).astype(np.int64)
    unoccluded = visible[owner[rows, cols] == visible]
    n = min(noise.max_features, len(visible))
    outlier = rng.random(n) < noise.outlier_rate
    n_in = min(int((~outlier).sum()), len(unoccluded))
    outlier[np.flatnonzero(~outlier)[n_in:]] = True
    # inliers sit on unoccluded points; outlier features anywhere in view
    ids = np.empty(n, dtype=np.int64)
    ids[~outlier] = rng.choice(unoccluded, size=n_in, replace=False)
    ids[outlier] = rng.choice(visible, size=n - n_in, replace=len(visible) < n - n_in)
    pixels = pix[ids] + rng.normal(0.0, noise.pixel_noise_px, size=(n, 2)) if noise.pixel_noise_px > 0 else pix[ids].copy()
    pixels[:, 0] = np.clip(pixels[:, 0], 0.0, camera.width - 1.0)
    pixels[:, 1] = np.clip(pixels[:, 1], 0.0, camera.height - 1.0)
    point_ids = ids.copy()
    if len(cloud) > 1:
        repl = rng.integers(0, len(cloud) - 1, size=n)
        repl = repl + (repl >= ids)  # never the original point
        point_ids[outlier] = repl[outlier]
    else:
        outlier[:] = False
    second = rng.uniform(200.0, 400.0, size=n)
    lo, hi = noise.inlier_ratio_range
    ratio = np.where(outlier, rng.uniform(noise.outlier_ratio_low, 1.0, size=n), rng.uniform(lo, hi, size=n))
    matches = MatchSet(pixels, point_ids, ratio * second, second, ~outlier)
    labels = corrupt_labels(jitter_labels(clean, noise.boundary_jitter_px, rng), noise.mislabel_rate(k), cloud.num_classes, rng)
    return Observation(matches, labels, pose)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass
class QueryResult:
    query_id: int
    method: str
    position_error_m: float
    rotation_error_deg: float
    inlier_count: int
    inlier_ratio: float
    true_inlier_ratio_before: float = float("nan")
    true_inlier_ratio_after: float = float("nan")
    num_matches: int = 0


@dataclass
class BenchmarkResult:
    method: str
    k: int
    queries: list
    recall: list
    inlier_count_cdf: list
    inlier_ratio_cdf: list
    seconds: float = 0.0

    def errors(self) -> list:
        return [(q.position_error_m, q.rotation_error_deg) for q in self.queries]

    def rows_csv(self) -> str:
        lines = ["query_id,method,position_error_m,rotation_error_deg,inlier_count,inlier_ratio"]
        for q in self.queries:
            lines.append(f"{q.query_id},{q.method},{q.position_error_m!r},{q.rotation_error_deg!r},{q.inlier_count},{q.inlier_ratio!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BenchmarkConfig:
    camera: PinholeCamera = DEFAULT_CAMERA
    ransac_iterations: int = 10000
    inlier_threshold_px: float = 5.0
    ratio_threshold: float = 0.9
    gsmc_yaw_samples: int = 360
    gsmc_score_points: int = 500
    gsmc_radius: int = 0
    pfsl_particles: int = 1000
    pfsl_sharpness: float = 10.0
    pfsl_init_std_xy: float = 1.0
    pfsl_init_std_theta: float = 0.03
    pfsl_points: int = 3000
    pfsl_dynamic_fraction: float = 0.1
    stationary_threshold: float = 0.2


def _fraction(flags) -> float:
    flags = np.asarray(flags)
    return float(flags.mean()) if len(flags) else 0.0


def scene_at(scene_cloud: LabeledPointCloud, k: int, seed: int, concentration: float = SceneSpec.label_concentration) -> LabeledPointCloud:
    """The scene relabelled with ``k`` spatial regions."""
    return scene_cloud.relabeled(region_labels(scene_cloud.points, k, seed, concentration), k)


def run_query(
    method: str,
    cloud: LabeledPointCloud,
    obs: Observation,
    config: BenchmarkConfig,
    seed: int,
    query_id: int = 0,
    ground_z: float = 0.0,
    camera_height: float = CAMERA_HEIGHT,
) -> QueryResult:
    """Localize one query with ``plain``, ``ssmc`` or ``gsmc``."""
    cam = config.camera
    rcfg = RansacConfig(config.ransac_iterations, config.inlier_threshold_px, seed)
    matches = localization.ratio_test(obs.matches, config.ratio_threshold)
    before = _fraction(matches.is_inlier) if matches.is_inlier is not None else float("nan")
    after = before
    if method == "plain":
        res = geometry.ransac_pose(matches, cloud, cam, rcfg) if len(matches) >= 3 else None
    elif method == "ssmc":
        res, kept = localization.ssmc_localize(matches, obs.labels, cloud, cam, rcfg)
        after = _fraction(kept.is_inlier) if kept.is_inlier is not None else float("nan")
        matches = kept
    elif method == "gsmc":
        prior = GravityPrior((0.0, 0.0, -1.0), camera_height, config.gsmc_yaw_samples)
        rng = np.random.default_rng([seed, 7])
        subset = None
        if config.gsmc_score_points and config.gsmc_score_points < len(cloud):
            subset = np.sort(rng.choice(len(cloud), size=config.gsmc_score_points, replace=False))
        res = None
        if len(matches) >= 3:
            res, _ = localization.gsmc_localize(matches, cloud, cam, obs.labels, prior, ground_z, rcfg, config.gsmc_radius, subset)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of plain, ssmc, gsmc")
    if res is None or not res.success:
        return QueryResult(query_id, method, float("inf"), float("inf"), 0, 0.0, before, after, len(matches))
    pos, rot = geometry.pose_error(res.pose, obs.pose)
    return QueryResult(query_id, method, pos, rot, res.inlier_count, res.inlier_ratio, before, after, len(matches))


def _summarize(method, k, queries, t0) -> BenchmarkResult:
    errs = [(q.position_error_m, q.rotation_error_deg) for q in queries]
    return BenchmarkResult(
        method,
        k,
        queries,
        evaluation.recall_table(errs),
        evaluation.inlier_cdf([q.inlier_count for q in queries]),
        evaluation.inlier_cdf([q.inlier_ratio for q in queries]),
        time.perf_counter() - t0,
    )


def pfsl_stationary_mask(cloud: LabeledPointCloud, dynamic: np.ndarray, observations, threshold: float):
    """Stationary-class mask from correspondence and pixel label frequencies.

    Correspondences only ever land on static structure, so ``p_c`` counts the
    labels of static points seen in the reference renders while ``p_p``
    counts every rendered pixel.
    """
    corr, pix = [], []
    for lm, owner in observations:
        fg = owner >= 0
        pix.append(lm.labels[fg])
        static = fg.copy()
        static[fg] = ~dynamic[cloud.labels[owner[fg]]]
        corr.append(lm.labels[static])
    stats = localization.ClassFrequencyStats.from_counts(np.concatenate(corr), np.concatenate(pix), cloud.num_classes)
    classes = localization.select_stationary(stats, threshold)
    return np.isin(cloud.labels, sorted(classes)), classes


def run_pfsl(
    cloud: LabeledPointCloud,
    trajectory: Trajectory,
    noise: NoiseSpec,
    config: BenchmarkConfig,
    k: int,
    seed: int,
) -> BenchmarkResult:
    """Track the trajectory with the particle filter.

    A seeded share of labels plays the part of moving objects: their pixels
    are relabelled at random in every query image, and the stationary-class
    selection is expected to drop them.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 11])
    cam = config.camera
    dynamic = np.zeros(k, dtype=bool)
    n_dyn = int(round(config.pfsl_dynamic_fraction * k))
    if n_dyn:
        dynamic[rng.choice(k, size=n_dyn, replace=False)] = True
    # stationary selection from a few reference renders along the route
    refs = [render(cloud, cam, trajectory.pose(i), noise.splat_radius_m, noise.max_splat_px) for i in range(0, len(trajectory), max(1, len(trajectory) // 5))]
    mask, _ = pfsl_stationary_mask(cloud, dynamic, refs, config.stationary_threshold)
    used = np.flatnonzero(mask)
    if config.pfsl_points and len(used) > config.pfsl_points:
        used = np.sort(rng.choice(used, size=config.pfsl_points, replace=False))
    point_mask = np.zeros(len(cloud), dtype=bool)
    point_mask[used] = True

    pf_cfg = PFSLConfig(noise.odometry_std_xy, noise.odometry_std_theta, config.pfsl_sharpness, trajectory.camera_height)
    particles = ParticleSet.gaussian(trajectory.states[0], config.pfsl_init_std_xy, config.pfsl_init_std_theta, config.pfsl_particles, rng)
    step_rng = np.random.default_rng([seed, 13])
    queries = []
    rate = noise.mislabel_rate(k)
    for i in range(1, len(trajectory)):
        odo = trajectory.odometry[i - 1] + rng.normal(size=3) * np.array([noise.odometry_std_xy, noise.odometry_std_xy, noise.odometry_std_theta])
        lm, owner = render(cloud, cam, trajectory.pose(i), noise.splat_radius_m, noise.max_splat_px)
        lm = corrupt_labels(jitter_labels(lm, noise.boundary_jitter_px, rng), rate, k, rng)
        labels = lm.labels.copy()
        moving = (owner >= 0) & dynamic[cloud.labels[np.maximum(owner, 0)]]
        labels[moving] = rng.integers(0, k, size=int(moving.sum()))
        lm = LabelMap(labels, lm.num_classes)
        particles = localization.pfsl_step(particles, odo, lm, cloud, cam, point_mask, pf_cfg, step_rng)
        est = particles.mean()
        truth = trajectory.states[i]
        pos = float(np.hypot(est[0] - truth[0], est[1] - truth[1]))
        rot = float(np.degrees(abs((est[2] - truth[2] + np.pi) % (2 * np.pi) - np.pi)))
        queries.append(QueryResult(i, "pfsl", pos, rot, 0, 0.0))
    return _summarize("pfsl", k, queries, t0)


def run_benchmark(
    scene_cloud: LabeledPointCloud,
    trajectory: Trajectory,
    method: str,
    k: int,
    noise: NoiseSpec = NoiseSpec(),
    seeds: Sequence[int] = (0,),
    config: BenchmarkConfig = BenchmarkConfig(),
    label_seed: int = 0,
    label_concentration: float = SceneSpec.label_concentration,
) -> BenchmarkResult:
    """Localize every trajectory pose with ``method`` at label granularity ``k``.

    The scene is relabelled with ``k`` regions drawn from ``label_seed``
    and ``label_concentration`` (see :func:`region_labels`).

    Query ``i`` under seed ``s`` draws its observation from seed
    ``(s, i)`` and its RANSAC stream from ``(s, i, 1)``, so methods compared
    on the same seeds see identical observations.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    cloud = scene_at(scene_cloud, k, label_seed, label_concentration)
    t0 = time.perf_counter()
    if method == "pfsl":
        results = [run_pfsl(cloud, trajectory, noise, config, k, s) for s in seeds]
        return _summarize("pfsl", k, [q for r in results for q in r.queries], t0)
    queries = []
    for s in seeds:
        for i, pose in enumerate(trajectory.poses()):
            obs = gen_observations(cloud, config.camera, pose, noise, k, seed=_query_seed(s, i))
            queries.append(run_query(method, cloud, obs, config, _query_seed(s, i, 1), i, 0.0, trajectory.camera_height))
    log.info("%s k=%d: %d queries in %.1fs", method, k, len(queries), time.perf_counter() - t0)
    return _summarize(method, k, queries, t0)


def _query_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def scene_to_dict(scene: Scene) -> dict:
    return {"spec": asdict(scene.spec), "coarse_map": scene.coarse_map.tolist()}


# ---------------------------------------------------------------------------
# toy training data
# ---------------------------------------------------------------------------


TRAIN_CAMERA = PinholeCamera(fx=60.0, fy=60.0, cx=40.0, cy=30.0, width=80, height=60)


@dataclass(eq=False)
class TrainingData:
    features: dict  # image id -> FeatureMap
    samples: list  # CorrespondenceSample per reference/target pair
    classes: dict  # reference image id -> LabelMap of the scene labels


def _appearance(cloud: LabeledPointCloud, owner: np.ndarray, codes: np.ndarray, noise_std: float, rng) -> FeatureMap:
    # background pixels get their own code in the last row
    lab = np.where(owner >= 0, cloud.labels[np.maximum(owner, 0)], len(codes) - 1)
    data = codes[lab] + rng.normal(0.0, noise_std, size=owner.shape + (codes.shape[1],))
    return FeatureMap(data.astype(np.float32))


def gen_training_pairs(
    cloud: LabeledPointCloud,
    trajectory: Trajectory,
    num_pairs: int,
    dim: int = 8,
    seed: int = 0,
    camera: PinholeCamera = TRAIN_CAMERA,
    condition_shift: float = 0.5,
    noise_std: float = 0.3,
    max_points: int = 200,
) -> TrainingData:
    """Reference/target feature maps with ground-truth pixel correspondences.

    Each label owns a random appearance code.  Reference images see the codes
    plus pixel noise; target images are rendered one trajectory step later
    under a changed condition, which adds a fixed per-label offset of size
    ``condition_shift``.  Correspondences are pixels whose z-buffer owner is
    the same 3-D point in both renders.
    """
    if num_pairs < 1 or len(trajectory) < 2:
        raise ValueError("need num_pairs >= 1 and a trajectory of two or more poses")
    rng = np.random.default_rng([seed, 21])
    codes = rng.normal(size=(cloud.num_classes + 1, dim))
    shifted = codes + condition_shift * rng.normal(size=codes.shape)
    idx = np.linspace(0, len(trajectory) - 2, num_pairs).round().astype(int)
    features, samples, classes = {}, [], {}
    for n, i in enumerate(idx):
        lm_r, own_r = render(cloud, camera, trajectory.pose(i), max_splat_px=2)
        lm_t, own_t = render(cloud, camera, trajectory.pose(i + 1), max_splat_px=2)
        ref_id, tgt_id = f"ref_{n:03d}", f"tgt_{n:03d}"
        features[ref_id] = _appearance(cloud, own_r, codes, noise_std, rng)
        features[tgt_id] = _appearance(cloud, own_t, shifted, noise_std, rng)
        classes[ref_id] = lm_r
        # a point's first pixel in each render stands for its observation
        ref_px = {}
        for flat in np.flatnonzero(own_r.reshape(-1) >= 0):
            ref_px.setdefault(int(own_r.flat[flat]), flat)
        pairs = []
        for flat in np.flatnonzero(own_t.reshape(-1) >= 0):
            p = int(own_t.flat[flat])
            if p in ref_px:
                pairs.append((ref_px.pop(p), flat))
        if not pairs:
            continue
        pairs = np.array(pairs)
        if len(pairs) > max_points:
            pairs = pairs[np.sort(rng.choice(len(pairs), size=max_points, replace=False))]
        w = camera.width
        samples.append(
            CorrespondenceSample(ref_id, tgt_id, np.column_stack([pairs[:, 0] // w, pairs[:, 0] % w]), np.column_stack([pairs[:, 1] // w, pairs[:, 1] % w]))
        )
    if not samples:
        raise ValueError("no correspondences between any reference/target pair")
    return TrainingData(features, samples, classes)
