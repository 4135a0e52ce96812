"""Core data types, persistence and point-cloud labeling.

Rasters are addressed ``(row, col)`` with the origin at the top-left pixel.
Continuous pixel coordinates are ``(u, v) = (x, y)``; pixel ``(u, v)`` lies in
raster cell ``(round(v), round(u))``.  Poses map world to camera:
``X_cam = R @ X_world + t``.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

MAGIC = b"FGSN1"
_ORTHO_TOL = 1e-9


class ArtifactParseError(ValueError):
    """Raised when a persisted artifact cannot be decoded.

    Attributes
    ----------
    field : str
        Name of the offending field (or ``"header"`` / ``"payload"``).
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense per-pixel feature vectors, shape ``(height, width, dim)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError("FeatureMap data must have shape (height, width, dim)")
        if not np.all(np.isfinite(data)):
            raise ValueError("FeatureMap data must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def vectors(self) -> np.ndarray:
        return self.data.reshape(-1, self.dim)

    def __eq__(self, other):
        return isinstance(other, FeatureMap) and _bitwise_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Hard per-pixel labels, shape ``(height, width)``."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("LabelMap labels must have shape (height, width)")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("every label must lie in [0, num_classes)")
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def at(self, pixels: np.ndarray) -> np.ndarray:
        """Labels at continuous ``(u, v)`` pixel coordinates (nearest cell)."""
        rows, cols = pixel_cells(pixels)
        return self.labels[rows, cols]

    def __eq__(self, other):
        return (
            isinstance(other, LabelMap)
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class ScoreMap:
    """Per-pixel class scores, shape ``(height, width, num_classes)``."""

    scores: np.ndarray

    def __post_init__(self):
        scores = np.ascontiguousarray(self.scores, dtype=np.float32)
        if scores.ndim != 3:
            raise ValueError("ScoreMap scores must have shape (height, width, classes)")
        if not np.all(np.isfinite(scores)):
            raise ValueError("ScoreMap scores must be finite")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def num_classes(self) -> int:
        return self.scores.shape[2]

    def is_normalized(self, tol: float = 1e-6) -> bool:
        s = self.scores.astype(np.float64)
        return bool(
            np.all(s >= -tol) and np.all(s <= 1 + tol) and np.allclose(s.sum(-1), 1.0, atol=tol)
        )

    def argmax(self) -> LabelMap:
        return LabelMap(np.argmax(self.scores, axis=-1), self.num_classes)

    def __eq__(self, other):
        return isinstance(other, ScoreMap) and _bitwise_equal(self.scores, other.scores)


def pixel_cells(pixels) -> tuple[np.ndarray, np.ndarray]:
    """Map continuous ``(u, v)`` coordinates to integer ``(rows, cols)``."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    cols = np.floor(pixels[:, 0] + 0.5).astype(np.int64)
    rows = np.floor(pixels[:, 1] + 0.5).astype(np.int64)
    return rows, cols


def _bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# geometry types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrespondenceSample:
    """Matched pixels between a reference and a target image.

    Points are integer ``(row, col)`` pairs.
    """

    ref_image_id: str
    tgt_image_id: str
    ref_points: np.ndarray
    tgt_points: np.ndarray

    def __post_init__(self):
        ref = np.asarray(self.ref_points, dtype=np.int64).reshape(-1, 2)
        tgt = np.asarray(self.tgt_points, dtype=np.int64).reshape(-1, 2)
        if len(ref) < 1 or len(ref) != len(tgt):
            raise ValueError("need N >= 1 reference and target points of equal count")
        ref.setflags(write=False)
        tgt.setflags(write=False)
        object.__setattr__(self, "ref_points", ref)
        object.__setattr__(self, "tgt_points", tgt)

    def __len__(self):
        return len(self.ref_points)

    def check_bounds(self, ref_shape: tuple[int, int], tgt_shape: tuple[int, int]) -> None:
        for name, pts, (h, w) in (
            ("ref_points", self.ref_points, ref_shape),
            ("tgt_points", self.tgt_points, tgt_shape),
        ):
            if np.any(pts < 0) or np.any(pts[:, 0] >= h) or np.any(pts[:, 1] >= w):
                raise ValueError(f"{name} outside image bounds {h}x{w}")

    def __eq__(self, other):
        return (
            isinstance(other, CorrespondenceSample)
            and self.ref_image_id == other.ref_image_id
            and self.tgt_image_id == other.tgt_image_id
            and np.array_equal(self.ref_points, other.ref_points)
            and np.array_equal(self.tgt_points, other.tgt_points)
        )


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def bearings(self, pixels) -> np.ndarray:
        """Unit viewing rays (camera frame) for ``(u, v)`` pixels."""
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        rays = np.column_stack(
            [(pixels[:, 0] - self.cx) / self.fx, (pixels[:, 1] - self.cy) / self.fy, np.ones(len(pixels))]
        )
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    def in_bounds(self, pixels) -> np.ndarray:
        """True where the nearest raster cell of ``(u, v)`` exists."""
        rows, cols = pixel_cells(pixels)
        return (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with determinant 1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, rotation, center) -> "Pose":
        R = np.asarray(rotation, dtype=np.float64)
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def transform(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        R = _reorthonormalize(self.rotation @ other.rotation)
        return Pose(R, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T.copy(), -self.rotation.T @ self.translation)

    def __eq__(self, other):
        return (
            isinstance(other, Pose)
            and _bitwise_equal(self.rotation, other.rotation)
            and _bitwise_equal(self.translation, other.translation)
        )


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    """3-D points with an integer label each and optional descriptors."""

    points: np.ndarray
    labels: np.ndarray
    num_classes: int
    descriptors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if len(pts) != len(labels):
            raise ValueError("points and labels differ in length")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        pts.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        if self.descriptors is not None:
            desc = np.array(self.descriptors, dtype=np.float64).reshape(len(pts), -1)
            desc.setflags(write=False)
            object.__setattr__(self, "descriptors", desc)

    def __len__(self):
        return len(self.points)

    def relabeled(self, labels, num_classes: int) -> "LabeledPointCloud":
        return LabeledPointCloud(self.points, labels, num_classes, self.descriptors)

    def __eq__(self, other):
        if not isinstance(other, LabeledPointCloud):
            return False
        if (self.descriptors is None) != (other.descriptors is None):
            return False
        same_desc = self.descriptors is None or _bitwise_equal(self.descriptors, other.descriptors)
        return (
            self.num_classes == other.num_classes
            and _bitwise_equal(self.points, other.points)
            and np.array_equal(self.labels, other.labels)
            and same_desc
        )


# ---------------------------------------------------------------------------
# point labeling
# ---------------------------------------------------------------------------


def majority_label(observations: Sequence[tuple[Any, Sequence[int]]], segmentations: Mapping[Any, LabelMap]) -> int:
    """Fuse the labels a 3-D point receives from several segmented images.

    ``observations`` holds ``(image_id, (row, col))`` pairs.  The most frequent
    label wins; ties go to the lowest label index.
    """
    if len(observations) == 0:
        raise ValueError("no observations")
    votes: Counter = Counter()
    for image_id, (row, col) in observations:
        lm = segmentations[image_id]
        if not (0 <= row < lm.height and 0 <= col < lm.width):
            raise ValueError(f"observation ({row}, {col}) outside image {image_id!r}")
        votes[int(lm.labels[row, col])] += 1
    best = max(votes.values())
    return min(label for label, n in votes.items() if n == best)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_RASTER_KINDS = {FeatureMap: "feature", ScoreMap: "score", LabelMap: "label"}
RASTER_SUFFIXES = {".fmap": "feature", ".smap": "score", ".lmap": "label"}


def save_raster(path, raster) -> None:
    """Write a raster in the ``FGSN1`` binary layout.

    Layout: magic, then ``height, width, dim`` as little-endian uint32, then
    the payload as little-endian float32 (features, scores) or uint32 labels.
    For label maps the third header field carries ``num_classes``.
    """
    if isinstance(raster, FeatureMap):
        h, w, d = raster.data.shape
        payload = raster.data.astype("<f4").tobytes()
    elif isinstance(raster, ScoreMap):
        h, w, d = raster.scores.shape
        payload = raster.scores.astype("<f4").tobytes()
    elif isinstance(raster, LabelMap):
        h, w = raster.labels.shape
        d = raster.num_classes
        payload = raster.labels.astype("<u4").tobytes()
    else:
        raise TypeError(f"not a raster: {type(raster).__name__}")
    Path(path).write_bytes(MAGIC + struct.pack("<III", h, w, d) + payload)


def load_raster(path, kind: Optional[str] = None):
    """Read an ``FGSN1`` raster.

    The layout does not record which raster type it holds, so ``kind``
    (``"feature"``, ``"score"`` or ``"label"``) selects it.  Without a hint the
    file suffix decides (``.fmap``, ``.smap``, ``.lmap``), then the payload
    size: ``4*h*w`` bytes with a third field other than 1 means labels,
    anything else is read as features.
    """
    path = Path(path)
    blob = path.read_bytes()
    head = len(MAGIC) + 12
    if len(blob) < head or not blob.startswith(MAGIC):
        raise ArtifactParseError("header", "missing FGSN1 magic or truncated header")
    h, w, d = struct.unpack("<III", blob[len(MAGIC) : head])
    body = blob[head:]
    kind = kind or RASTER_SUFFIXES.get(path.suffix)
    if kind is None:
        kind = "label" if (len(body) == 4 * h * w and d != 1) else "feature"
    if kind == "label":
        if len(body) != 4 * h * w:
            raise ArtifactParseError("labels", f"expected {4 * h * w} payload bytes, found {len(body)}")
        labels = np.frombuffer(body, dtype="<u4").astype(np.int64).reshape(h, w)
        try:
            return LabelMap(labels, d)
        except ValueError as exc:
            raise ArtifactParseError("labels", str(exc)) from exc
    if kind not in ("feature", "score"):
        raise ValueError(f"unknown raster kind {kind!r}")
    if len(body) != 4 * h * w * d:
        raise ArtifactParseError("data", f"expected {4 * h * w * d} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(h, w, d)
    try:
        return FeatureMap(arr) if kind == "feature" else ScoreMap(arr)
    except ValueError as exc:
        raise ArtifactParseError("data", str(exc)) from exc


def _arr(a) -> Any:
    return None if a is None else np.asarray(a).tolist()


class RunConfig(dict):
    """Plain mapping of CLI option names to values, stored in the container."""


def _encode(obj) -> tuple[str, dict]:
    from . import clustering, geometry, simulation, training  # local: avoid import cycles

    if isinstance(obj, RunConfig):
        return "RunConfig", dict(obj)
    if isinstance(obj, geometry.MatchSet):
        return "MatchSet", {
            "pixels": _arr(obj.pixels),
            "point_ids": _arr(obj.point_ids),
            "best_dist": _arr(obj.best_dist),
            "second_dist": _arr(obj.second_dist),
            "is_inlier": _arr(obj.is_inlier),
        }
    if isinstance(obj, simulation.Trajectory):
        return "Trajectory", obj.to_dict()

    if isinstance(obj, Pose):
        return "Pose", {"rotation": _arr(obj.rotation), "translation": _arr(obj.translation)}
    if isinstance(obj, PinholeCamera):
        return "PinholeCamera", {f.name: getattr(obj, f.name) for f in fields(obj)}
    if isinstance(obj, LabeledPointCloud):
        return "LabeledPointCloud", {
            "points": _arr(obj.points),
            "labels": _arr(obj.labels),
            "num_classes": obj.num_classes,
            "descriptors": _arr(obj.descriptors),
        }
    if isinstance(obj, CorrespondenceSample):
        return "CorrespondenceSample", {
            "ref_image_id": obj.ref_image_id,
            "tgt_image_id": obj.tgt_image_id,
            "ref_points": _arr(obj.ref_points),
            "tgt_points": _arr(obj.tgt_points),
        }
    if isinstance(obj, LabelMap):
        return "LabelMap", {"labels": _arr(obj.labels), "num_classes": obj.num_classes}
    if isinstance(obj, clustering.CentroidSet):
        return "CentroidSet", {"centroids": _arr(obj.centroids)}
    if isinstance(obj, clustering.WhitenTransform):
        return "WhitenTransform", {
            "mean": _arr(obj.mean),
            "projection": _arr(obj.projection),
            "eigenvalue_floor": obj.eigenvalue_floor,
        }
    if isinstance(obj, training.ToyHead):
        return "ToyHead", {"layers": [{"weights": _arr(w), "biases": _arr(b)} for w, b in obj.layers]}
    if isinstance(obj, training.TrainConfig):
        return "TrainConfig", {f.name: getattr(obj, f.name) for f in fields(obj)}
    if isinstance(obj, list) and all(isinstance(o, CorrespondenceSample) for o in obj):
        return "CorrespondenceSet", {"samples": [_encode(o)[1] for o in obj]}
    if isinstance(obj, list) and all(isinstance(o, Pose) for o in obj):
        return "PoseList", {"poses": [_encode(o)[1] for o in obj]}
    raise TypeError(f"no container encoding for {type(obj).__name__}")


def _need(data: Mapping, key: str, kind: str):
    if not isinstance(data, Mapping) or key not in data:
        raise ArtifactParseError(key, f"missing from {kind}")
    return data[key]


def _decode(kind: str, data: Mapping):
    from . import clustering, geometry, simulation, training

    def build(fn, key, value):
        try:
            return fn(value)
        except (TypeError, ValueError) as exc:
            raise ArtifactParseError(key, str(exc)) from exc

    try:
        if kind == "RunConfig":
            if not isinstance(data, Mapping):
                raise ArtifactParseError("data", "RunConfig must be a mapping")
            return RunConfig(data)
        if kind == "MatchSet":
            opt = {k: data.get(k) for k in ("best_dist", "second_dist", "is_inlier")}
            return geometry.MatchSet(
                build(lambda v: np.array(v, dtype=np.float64).reshape(-1, 2), "pixels", _need(data, "pixels", kind)),
                build(lambda v: np.array(v, dtype=np.int64), "point_ids", _need(data, "point_ids", kind)),
                **opt,
            )
        if kind == "Trajectory":
            for key in ("states", "odometry", "camera_height"):
                _need(data, key, kind)
            return simulation.Trajectory.from_dict(data)
        if kind == "Pose":
            return Pose(_need(data, "rotation", kind), _need(data, "translation", kind))
        if kind == "PinholeCamera":
            return PinholeCamera(**{f.name: _need(data, f.name, kind) for f in fields(PinholeCamera)})
        if kind == "LabeledPointCloud":
            desc = data.get("descriptors")
            return LabeledPointCloud(
                build(lambda v: np.array(v, dtype=np.float64).reshape(-1, 3), "points", _need(data, "points", kind)),
                build(lambda v: np.array(v, dtype=np.int64), "labels", _need(data, "labels", kind)),
                _need(data, "num_classes", kind),
                None if desc is None else np.array(desc, dtype=np.float64),
            )
        if kind == "CorrespondenceSample":
            return CorrespondenceSample(
                _need(data, "ref_image_id", kind),
                _need(data, "tgt_image_id", kind),
                _need(data, "ref_points", kind),
                _need(data, "tgt_points", kind),
            )
        if kind == "LabelMap":
            labels = build(lambda v: np.array(v, dtype=np.int64).reshape(len(v), -1), "labels", _need(data, "labels", kind))
            return LabelMap(labels, _need(data, "num_classes", kind))
        if kind == "CentroidSet":
            return clustering.CentroidSet(build(lambda v: np.array(v, dtype=np.float64), "centroids", _need(data, "centroids", kind)))
        if kind == "WhitenTransform":
            return clustering.WhitenTransform(
                np.array(_need(data, "mean", kind), dtype=np.float64),
                np.array(_need(data, "projection", kind), dtype=np.float64),
                float(_need(data, "eigenvalue_floor", kind)),
            )
        if kind == "ToyHead":
            layers = []
            for i, layer in enumerate(_need(data, "layers", kind)):
                w = np.array(_need(layer, "weights", f"layer {i}"), dtype=np.float64)
                b = np.array(_need(layer, "biases", f"layer {i}"), dtype=np.float64)
                layers.append((w, b))
            return training.ToyHead(layers)
        if kind == "TrainConfig":
            return training.TrainConfig(**data)
        if kind == "CorrespondenceSet":
            return [_decode("CorrespondenceSample", s) for s in _need(data, "samples", kind)]
        if kind == "PoseList":
            return [_decode("Pose", p) for p in _need(data, "poses", kind)]
    except ArtifactParseError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ArtifactParseError(kind, str(exc)) from exc
    raise ArtifactParseError("type", f"unknown artifact type {kind!r}")


def dumps_artifact(obj) -> str:
    kind, data = _encode(obj)
    return json.dumps({"format": "fgsn", "version": 1, "type": kind, "data": data}, sort_keys=True)


def loads_artifact(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArtifactParseError("document", f"invalid JSON ({exc.msg} at char {exc.pos})") from exc
    if not isinstance(doc, dict) or doc.get("format") != "fgsn":
        raise ArtifactParseError("format", "not an fgsn container")
    return _decode(_need(doc, "type", "container"), _need(doc, "data", "container"))


def save_artifact(path, obj) -> None:
    """Persist a domain object.

    Rasters go to the binary ``FGSN1`` layout, everything else to the JSON
    container.  Floats are written with shortest round-trip repr, so
    ``load_artifact(save_artifact(x))`` reproduces ``x`` bit for bit.
    """
    if type(obj) in _RASTER_KINDS:
        save_raster(path, obj)
    else:
        Path(path).write_text(dumps_artifact(obj))


def load_artifact(path, kind: Optional[str] = None):
    """Inverse of :func:`save_artifact`; ``kind`` is only consulted for rasters."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        return load_raster(path, kind)
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise ArtifactParseError("document", "not UTF-8 text") from exc
    return loads_artifact(text)
