"""Self-supervised label creation.

Features are sampled (half at correspondence pixels, half uniformly),
PCA-reduced, whitened and l2-normalised, then clustered with Lloyd's k-means.
Clusters that go empty are re-seeded from a randomly chosen non-empty
centroid with a small multiplicative perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import FeatureMap, LabelMap

SOURCE_CORRESPONDENCE = 0
SOURCE_UNIFORM = 1


@dataclass(frozen=True, eq=False)
class FeatureSampleSet:
    vectors: np.ndarray
    source: np.ndarray  # SOURCE_CORRESPONDENCE or SOURCE_UNIFORM per row

    def __len__(self):
        return len(self.vectors)


@dataclass(frozen=True, eq=False)
class WhitenTransform:
    """PCA projection with whitening; ``apply`` also l2-normalises."""

    mean: np.ndarray
    projection: np.ndarray  # (d, r), eigenvectors scaled by 1/sqrt(eigenvalue)
    eigenvalue_floor: float = 1e-8

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def output_dim(self) -> int:
        return self.projection.shape[1]

    def whiten(self, x) -> np.ndarray:
        """Project and whiten without normalising."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected feature dim {self.input_dim}, got {x.shape[-1]}")
        return (x - self.mean) @ self.projection

    def apply(self, x) -> np.ndarray:
        z = self.whiten(x)
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
        return z / np.where(norms > 0, norms, 1.0)

    def __eq__(self, other):
        return (
            isinstance(other, WhitenTransform)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.projection, other.projection)
            and self.eigenvalue_floor == other.eigenvalue_floor
        )


@dataclass(frozen=True, eq=False)
class CentroidSet:
    centroids: np.ndarray  # (m, r)

    @property
    def num_clusters(self) -> int:
        return len(self.centroids)

    def __eq__(self, other):
        return isinstance(other, CentroidSet) and np.array_equal(self.centroids, other.centroids)


def sample_features(
    maps: Sequence[FeatureMap],
    correspondence_pixels: Sequence[np.ndarray],
    total: int,
    seed: int,
) -> FeatureSampleSet:
    """Draw ``total`` feature vectors for clustering.

    ``ceil(total/2)`` vectors come from correspondence pixels (with
    replacement when fewer exist) and the rest uniformly from all pixels of
    all maps.  ``correspondence_pixels[i]`` holds ``(row, col)`` rows for
    ``maps[i]``.
    """
    if len(maps) == 0:
        raise ValueError("no feature maps to sample from")
    if len(correspondence_pixels) != len(maps):
        raise ValueError("need one correspondence pixel list per feature map")
    rng = np.random.default_rng(seed)
    n_corr = (total + 1) // 2
    n_uni = total // 2

    corr = [(i, np.asarray(p, dtype=np.int64).reshape(-1, 2)) for i, p in enumerate(correspondence_pixels)]
    corr_index = np.concatenate([np.column_stack([np.full(len(p), i), p]) for i, p in corr])
    if len(corr_index) == 0:
        raise ValueError("no correspondence pixels to sample from")
    pick = rng.choice(len(corr_index), size=n_corr, replace=len(corr_index) < n_corr)
    vec_corr = np.stack([maps[i].data[r, c] for i, r, c in corr_index[pick]]) if n_corr else None

    sizes = np.array([m.height * m.width for m in maps])
    flat = rng.integers(0, sizes.sum(), size=n_uni)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    img = np.searchsorted(offsets, flat, side="right") - 1
    vec_uni = [maps[i].vectors()[f - offsets[i]] for i, f in zip(img, flat)]

    parts = [p for p in (vec_corr, np.array(vec_uni).reshape(n_uni, maps[0].dim)) if p is not None]
    vectors = np.concatenate(parts).astype(np.float64)
    source = np.concatenate([np.full(n_corr, SOURCE_CORRESPONDENCE), np.full(n_uni, SOURCE_UNIFORM)])
    return FeatureSampleSet(vectors, source)


def fit_whiten(samples, reduced_dim: int, eigenvalue_floor: float = 1e-8) -> WhitenTransform:
    """Fit PCA whitening to ``samples`` keeping the ``reduced_dim`` leading axes.

    Eigenvalues below ``eigenvalue_floor`` are clamped to it.  Covariance is
    the maximum-likelihood (1/N) estimate, so the whitened fitting data has
    exactly identity covariance under the same estimator.
    """
    x = samples.vectors if isinstance(samples, FeatureSampleSet) else np.asarray(samples, dtype=np.float64)
    n, d = x.shape
    if not (n > reduced_dim and d >= reduced_dim and reduced_dim >= 1):
        raise ValueError(f"need N > r and d >= r (N={n}, d={d}, r={reduced_dim})")
    mean = x.mean(axis=0)
    cov = (x - mean).T @ (x - mean) / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:reduced_dim]
    evals = np.maximum(evals[order], eigenvalue_floor)
    evecs = evecs[:, order]
    # fix eigenvector signs so the transform is reproducible across LAPACK builds
    signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(reduced_dim)])
    evecs = evecs * np.where(signs == 0, 1.0, signs)
    return WhitenTransform(mean, evecs / np.sqrt(evals), eigenvalue_floor)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # direct differences rather than the expanded form keep ties exact
    if len(x) * len(c) * x.shape[1] <= 4_000_000:
        return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    out = np.empty((len(x), len(c)))
    step = max(1, 4_000_000 // (len(c) * x.shape[1]))
    for s in range(0, len(x), step):
        out[s : s + step] = ((x[s : s + step, None, :] - c[None, :, :]) ** 2).sum(-1)
    return out


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the closest centroid per row; ties go to the lowest index."""
    return np.argmin(_sq_dists(x, centroids), axis=1)


def kmeans_objective(x: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    return float(((x - centroids[assignments]) ** 2).sum(axis=1).mean())


def _kmeanspp(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, m):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen center; the reassignment step fixes duplicates
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers, dtype=np.float64)


@dataclass
class KMeansResult:
    centroids: CentroidSet
    assignments: np.ndarray
    objective: float
    iterations: int
    objective_trace: list
    reassigned: int


def _reseed_empty(centroids, counts, rng, perturbation):
    empty = np.flatnonzero(counts == 0)
    for j in empty:
        donors = np.flatnonzero(counts > 0)
        src = centroids[rng.choice(donors)]
        u = rng.uniform(-perturbation, perturbation, size=src.shape)
        new = src * (1.0 + u)
        if np.array_equal(new, src):
            # zero coordinates are unaffected by a multiplicative jitter
            new = src + rng.uniform(-perturbation, perturbation, size=src.shape)
        centroids[j] = new
        # the reseeded cluster shares its donor's points; mark it non-empty so
        # later empties may also pick it
        counts[j] = 1
    return len(empty)


def kmeans_cluster(
    samples,
    m: int,
    max_iters: int = 100,
    seed: int = 0,
    perturbation: float = 1e-4,
    init: Optional[np.ndarray] = None,
) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding and empty-cluster reassignment.

    Each iteration assigns every vector to its nearest centroid (ties to the
    lowest index), re-seeds empty clusters from a random non-empty centroid
    times ``1 + u`` with ``u ~ U[-perturbation, perturbation]``, then moves
    each non-empty centroid to the mean of its members.  Iteration stops when
    an assignment pass changes nothing or after ``max_iters`` passes.  The
    returned assignments are the nearest-centroid assignments for the returned
    centroids.
    """
    x = samples.vectors if isinstance(samples, FeatureSampleSet) else np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("no input vectors")
    if m < 1:
        raise ValueError("need at least one cluster")
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, m, rng) if init is None else np.array(init, dtype=np.float64)
    assign = nearest_centroid(x, centroids)
    trace = []
    reassigned = 0
    iters = 0
    while True:
        counts = np.bincount(assign, minlength=m)
        if np.any(counts == 0):
            reassigned += _reseed_empty(centroids, counts.copy(), rng, perturbation)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        counts = np.bincount(assign, minlength=m)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        trace.append(kmeans_objective(x, centroids, assign))
        iters += 1
        new_assign = nearest_centroid(x, centroids)
        if np.array_equal(new_assign, assign) or iters >= max_iters:
            stable = np.array_equal(new_assign, assign)
            assign = new_assign
            if stable:
                break
            # out of iterations: leave centroids as the mean of the final assignment
            counts = np.bincount(assign, minlength=m)
            if np.all(counts > 0):
                sums = np.zeros_like(centroids)
                np.add.at(sums, assign, x)
                centroids = sums / counts[:, None]
                assign = nearest_centroid(x, centroids)
            break
        assign = new_assign
    _separate_duplicates(centroids, rng, perturbation)
    assign = nearest_centroid(x, centroids)
    obj = kmeans_objective(x, centroids, assign)
    return KMeansResult(CentroidSet(centroids), assign, obj, iters, trace, reassigned)


def _separate_duplicates(centroids, rng, perturbation):
    # identical centroids can survive when m exceeds the number of distinct points
    for _ in range(100):
        _, first, inverse = np.unique(centroids, axis=0, return_index=True, return_inverse=True)
        dup = np.flatnonzero(first[inverse.reshape(-1)] != np.arange(len(centroids)))
        if len(dup) == 0:
            return
        for j in dup:
            src = centroids[j]
            jitter = rng.uniform(-perturbation, perturbation, size=src.shape)
            moved = src * (1.0 + jitter)
            centroids[j] = np.where(moved == src, src + jitter, moved)


def kmeans_restarts(samples, m: int, restarts: int, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    """Best of ``restarts`` seeded runs by objective."""
    seeds = np.random.SeedSequence(seed).generate_state(restarts)
    best = None
    for s in seeds:
        res = kmeans_cluster(samples, m, max_iters=max_iters, seed=int(s))
        if best is None or res.objective < best.objective:
            best = res
    return best


def assign_labels(fmap: FeatureMap, transform: WhitenTransform, centroids: CentroidSet) -> LabelMap:
    """Label every pixel with its nearest centroid in whitened space."""
    if fmap.dim != transform.input_dim:
        raise ValueError(f"feature dim {fmap.dim} does not match transform input dim {transform.input_dim}")
    if centroids.centroids.shape[1] != transform.output_dim:
        raise ValueError("centroid dim does not match transform output dim")
    z = transform.apply(fmap.vectors())
    labels = nearest_centroid(z, centroids.centroids)
    return LabelMap(labels.reshape(fmap.height, fmap.width), centroids.num_clusters)
