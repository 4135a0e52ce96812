"""Training losses, a toy per-pixel segmentation head and the training loop.

The head is a stack of 1x1 convolutions (per-pixel affine maps with ``tanh``
between them) followed by a per-pixel softmax.  Two losses drive it:

* the class loss, mean cross-entropy of the reference image against its
  cluster labels;
* the correspondence loss, which for each matched pixel pair asks both the
  reference and the target prediction to put mass on the reference label.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import clustering
from .model import CorrespondenceSample, FeatureMap, LabelMap, ScoreMap

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
_LOG_FLOOR = np.log(LOG_FLOOR)


# ---------------------------------------------------------------------------
# losses on normalised score maps
# ---------------------------------------------------------------------------


def _scores(s) -> np.ndarray:
    return np.asarray(s.scores if isinstance(s, ScoreMap) else s, dtype=np.float64)


def _labels(lm) -> np.ndarray:
    return np.asarray(lm.labels if isinstance(lm, LabelMap) else lm, dtype=np.int64)


def _safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_FLOOR))


def class_loss(scores, labels) -> float:
    """Mean over pixels of ``-log(score at the true label)``."""
    s, y = _scores(scores), _labels(labels)
    if s.shape[:2] != y.shape:
        raise ValueError(f"score map {s.shape[:2]} and label map {y.shape} differ in shape")
    h, w = y.shape
    picked = s[np.arange(h)[:, None], np.arange(w)[None, :], y]
    return float(-_safe_log(picked).mean()) + 0.0  # no negative zero


def _check_points(points: np.ndarray, shape, name: str):
    h, w = shape
    if np.any(points < 0) or np.any(points[:, 0] >= h) or np.any(points[:, 1] >= w):
        raise ValueError(f"{name} correspondence pixel outside {h}x{w} map")


def corr_loss(ref_scores, tgt_scores, sample: CorrespondenceSample, ref_labels) -> float:
    """Cluster correspondence cross-entropy for one image pair.

    ``-(1/N) sum_i c_i . (log d_ref(x_r_i) + log d_tgt(x_t_i))`` where ``c_i``
    is the one-hot reference label at ``x_r_i``.
    """
    r, t, y = _scores(ref_scores), _scores(tgt_scores), _labels(ref_labels)
    _check_points(sample.ref_points, r.shape[:2], "reference")
    _check_points(sample.tgt_points, t.shape[:2], "target")
    (rr, rc), (tr, tc) = sample.ref_points.T, sample.tgt_points.T
    c = y[rr, rc]
    return float(-(_safe_log(r[rr, rc, c]) + _safe_log(t[tr, tc, c])).mean()) + 0.0  # no negative zero


def mean_corr_loss(items) -> float:
    """Average of :func:`corr_loss` over ``(ref_scores, tgt_scores, sample, ref_labels)`` tuples."""
    items = list(items)
    if not items:
        raise ValueError("no correspondence samples")
    return float(np.mean([corr_loss(*it) for it in items]))


def total_loss(ref_scores, tgt_scores, sample: CorrespondenceSample, ref_labels) -> float:
    return class_loss(ref_scores, ref_labels) + corr_loss(ref_scores, tgt_scores, sample, ref_labels)


# ---------------------------------------------------------------------------
# toy head
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(eq=False)
class ToyHead:
    """Per-pixel MLP: ``(weights (in, out), biases (out,))`` per layer."""

    layers: list

    def __post_init__(self):
        self.layers = [(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64).reshape(-1)) for w, b in self.layers]
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and w.shape[0] != self.layers[i - 1][0].shape[1]:
                raise ValueError(f"layer {i} input dim does not match previous output")

    @classmethod
    def init(cls, input_dim: int, hidden_dims: Sequence[int], num_classes: int, rng, reinit_std: float = 0.01) -> "ToyHead":
        dims = [input_dim, *hidden_dims]
        layers = [(rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])]
        layers.append((rng.normal(0.0, reinit_std, size=(dims[-1], num_classes)), np.zeros(num_classes)))
        return cls(layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[1] if self.layers else 0

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    def params(self) -> list:
        return [p for layer in self.layers for p in layer]

    def param_names(self) -> list:
        return [f"layers[{i}].{n}" for i in range(len(self.layers)) for n in ("weights", "biases")]

    def with_params(self, params) -> "ToyHead":
        it = iter(params)
        return ToyHead([(next(it), next(it)) for _ in self.layers])

    def copy(self) -> "ToyHead":
        return ToyHead([(w.copy(), b.copy()) for w, b in self.layers])

    def forward(self, x: np.ndarray, keep: bool = False):
        """Logits for pixel features ``x`` of shape ``(..., input_dim)``.

        With ``keep`` the per-layer inputs are returned too, for backprop.
        """
        acts = [np.asarray(x, dtype=np.float64)]
        h = acts[0]
        for i, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if i < len(self.layers) - 1:
                h = np.tanh(h)
                acts.append(h)
        return (h, acts) if keep else h

    def penultimate(self, x: np.ndarray) -> np.ndarray:
        """Activations fed to the final layer; these are what gets clustered."""
        h = np.asarray(x, dtype=np.float64)
        for w, b in self.layers[:-1]:
            h = np.tanh(h @ w + b)
        return h

    def predict(self, fmap) -> ScoreMap:
        data = fmap.data if isinstance(fmap, FeatureMap) else fmap
        return ScoreMap(softmax(self.forward(data)))

    def backward(self, acts, dlogits):
        """Parameter gradients given upstream gradient on the logits."""
        grads = [None] * (2 * len(self.layers))
        g = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            a = acts[i].reshape(-1, w.shape[0])
            gf = g.reshape(-1, w.shape[1])
            grads[2 * i] = a.T @ gf
            grads[2 * i + 1] = gf.sum(axis=0)
            if i:
                g = (g @ w.T) * (1.0 - acts[i] ** 2)
        return grads

    def __eq__(self, other):
        return (
            isinstance(other, ToyHead)
            and len(self.layers) == len(other.layers)
            and all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))
        )


@dataclass
class TrainItem:
    """One batch element: reference/target features, matches and reference labels."""

    ref: np.ndarray  # (H, W, d)
    tgt: np.ndarray
    sample: CorrespondenceSample
    ref_labels: np.ndarray  # (H, W)


def _log_probs(logits: np.ndarray):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return logp, np.exp(logp)


def loss_and_grad(head: ToyHead, batch: Sequence[TrainItem], terms: str = "total"):
    """Loss and parameter gradients for ``L_class + L_corr`` (or one term).

    ``terms`` is ``"total"``, ``"class"`` or ``"corr"``.  Both terms are
    averaged over batch items.  Log-probabilities are clamped at
    ``log(1e-12)``; clamped entries contribute no gradient.
    """
    use_class = terms in ("total", "class")
    use_corr = terms in ("total", "corr")
    if not (use_class or use_corr):
        raise ValueError(f"unknown loss terms {terms!r}")
    n_items = len(batch)
    lc = lco = 0.0
    grads = [np.zeros_like(p) for p in head.params()]
    for item in batch:
        y = np.asarray(item.ref_labels)
        logit_r, acts_r = head.forward(item.ref, keep=True)
        logit_t, acts_t = head.forward(item.tgt, keep=True)
        logp_r, p_r = _log_probs(logit_r)
        logp_t, p_t = _log_probs(logit_t)
        live_r = logp_r > _LOG_FLOOR
        live_t = logp_t > _LOG_FLOOR
        g_r = np.zeros_like(logit_r)
        g_t = np.zeros_like(logit_t)
        h, w = y.shape

        def add_ce(g, p, live, rows, cols, labels, weight):
            # d(-log p_c)/dlogits = p - onehot(c), zero where the log is clamped
            mask = live[rows, cols, labels].astype(np.float64) * weight
            np.add.at(g, (rows, cols), p[rows, cols] * mask[:, None])
            np.add.at(g, (rows, cols, labels), -mask)

        if use_class:
            rows, cols = np.divmod(np.arange(h * w), w)
            lab = y[rows, cols]
            lc += -np.maximum(logp_r[rows, cols, lab], _LOG_FLOOR).mean() / n_items
            add_ce(g_r, p_r, live_r, rows, cols, lab, 1.0 / (h * w * n_items))
        if use_corr:
            _check_points(item.sample.ref_points, (h, w), "reference")
            _check_points(item.sample.tgt_points, logit_t.shape[:2], "target")
            (rr, rc), (tr, tc) = item.sample.ref_points.T, item.sample.tgt_points.T
            c = y[rr, rc]
            n = len(c)
            term = np.maximum(logp_r[rr, rc, c], _LOG_FLOOR) + np.maximum(logp_t[tr, tc, c], _LOG_FLOOR)
            lco += -term.mean() / n_items
            add_ce(g_r, p_r, live_r, rr, rc, c, 1.0 / (n * n_items))
            add_ce(g_t, p_t, live_t, tr, tc, c, 1.0 / (n * n_items))
        for gs in (head.backward(acts_r, g_r), head.backward(acts_t, g_t)):
            for k, g in enumerate(gs):
                grads[k] += g
    return {"class": float(lc), "corr": float(lco), "total": float(lc + lco)}, grads


def head_scores(head: ToyHead, item: TrainItem):
    return softmax(head.forward(item.ref)), softmax(head.forward(item.tgt))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 2.5e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    recluster_interval: int = 100
    total_iterations: int = 1000
    reinit_std: float = 0.01
    no_recluster_reset: bool = False
    seed: int = 0
    num_clusters: int = 20
    hidden_dims: list = field(default_factory=lambda: [16])
    pca_dim: int = 8
    cluster_samples: int = 2000
    kmeans_iters: int = 100
    val_fraction: float = 0.3

    def __post_init__(self):
        self.hidden_dims = list(self.hidden_dims)
        if not (self.learning_rate > 0 and self.momentum >= 0 and self.weight_decay >= 0 and self.reinit_std > 0):
            raise ValueError("learning rate and reinit std must be positive; momentum and weight decay non-negative")
        if not (1 <= self.recluster_interval <= self.total_iterations):
            raise ValueError("need 1 <= recluster_interval <= total_iterations")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if not (0 <= self.val_fraction < 1):
            raise ValueError("val_fraction must lie in [0, 1)")


def sgd_step(head: ToyHead, grads, config: TrainConfig, velocity=None):
    """One momentum-SGD step with L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``.  Returns ``(new_head, new_velocity)``.
    """
    params = head.params()
    names = head.param_names()
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameter blocks")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_params, new_vel = [], []
    for name, p, g, v in zip(names, params, grads, velocity):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        v = config.momentum * v + g + config.weight_decay * p
        new_vel.append(v)
        new_params.append(p - config.learning_rate * v)
    return head.with_params(new_params), new_vel


def grad_check(head: ToyHead, batch: Sequence[TrainItem], epsilon: float = 1e-5, terms: str = "total") -> float:
    """Largest relative gap between analytic and central-difference gradients."""
    params = head.params()
    if sum(p.size for p in params) == 0:
        return 0.0
    _, analytic = loss_and_grad(head, batch, terms)
    worst = 0.0
    for k, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += epsilon
            minus[k][idx] -= epsilon
            fp = loss_and_grad(head.with_params(plus), batch, terms)[0][terms]
            fm = loss_and_grad(head.with_params(minus), batch, terms)[0][terms]
            numeric = (fp - fm) / (2 * epsilon)
            a = analytic[k][idx]
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    head: ToyHead
    centroid_history: list  # (iteration, WhitenTransform, CentroidSet)
    loss_trace: list  # (iteration, L_class, L_corr, L)
    val_history: list  # (iteration, validation L_corr)
    best_iteration: int

    def loss_trace_csv(self) -> str:
        lines = ["iteration,L_class,L_corr,L"]
        lines += [f"{i},{a!r},{b!r},{c!r}" for i, a, b, c in self.loss_trace]
        return "\n".join(lines) + "\n"


def split_samples(samples: Sequence[CorrespondenceSample], val_fraction: float, seed: int):
    """Seeded train/validation split; at least one training sample is kept."""
    rng = np.random.default_rng([seed, 1])
    order = rng.permutation(len(samples))
    n_val = min(int(round(val_fraction * len(samples))), len(samples) - 1)
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


def recluster(head: ToyHead, ref_maps: dict, corr_pixels: dict, config: TrainConfig, seed: int):
    """Cluster penultimate features of the reference images and label them."""
    ids = sorted(ref_maps)
    feats = [FeatureMap(head.penultimate(ref_maps[i].data)) for i in ids]
    samples = clustering.sample_features(feats, [corr_pixels[i] for i in ids], config.cluster_samples, seed)
    dim = min(config.pca_dim, feats[0].dim, len(samples) - 1)
    wt = clustering.fit_whiten(samples, dim)
    km = clustering.kmeans_cluster(wt.apply(samples.vectors), config.num_clusters, config.kmeans_iters, seed)
    labels = {i: clustering.assign_labels(f, wt, km.centroids).labels for i, f in zip(ids, feats)}
    return wt, km.centroids, labels


def train_loop(
    feature_provider: Callable[[str], FeatureMap],
    correspondence_set: Sequence[CorrespondenceSample],
    config: TrainConfig,
) -> TrainResult:
    """Train a :class:`ToyHead` with periodic re-clustering.

    Every ``recluster_interval`` iterations the reference images are
    re-clustered and relabelled; unless ``no_recluster_reset`` is set the
    final layer is then redrawn from ``N(0, reinit_std)`` with zero biases.
    Validation ``L_corr`` is measured just before each re-clustering and at
    the end; the head with the lowest value is returned.
    """
    if not correspondence_set:
        raise ValueError("need at least one correspondence sample")
    train, val = split_samples(list(correspondence_set), config.val_fraction, config.seed)
    seeds = np.random.SeedSequence(config.seed)
    rng_init, rng_pick, rng_cluster = (np.random.default_rng(s) for s in seeds.spawn(3))

    cache: dict = {}

    def fetch(image_id, it):
        if image_id not in cache:
            try:
                cache[image_id] = feature_provider(image_id)
            except Exception as exc:  # noqa: BLE001 - provider errors are re-raised with context
                raise RuntimeError(f"feature provider failed for {image_id!r} at iteration {it}: {exc}") from exc
        return cache[image_id]

    ref_ids = sorted({s.ref_image_id for s in correspondence_set})
    ref_maps = {i: fetch(i, 0) for i in ref_ids}
    corr_pixels = {i: [] for i in ref_ids}
    for s in correspondence_set:
        corr_pixels[s.ref_image_id].append(s.ref_points)
    corr_pixels = {i: np.concatenate(p) for i, p in corr_pixels.items()}

    dim = next(iter(ref_maps.values())).dim
    head = ToyHead.init(dim, config.hidden_dims, config.num_clusters, rng_init, config.reinit_std)
    velocity = None
    labels: dict = {}
    history, trace, val_hist = [], [], []
    best = (np.inf, head.copy(), 0)

    def items_for(samples, it):
        return [TrainItem(fetch(s.ref_image_id, it).data, fetch(s.tgt_image_id, it).data, s, labels[s.ref_image_id]) for s in samples]

    def validate(it):
        nonlocal best
        items = items_for(val or train, it)
        value = float(np.mean([loss_and_grad(head, [x], "corr")[0]["corr"] for x in items]))
        val_hist.append((it, value))
        if value < best[0]:
            best = (value, head.copy(), it)

    for it in range(config.total_iterations):
        if it % config.recluster_interval == 0:
            if it:
                validate(it)
            wt, cents, labels = recluster(head, ref_maps, corr_pixels, config, int(rng_cluster.integers(2**31)))
            history.append((it, wt, cents))
            if it and not config.no_recluster_reset:
                w_last = rng_init.normal(0.0, config.reinit_std, size=head.layers[-1][0].shape)
                head = ToyHead(head.layers[:-1] + [(w_last, np.zeros(config.num_clusters))])
                if velocity is not None:
                    velocity[-2:] = [np.zeros_like(velocity[-2]), np.zeros_like(velocity[-1])]
            log.debug("iteration %d: re-clustered into %d clusters", it, config.num_clusters)
        sample = train[int(rng_pick.integers(len(train)))]
        losses, grads = loss_and_grad(head, items_for([sample], it))
        trace.append((it, losses["class"], losses["corr"], losses["total"]))
        head, velocity = sgd_step(head, grads, config, velocity)
    validate(config.total_iterations)
    return TrainResult(best[1], history, trace, val_hist, best[2])
