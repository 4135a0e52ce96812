"""Patch-tiled prediction with linearly blended overlaps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import FeatureMap, ScoreMap

WEIGHT_FLOOR = 1e-6


@dataclass(frozen=True)
class TileSpec:
    patch_size: int = 713
    stride: int = 476
    core_size: int = 236

    def __post_init__(self):
        if not (0 < self.core_size <= self.patch_size):
            raise ValueError("need 0 < core_size <= patch_size")
        if not (0 < self.stride <= self.patch_size):
            raise ValueError("need 0 < stride <= patch_size")


def axis_ramp(patch_size: int, core_size: int) -> np.ndarray:
    """1-D weights: 1 on the centred core, falling linearly to 0 at both ends.

    With ``lead = (patch_size - core_size) // 2`` pixels before the core and
    ``tail`` after it, pixel ``i < lead`` gets ``i / lead`` and pixel ``j``
    past the core gets ``(patch_size - 1 - j) / tail``.
    """
    lead = (patch_size - core_size) // 2
    tail = patch_size - core_size - lead
    w = np.ones(patch_size)
    if lead:
        w[:lead] = np.arange(lead) / lead
    if tail:
        w[lead + core_size :] = (tail - 1 - np.arange(tail)) / tail
    return w


def make_weight_map(spec: TileSpec = TileSpec()) -> np.ndarray:
    """Separable 2-D interpolation weights, ``ramp[:, None] * ramp[None, :]``."""
    ramp = axis_ramp(spec.patch_size, spec.core_size)
    return np.outer(ramp, ramp)


def patch_origins(length: int, patch: int, stride: int) -> list[int]:
    """Patch start offsets along one axis; the last patch ends at the border."""
    if length <= patch:
        return [0]
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] + patch < length:
        starts.append(length - patch)
    return starts


def blend_predict(
    image_features: FeatureMap,
    predictor: Callable[[np.ndarray], np.ndarray],
    spec: TileSpec = TileSpec(),
) -> ScoreMap:
    """Run ``predictor`` on overlapping patches and blend by weighted mean.

    ``predictor`` maps a ``(P, P, d)`` feature patch to ``(P, P, C)`` scores.
    Patches that overhang a small image are edge-padded.  Pixels whose only
    covering weights are exactly zero fall back to weights of 1e-6 each.
    """
    data = image_features.data
    h, w, _ = data.shape
    p = spec.patch_size
    weights = make_weight_map(spec)
    pad_h, pad_w = max(0, p - h), max(0, p - w)
    padded = np.pad(data, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge") if (pad_h or pad_w) else data

    acc = acc_w = acc_floor = floor_n = None
    for r0 in patch_origins(h, p, spec.stride):
        for c0 in patch_origins(w, p, spec.stride):
            out = np.asarray(predictor(padded[r0 : r0 + p, c0 : c0 + p]), dtype=np.float64)
            if out.ndim != 3 or out.shape[:2] != (p, p):
                raise ValueError(f"predictor returned shape {out.shape}, expected ({p}, {p}, C)")
            if acc is None:
                acc = np.zeros((h, w, out.shape[2]))
                acc_floor = np.zeros_like(acc)
                acc_w = np.zeros((h, w))
                floor_n = np.zeros((h, w))
            elif out.shape[2] != acc.shape[2]:
                raise ValueError("predictor changed its class count between patches")
            rh, rw = min(p, h - r0), min(p, w - c0)
            wt = weights[:rh, :rw]
            sc = out[:rh, :rw]
            acc[r0 : r0 + rh, c0 : c0 + rw] += wt[..., None] * sc
            acc_w[r0 : r0 + rh, c0 : c0 + rw] += wt
            acc_floor[r0 : r0 + rh, c0 : c0 + rw] += sc
            floor_n[r0 : r0 + rh, c0 : c0 + rw] += 1
    dead = acc_w <= 0
    result = np.empty_like(acc)
    result[~dead] = acc[~dead] / acc_w[~dead][:, None]
    # all covering weights were 1e-6, which cancels to a plain mean
    result[dead] = acc_floor[dead] / floor_n[dead][:, None]
    return ScoreMap(result)
