"""Category-specific fusion of K probability maps using IoU-derived weights."""

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .tensor_io import argmax_labels, one_hot

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 2.5
MODES = ("probability", "binarized", "uniform")


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = DEFAULT_ALPHA
    mode: str = "probability"

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 1:
            raise ArgumentError(f"alpha must be finite and >= 1, got {self.alpha}")
        if self.mode not in MODES:
            raise ArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def from_json(cls, path):
        data = json.loads(Path(path).read_text())
        return cls(alpha=float(data.get("alpha", DEFAULT_ALPHA)), mode=data.get("mode", "probability"))


def compute_weights(iou, alpha=DEFAULT_ALPHA):
    """Per-class weights ``IoU^alpha`` normalized over networks; returns (K, C).

    A class column with no positive IoU falls back to uniform ``1/K``.
    """
    iou = np.asarray(iou, dtype=np.float64)
    if iou.ndim != 2:
        raise ArgumentError(f"IoU sub-matrix must be 2-D (K, C), got shape {iou.shape}")
    if np.any(iou < 0) or not np.all(np.isfinite(iou)):
        raise ArgumentError("IoU values must be finite and non-negative")
    powered = iou**alpha
    totals = powered.sum(axis=0)
    degenerate = totals <= 0
    if degenerate.any():
        logger.warning("all-zero IoU column(s) %s; using uniform weights", np.flatnonzero(degenerate).tolist())
        powered[:, degenerate] = 1.0
        totals = powered.sum(axis=0)
    return powered / totals


def uniform_weights(k, c):
    return np.full((k, c), 1.0 / k)


def _check_stack(maps, weights):
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    if stack.ndim != 4:
        raise ArgumentError("each probability map must be (C, H, W)")
    weights = np.asarray(weights, dtype=np.float64)
    k, c = stack.shape[:2]
    if weights.shape != (k, c):
        raise ArgumentError(f"weights shape {weights.shape} does not match {k} maps x {c} classes")
    return stack, weights


def _weighted_sum(stack, weights):
    fused = np.einsum("kc,kchw->chw", weights, stack)
    totals = fused.sum(axis=0)
    deviation = float(np.abs(totals - 1.0).max()) if totals.size else 0.0
    logger.debug("max pre-normalization deviation from 1: %.3g", deviation)
    # a pixel whose every weighted term is zero cannot be normalized; spread it evenly
    zero = totals <= 0
    if zero.any():
        fused[:, zero] = 1.0
        totals = np.where(zero, fused.shape[0], totals)
    return fused / totals, deviation


def fuse_probability_maps(maps, weights, return_deviation=False):
    """Weighted per-class sum of the maps followed by per-pixel renormalization."""
    stack, weights = _check_stack(maps, weights)
    fused, deviation = _weighted_sum(stack, weights)
    return (fused, deviation) if return_deviation else fused


def fuse_binarized(maps, weights, return_deviation=False):
    """Same fusion applied to the one-hot argmax of every input map."""
    stack, weights = _check_stack(maps, weights)
    c = stack.shape[1]
    hard = np.stack([one_hot(argmax_labels(m), c) for m in stack])
    fused, deviation = _weighted_sum(hard, weights)
    return (fused, deviation) if return_deviation else fused


def fuse(maps, iou=None, config=FusionConfig()):
    """Dispatch on ``config.mode``; ``iou`` is the (K, C) prior sub-matrix."""
    maps = list(maps)
    if config.mode == "uniform":
        c = np.asarray(maps[0]).shape[0]
        return fuse_probability_maps(maps, uniform_weights(len(maps), c))
    if iou is None:
        raise ArgumentError(f"mode {config.mode!r} needs IoU priors")
    weights = compute_weights(iou, config.alpha)
    if config.mode == "binarized":
        return fuse_binarized(maps, weights)
    return fuse_probability_maps(maps, weights)


def write_weights_csv(path, weights, network_names, class_names):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["network", *class_names])
        for name, row in zip(network_names, np.asarray(weights)):
            w.writerow([name, *(repr(float(v)) for v in row)])


def read_weights_csv(path):
    with Path(path).open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    names = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return values, names, rows[0][1:]
