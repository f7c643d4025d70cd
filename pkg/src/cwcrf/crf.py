"""Fully connected CRF refinement of a fused probability map.

Energy of a labeling ``x``::

    E(x) = sum_i -log P_{x_i}(i)
         + sum_{i<j} [x_i != x_j] (w_g k_g(i, j) + w_b k_b(i, j))

with a spatial Gaussian kernel ``k_g`` and a position+color bilateral kernel
``k_b``.  Three solvers are provided:

* ``mean_field_dense_exact`` - mean-field over all pixel pairs, O(n^2) memory.
* ``mean_field_windowed``   - same update with messages truncated to a square
  window; scales to large images.
* ``exhaustive_map``        - brute-force global minimizer for tiny instances.
"""

import functools
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, BudgetExceededError
from .tensor_io import argmax_labels

logger = logging.getLogger(__name__)

EXACT_PIXEL_BUDGET = 4096
EXHAUSTIVE_BUDGET = 10**6
EARLY_STOP_TOL = 1e-4
TRUNCATION_MULTIPLIER = 3.0
_BLOCK_ROWS = 512
# precompute windowed kernel weights only below this many float64 entries
_WINDOW_CACHE_LIMIT = 16 * 1024 * 1024


@dataclass(frozen=True)
class CrfParams:
    sigma_g: float = 3.0
    sigma_b: float = 8.0
    sigma_c: float = 10.0
    w_g: float = 0.1
    w_b: float = 0.2
    iterations: int = 5
    epsilon_prob: float = 1e-12

    def __post_init__(self):
        for name in ("sigma_g", "sigma_b", "sigma_c"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ArgumentError(f"{name} must be a positive finite number, got {v}")
        for name in ("w_g", "w_b"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ArgumentError(f"{name} must be non-negative, got {v}")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ArgumentError(f"iterations must be a non-negative integer, got {self.iterations}")
        if not 0 < self.epsilon_prob < 1:
            raise ArgumentError("epsilon_prob must lie in (0, 1)")

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        if "iterations" in known:
            known["iterations"] = int(known["iterations"])
        return cls(**known)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# -- potentials and kernels -------------------------------------------------


def unary_potentials(prob, epsilon_prob=1e-12):
    """``-log`` of the probabilities, floored at ``epsilon_prob``."""
    return -np.log(np.maximum(np.asarray(prob, dtype=np.float64), epsilon_prob))


def gaussian_kernel(p1, p2, sigma_g):
    d2 = np.sum((np.asarray(p1, float) - np.asarray(p2, float)) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * sigma_g**2))


def bilateral_kernel(p1, p2, c1, c2, sigma_b, sigma_c):
    c1 = np.asarray(c1, float)
    c2 = np.asarray(c2, float)
    if c1.shape[-1] != c2.shape[-1]:
        raise ArgumentError("color vectors must have the same channel count")
    d2 = np.sum((np.asarray(p1, float) - np.asarray(p2, float)) ** 2, axis=-1)
    dc2 = np.sum((c1 - c2) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * sigma_b**2) - dc2 / (2.0 * sigma_c**2))


def _as_image(img, shape):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[:2] != shape:
        raise ArgumentError(f"image shape {img.shape[:2]} does not match map shape {shape}")
    return img


def _features(img):
    h, w, ch = img.shape
    rows, cols = np.mgrid[0:h, 0:w]
    pos = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    return pos, img.reshape(h * w, ch)


def _kernel_block(pos, col, lo, hi, params):
    """Combined pairwise weights between pixels ``lo:hi`` and all pixels."""
    d2 = ((pos[lo:hi, None, :] - pos[None, :, :]) ** 2).sum(-1)
    out = np.zeros_like(d2)
    if params.w_g:
        out += params.w_g * np.exp(-d2 / (2.0 * params.sigma_g**2))
    if params.w_b:
        dc2 = ((col[lo:hi, None, :] - col[None, :, :]) ** 2).sum(-1)
        out += params.w_b * np.exp(-d2 / (2.0 * params.sigma_b**2) - dc2 / (2.0 * params.sigma_c**2))
    return out


@functools.lru_cache(maxsize=4)
def _grid_sqdist(h, w):
    rows, cols = np.divmod(np.arange(h * w), w)
    d2 = np.subtract.outer(rows, rows).astype(np.float64) ** 2
    d2 += np.subtract.outer(cols, cols).astype(np.float64) ** 2
    d2.flags.writeable = False
    return d2


def pairwise_matrix(img, params):
    """Dense ``n x n`` pairwise weight matrix with a zero diagonal."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, _ = img.shape
    d2 = _grid_sqdist(h, w)
    k = np.zeros_like(d2)
    if params.w_b:
        col = img.reshape(h * w, -1)
        sq = (col**2).sum(1)
        # exact for 8-bit inputs: every term is an integer well below 2**53
        np.matmul(col, col.T, out=k)
        k *= -2.0
        k += sq[:, None]
        k += sq[None, :]
        k *= -1.0 / (2.0 * params.sigma_c**2)
        k += d2 * (-1.0 / (2.0 * params.sigma_b**2))
        np.exp(k, out=k)
        k *= params.w_b
    if params.w_g:
        g = d2 * (-1.0 / (2.0 * params.sigma_g**2))
        np.exp(g, out=g)
        g *= params.w_g
        k += g
    np.fill_diagonal(k, 0.0)
    return k


def total_energy(labels, prob, img, params):
    """Energy of a labeling, summing the pairwise term over every unordered pixel pair."""
    prob = np.asarray(prob, dtype=np.float64)
    labels = np.asarray(labels)
    c, h, w = prob.shape
    if labels.shape != (h, w):
        raise ArgumentError(f"label shape {labels.shape} does not match map shape {(h, w)}")
    img = _as_image(img, (h, w))
    unary = unary_potentials(prob, params.epsilon_prob)
    energy = float(np.take_along_axis(unary, labels[None].astype(np.intp), axis=0).sum())
    if not (params.w_g or params.w_b) or h * w < 2:
        return energy
    pos, col = _features(img)
    flat = labels.ravel()
    n = flat.size
    pair = 0.0
    for lo in range(0, n, _BLOCK_ROWS):
        hi = min(n, lo + _BLOCK_ROWS)
        block = _kernel_block(pos, col, lo, hi, params)
        differ = flat[lo:hi, None] != flat[None, :]
        pair += float((block * differ).sum())
    # every unordered pair was visited twice; the diagonal never disagrees
    return energy + 0.5 * pair


# -- mean-field --------------------------------------------------------------


def _softmax(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=0, keepdims=True)
    return z


def _run_mean_field(prob, params, message_fn):
    """Synchronous mean-field updates given ``message_fn(Q) -> m`` (C, H, W)."""
    q = np.array(prob, dtype=np.float64)
    unary = unary_potentials(q, params.epsilon_prob)
    for it in range(int(params.iterations)):
        if params.w_g or params.w_b:
            m = message_fn(q)
            # cost of label c = messages from every other label
            penalty = m.sum(axis=0, keepdims=True) - m
        else:
            penalty = 0.0
        q_new = _softmax(-unary - penalty)
        delta = float(np.abs(q_new - q).max()) if q.size else 0.0
        q = q_new
        if delta < EARLY_STOP_TOL:
            logger.debug("mean-field converged after %d iterations", it + 1)
            break
    return q, argmax_labels(q)


def _check_inputs(prob, img):
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 3:
        raise ArgumentError(f"probability map must be (C, H, W), got {prob.shape}")
    return prob, _as_image(img, prob.shape[1:])


def mean_field_dense_exact(prob, img, params=CrfParams(), pixel_budget=EXACT_PIXEL_BUDGET):
    """Mean-field inference with messages summed over all pixel pairs.

    Returns ``(Q, labels)``.
    """
    prob, img = _check_inputs(prob, img)
    c, h, w = prob.shape
    if h * w > pixel_budget:
        raise BudgetExceededError(
            f"{h}x{w} = {h * w} pixels exceeds exact-backend budget {pixel_budget}; "
            "use the windowed backend"
        )
    kmat = pairwise_matrix(img, params) if (params.w_g or params.w_b) and params.iterations else None

    def messages(q):
        return (q.reshape(c, h * w) @ kmat).reshape(c, h, w)

    return _run_mean_field(prob, params, messages)


def window_radius(params, multiplier=TRUNCATION_MULTIPLIER):
    return int(math.ceil(multiplier * max(params.sigma_g, params.sigma_b)))


def _window_offsets(radius, h, w):
    ry = min(radius, h - 1)
    rx = min(radius, w - 1)
    return [(dy, dx) for dy in range(-ry, ry + 1) for dx in range(-rx, rx + 1) if dy or dx]


def _slices(d, n):
    """Destination and source slices along one axis for offset ``d``."""
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def _offset_weights(img, dy, dx, params):
    h, w, _ = img.shape
    (ty, sy), (tx, sx) = _slices(dy, h), _slices(dx, w)
    d2 = float(dy * dy + dx * dx)
    weight = 0.0
    if params.w_g:
        weight = params.w_g * math.exp(-d2 / (2.0 * params.sigma_g**2))
    if params.w_b:
        dc2 = ((img[ty, tx] - img[sy, sx]) ** 2).sum(-1)
        weight = weight + params.w_b * np.exp(-d2 / (2.0 * params.sigma_b**2) - dc2 / (2.0 * params.sigma_c**2))
    return (ty, tx, sy, sx), weight


def mean_field_windowed(prob, img, params=CrfParams(), truncation_radius_multiplier=TRUNCATION_MULTIPLIER, radius=None):
    """Mean-field inference with messages truncated to a square window.

    The window radius is ``ceil(multiplier * max(sigma_g, sigma_b))`` unless
    ``radius`` is given explicitly.  Returns ``(Q, labels)``.
    """
    prob, img = _check_inputs(prob, img)
    c, h, w = prob.shape
    if radius is None:
        radius = window_radius(params, truncation_radius_multiplier)
    offsets = _window_offsets(int(radius), h, w)
    cache = None
    if len(offsets) * h * w <= _WINDOW_CACHE_LIMIT:
        cache = [_offset_weights(img, dy, dx, params) for dy, dx in offsets]

    def messages(q):
        m = np.zeros_like(q)
        items = cache if cache is not None else (_offset_weights(img, dy, dx, params) for dy, dx in offsets)
        for (ty, tx, sy, sx), weight in items:
            m[:, ty, tx] += weight * q[:, sy, sx]
        return m

    return _run_mean_field(prob, params, messages)


def refine(prob, img, params=CrfParams(), backend="auto", **kwargs):
    """Run the requested backend; ``auto`` uses the exact one when the image fits its budget."""
    if backend == "auto":
        h, w = np.shape(prob)[1:]
        backend = "exact" if h * w <= EXACT_PIXEL_BUDGET else "windowed"
    if backend == "exact":
        return mean_field_dense_exact(prob, img, params, **kwargs)
    if backend == "windowed":
        return mean_field_windowed(prob, img, params, **kwargs)
    raise ArgumentError(f"unknown CRF backend {backend!r}")


# -- exhaustive oracle -------------------------------------------------------


def exhaustive_map(prob, img, params=CrfParams(), budget=EXHAUSTIVE_BUDGET, return_energy=False):
    """Global energy minimizer by enumerating all ``C^(H*W)`` labelings.

    Labelings are enumerated in lexicographic row-major order and the first
    minimum wins, so ties resolve to the lexicographically smallest labeling.
    """
    prob, img = _check_inputs(prob, img)
    c, h, w = prob.shape
    n = h * w
    total = c**n
    if total > budget:
        raise BudgetExceededError(f"{c}^{n} labelings exceeds exhaustive budget {budget}")
    unary = unary_potentials(prob, params.epsilon_prob).reshape(c, n)
    kmat = pairwise_matrix(img, params)
    iu, ju = np.triu_indices(n, 1)
    kpairs = kmat[iu, ju]
    powers = c ** np.arange(n - 1, -1, -1)
    pix = np.arange(n)
    best_energy, best_index = np.inf, 0
    chunk = max(1, min(total, 2**16 // max(1, n)))
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        lab = (idx[:, None] // powers[None, :]) % c
        energy = unary[lab, pix[None, :]].sum(axis=1)
        if kpairs.size:
            energy = energy + (lab[:, iu] != lab[:, ju]) @ kpairs
        i = int(np.argmin(energy))
        if energy[i] < best_energy:
            best_energy, best_index = float(energy[i]), int(idx[i])
    labels = ((best_index // powers) % c).reshape(h, w)
    return (labels, best_energy) if return_energy else labels
