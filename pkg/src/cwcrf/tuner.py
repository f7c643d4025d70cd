"""Bayesian optimization of CRF parameters against validation mIoU.

Two strategies share one driver loop:

* ``random`` - every trial samples the search space independently.
* ``smbo``   - a few random warm-up trials, then each trial maximizes
  expected improvement under a Gaussian-process surrogate fitted to all
  previous scores.

Every trial draws from its own generator seeded by ``(seed, trial index)``,
so runs are reproducible independent of timing or scheduling.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from . import metrics
from .crf import CrfParams, refine
from .errors import ArgumentError

logger = logging.getLogger(__name__)

DEFAULT_TRIALS = 20
WARMUP_TRIALS = 5
N_CANDIDATES = 1024
GP_NOISE = 1e-6
_LENGTH_SCALES = (0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5)
_EI_XI = 0.01
STRATEGIES = ("random", "smbo")


@dataclass(frozen=True)
class Dimension:
    lower: float
    upper: float
    scale: str = "linear"

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ArgumentError(f"lower bound {self.lower} must be below upper bound {self.upper}")
        if self.scale not in ("linear", "log"):
            raise ArgumentError(f"scale must be 'linear' or 'log', got {self.scale!r}")
        if self.scale == "log" and self.lower <= 0:
            raise ArgumentError("log-scaled bounds must be strictly positive")

    def decode(self, u):
        if self.scale == "log":
            lo, hi = math.log(self.lower), math.log(self.upper)
            return float(min(self.upper, max(self.lower, math.exp(lo + u * (hi - lo)))))
        return float(self.lower + u * (self.upper - self.lower))

    def encode(self, v):
        if self.scale == "log":
            lo, hi = math.log(self.lower), math.log(self.upper)
            return (math.log(v) - lo) / (hi - lo)
        return (v - self.lower) / (self.upper - self.lower)


def default_space():
    return SearchSpace({
        "sigma_g": Dimension(1.0, 80.0, "log"),
        "sigma_b": Dimension(1.0, 80.0, "log"),
        "sigma_c": Dimension(1.0, 60.0, "log"),
        "w_g": Dimension(0.0, 10.0),
        "w_b": Dimension(0.0, 10.0),
    })


@dataclass(frozen=True)
class SearchSpace:
    """Bounds for a subset of CrfParams fields; the rest stay at the base params."""

    dims: dict = field(default_factory=lambda: dict(default_space().dims))

    def __post_init__(self):
        allowed = {"sigma_g", "sigma_b", "sigma_c", "w_g", "w_b"}
        unknown = set(self.dims) - allowed
        if unknown:
            raise ArgumentError(f"cannot tune {sorted(unknown)}; tunable: {sorted(allowed)}")
        if not self.dims:
            raise ArgumentError("search space is empty")
        dims = {k: d if isinstance(d, Dimension) else Dimension(**d) for k, d in self.dims.items()}
        object.__setattr__(self, "dims", dims)

    @property
    def names(self):
        return tuple(self.dims)

    def decode(self, u, base=CrfParams()):
        return base.replace(**{n: self.dims[n].decode(x) for n, x in zip(self.names, u)})

    def to_dict(self):
        return {n: {"lower": d.lower, "upper": d.upper, "scale": d.scale} for n, d in self.dims.items()}

    @classmethod
    def from_dict(cls, data):
        return cls({k: Dimension(**v) for k, v in data.items()})


@dataclass(frozen=True)
class TrialRecord:
    index: int
    params: CrfParams
    score: float
    wall_time: float
    seed: int

    def to_dict(self, timing=True):
        out = {"index": self.index, "params": self.params.to_dict(), "score": self.score, "seed": self.seed}
        if timing:
            out["wall_time"] = self.wall_time
        return out


def trial_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


# -- Gaussian-process surrogate -------------------------------------------


def _se_kernel(a, b, length):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return np.exp(-0.5 * d2 / length**2)


class GaussianProcess:
    """Zero-mean GP on standardized targets with an isotropic squared-exponential kernel.

    The length scale is picked from a fixed grid by marginal likelihood.
    """

    def __init__(self, noise=GP_NOISE, length_scales=_LENGTH_SCALES):
        self.noise = noise
        self.length_scales = length_scales

    def fit(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        self.x = x
        self.y_mean = y.mean()
        self.y_std = y.std() or 1.0
        z = (y - self.y_mean) / self.y_std
        best = None
        for length in self.length_scales:
            k = _se_kernel(x, x, length) + (self.noise + 1e-9) * np.eye(len(x))
            try:
                cf = cho_factor(k, lower=True)
            except np.linalg.LinAlgError:
                continue
            alpha = cho_solve(cf, z)
            lml = -0.5 * z @ alpha - np.log(np.diag(cf[0])).sum()
            if best is None or lml > best[0]:
                best = (lml, length, cf, alpha)
        if best is None:
            raise np.linalg.LinAlgError("GP kernel matrix is singular for every length scale")
        _, self.length, self.cf, self.alpha = best
        return self

    def predict(self, xs):
        ks = _se_kernel(np.asarray(xs, float), self.x, self.length)
        mu = ks @ self.alpha
        v = cho_solve(self.cf, ks.T)
        var = np.clip(1.0 - np.einsum("ij,ji->i", ks, v), 1e-12, None)
        return mu * self.y_std + self.y_mean, np.sqrt(var) * self.y_std


def expected_improvement(mu, sigma, best, xi=_EI_XI):
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    imp = mu - best - xi
    safe = np.where(sigma > 0, sigma, 1.0)
    z = imp / safe
    ei = imp * norm.cdf(z) + sigma * norm.pdf(z)
    # zero variance: the improvement is known exactly
    return np.where(sigma > 0, ei, np.maximum(imp, 0.0))


# -- driver ----------------------------------------------------------------


def tune(objective, space=None, trials=DEFAULT_TRIALS, seed=0, strategy="smbo", base_params=CrfParams()):
    """Maximize ``objective(CrfParams) -> float`` over ``space``.

    Returns ``(best_params, records)``; the best is the highest-scoring
    evaluated trial, earliest on ties.
    """
    space = space or default_space()
    if trials < 1:
        raise ArgumentError("need at least one trial")
    if strategy not in STRATEGIES:
        raise ArgumentError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    n0 = min(WARMUP_TRIALS, trials)
    d = len(space.names)
    points, scores, records = [], [], []
    for t in range(trials):
        tseed = trial_seed(seed, t)
        rng = np.random.default_rng(tseed)
        if strategy == "random" or t < n0:
            u = rng.random(d)
        else:
            cand = rng.random((N_CANDIDATES, d))
            gp = GaussianProcess().fit(points, scores)
            mu, sd = gp.predict(cand)
            u = cand[int(np.argmax(expected_improvement(mu, sd, max(scores))))]
        params = space.decode(u, base_params)
        start = time.perf_counter()
        score = float(objective(params))
        elapsed = time.perf_counter() - start
        if not math.isfinite(score):
            raise ArgumentError(f"objective returned non-finite score {score} at trial {t}")
        points.append(u)
        scores.append(score)
        records.append(TrialRecord(t, params, score, elapsed, tseed))
        logger.info("trial %d score %.5f %s", t, score, params)
    best = records[int(np.argmax(scores))]
    return best.params, records


def write_trial_log(path, records, timing=False):
    """JSON-lines trial log; wall times are left out unless ``timing`` so logs are reproducible."""
    lines = [json.dumps(r.to_dict(timing=timing), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def make_objective(items, num_classes, backend="auto", ignore_label=metrics.DEFAULT_IGNORE, excluded=()):
    """Validation-set objective: CRF-refine every ``(prob, image, gt)`` item and return mIoU."""
    items = list(items)
    if not items:
        raise ArgumentError("validation set is empty")

    def objective(params):
        cm = metrics.empty_confusion(num_classes)
        for prob, image, gt in items:
            _, labels = refine(prob, image, params, backend)
            cm = metrics.accumulate(cm, labels, gt, ignore_label)
        miou = metrics.iou_report(cm, excluded).miou
        return 0.0 if miou is None else miou

    return objective
