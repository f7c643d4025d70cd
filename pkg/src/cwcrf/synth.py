"""Seeded synthetic scenes and simulated network predictions.

Scenes are Voronoi partitions with one class per cell and a noisy flat color
per class.  A simulated network labels each pixel correctly with a per-class
probability and otherwise picks a wrong class; its output distribution is a
softened one-hot of that choice with some residual belief left on the true
class.  ``gen_benchmark`` bundles validation/test splits together with the
IoU matrix measured on the validation split.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import metrics
from .errors import ArgumentError
from .selection import IouMatrix, load_iou_csv, write_iou_csv
from .tensor_io import argmax_labels, read_labels, read_ppm, read_tensor, write_pgm, write_tensor

NOISE_AMPLITUDE = 10
COLOR_STEP = 12


@dataclass(frozen=True)
class ReliabilityProfile:
    """Error model of one simulated network.

    ``spread`` = 1 draws wrong classes uniformly; smaller values concentrate
    errors on the next class index (a fixed "confuser").  ``residual`` bounds
    the logit left on the true class when the network is wrong.  With
    ``blob_sigma`` > 0 errors come in spatially coherent blobs of roughly that
    radius (pixels) instead of independently per pixel.
    """

    reliability: tuple
    spread: float = 1.0
    temperature: float = 0.25
    residual: float = 0.9
    blob_sigma: float = 0.0
    name: str = ""

    def __post_init__(self):
        rel = tuple(float(r) for r in self.reliability)
        object.__setattr__(self, "reliability", rel)
        if any(not 0 <= r <= 1 for r in rel):
            raise ArgumentError("reliabilities must lie in [0, 1]")
        if not self.temperature > 0:
            raise ArgumentError("temperature must be positive")
        if not 0 <= self.spread <= 1:
            raise ArgumentError("spread must lie in [0, 1]")
        if not 0 <= self.residual < 1:
            raise ArgumentError("residual must lie in [0, 1)")
        if self.blob_sigma < 0:
            raise ArgumentError("blob_sigma must be non-negative")


@dataclass(frozen=True)
class SynthScene:
    labels: np.ndarray  # (H, W) int
    image: np.ndarray  # (H, W, 3) uint8
    seed: int


def class_colors(num_classes, contrast=COLOR_STEP):
    """Fixed base color per class: low-contrast steps around mid-gray.

    Neighboring classes differ by ``contrast`` levels per channel with a small
    hue twist, so color helps the CRF without revealing the ground truth.
    """
    c = np.arange(num_classes)
    center = (num_classes - 1) / 2.0
    base = 128 + contrast * (c - center)
    twist = np.stack([np.zeros(num_classes), (c % 2) * contrast / 2, -(c % 3) * contrast / 3], axis=1)
    return np.clip(np.round(base[:, None] + twist), 0, 255).astype(np.int64)


def gen_scene(seed, height, width, num_classes, region_count):
    if num_classes < 2:
        raise ArgumentError("need at least 2 classes")
    if region_count < 1:
        raise ArgumentError("need at least one region")
    rng = np.random.default_rng(seed)
    sites = rng.random((region_count, 2)) * (height, width)
    first = rng.permutation(num_classes)[: min(num_classes, region_count)]
    rest = rng.integers(0, num_classes, size=region_count - first.size)
    site_class = np.concatenate([first, rest])
    rows, cols = np.mgrid[0:height, 0:width]
    d2 = (rows[..., None] + 0.5 - sites[:, 0]) ** 2 + (cols[..., None] + 0.5 - sites[:, 1]) ** 2
    labels = site_class[np.argmin(d2, axis=-1)]
    noise = rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1, size=(height, width, 3))
    image = np.clip(class_colors(num_classes)[labels] + noise, 0, 255).astype(np.uint8)
    return SynthScene(labels.astype(np.int64), image, seed)


def gen_prediction(scene, profile, seed):
    """Simulated network output for ``scene``: a (C, H, W) probability map."""
    labels = scene.labels if isinstance(scene, SynthScene) else np.asarray(scene)
    c = len(profile.reliability)
    if labels.size and labels.max() >= c:
        raise ArgumentError(f"profile covers {c} classes, scene uses more")
    rng = np.random.default_rng(seed)
    truth = labels.ravel()
    n = truth.size
    correct = _uniform_field(rng, labels.shape, profile.blob_sigma) < np.asarray(profile.reliability)[truth]
    pick = _uniform_field(rng, labels.shape, profile.blob_sigma)
    uniform_off = 1 + np.minimum((pick * (c - 1)).astype(np.int64), c - 2)
    confuse = _uniform_field(rng, labels.shape, profile.blob_sigma) >= profile.spread
    wrong = (truth + np.where(confuse, 1, uniform_off)) % c
    mode = np.where(correct, truth, wrong)

    logits = rng.random((c, n)) * (0.5 * profile.residual)
    residual = rng.random(n) * profile.residual
    idx = np.arange(n)
    logits[truth, idx] = np.where(correct, logits[truth, idx], residual)
    logits[mode, idx] = 1.0
    z = logits / profile.temperature
    z -= z.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    return p.reshape((c,) + labels.shape)


def _uniform_field(rng, shape, blob_sigma):
    """Flattened field with exactly uniform marginals on [0, 1).

    With ``blob_sigma`` > 0 the field is smoothed white noise pushed through
    its own rank transform, so thresholding it keeps the error rate while
    making errors spatially coherent.
    """
    noise = rng.random(shape)
    if blob_sigma <= 0 or noise.size < 2:
        return noise.ravel()
    smooth = ndimage.gaussian_filter(noise, blob_sigma, mode="wrap").ravel()
    ranks = np.empty(smooth.size)
    ranks[np.argsort(smooth, kind="stable")] = np.arange(smooth.size)
    return (ranks + rng.random(smooth.size)) / smooth.size


def expected_iou(reliability, prior, spread=1.0):
    """Analytic per-class IoU of a network with per-class ``reliability`` under ``prior``."""
    r = np.asarray(reliability, dtype=float)
    pi = np.asarray(prior, dtype=float)
    c = pi.size
    # q[g, p]: probability that a wrong prediction for true class g lands on p
    q = np.full((c, c), spread / (c - 1))
    np.fill_diagonal(q, 0.0)
    q[np.arange(c), (np.arange(c) + 1) % c] += 1 - spread
    tp = pi * r
    fn = pi * (1 - r)
    fp = ((pi * (1 - r))[:, None] * q).sum(axis=0)
    return tp / (tp + fn + fp)


# -- benchmark ---------------------------------------------------------------


def default_profiles():
    return (
        ReliabilityProfile((0.85, 0.65, 0.65, 0.75), temperature=0.15, blob_sigma=3.0, name="net_a"),
        ReliabilityProfile((0.65, 0.85, 0.65, 0.72), temperature=0.15, blob_sigma=3.0, name="net_b"),
        ReliabilityProfile((0.65, 0.65, 0.85, 0.70), temperature=0.15, blob_sigma=3.0, name="net_c"),
    )


@dataclass(frozen=True)
class BenchmarkConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    region_count: int = 12
    n_val: int = 5
    n_test: int = 10
    profiles: tuple = field(default_factory=default_profiles)

    def __post_init__(self):
        profiles = tuple(
            p if isinstance(p, ReliabilityProfile) else ReliabilityProfile(**p) for p in self.profiles
        )
        object.__setattr__(self, "profiles", profiles)
        if not profiles:
            raise ArgumentError("benchmark needs at least one network profile")
        for p in profiles:
            if len(p.reliability) != self.num_classes:
                raise ArgumentError(f"profile {p.name!r} has {len(p.reliability)} classes, expected {self.num_classes}")

    @property
    def network_names(self):
        return tuple(p.name or f"net_{i}" for i, p in enumerate(self.profiles))

    @property
    def class_names(self):
        return tuple(f"class_{c}" for c in range(self.num_classes))

    def to_dict(self):
        d = asdict(self)
        d["profiles"] = [asdict(p) for p in self.profiles]
        for p in d["profiles"]:
            p["reliability"] = list(p["reliability"])
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "profiles" in data:
            data["profiles"] = tuple(ReliabilityProfile(**p) for p in data["profiles"])
        return cls(**data)


@dataclass
class BenchItem:
    name: str
    scene: SynthScene
    predictions: list  # K probability maps, config network order


@dataclass
class Benchmark:
    seed: int
    config: BenchmarkConfig
    val: list
    test: list
    iou: IouMatrix


def _item_seed(seed, split, index, stream):
    return int(np.random.SeedSequence([seed, split, index, stream]).generate_state(1)[0])


def _gen_split(seed, config, split_id, count, prefix):
    items = []
    for i in range(count):
        scene = gen_scene(_item_seed(seed, split_id, i, 0), config.height, config.width,
                          config.num_classes, config.region_count)
        preds = [gen_prediction(scene, prof, _item_seed(seed, split_id, i, 1 + k))
                 for k, prof in enumerate(config.profiles)]
        items.append(BenchItem(f"{prefix}_{i:03d}", scene, preds))
    return items


def measure_iou(items, config):
    """Per-network per-class IoU of the argmax predictions over ``items``."""
    rows = []
    for k in range(len(config.profiles)):
        cm = metrics.empty_confusion(config.num_classes)
        for it in items:
            cm = metrics.accumulate(cm, argmax_labels(it.predictions[k]), it.scene.labels)
        rep = metrics.iou_report(cm)
        rows.append([0.0 if v is None else v for v in rep.per_class])
    return IouMatrix(config.network_names, config.class_names, np.array(rows))


def gen_benchmark(seed, config=None):
    config = config or BenchmarkConfig()
    val = _gen_split(seed, config, 0, config.n_val, "val")
    test = _gen_split(seed, config, 1, config.n_test, "test")
    return Benchmark(seed, config, val, test, measure_iou(val, config))


def write_benchmark(bench, out_dir):
    """Directory tree: ``<split>/<item>/{labels.pgm,image.ppm,pred_<net>.cwt}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = bench.config.network_names
    for split, items in (("val", bench.val), ("test", bench.test)):
        for it in items:
            d = out / split / it.name
            d.mkdir(parents=True, exist_ok=True)
            write_pgm(d / "labels.pgm", it.scene.labels.astype(np.uint8))
            write_pgm(d / "image.ppm", it.scene.image)
            for name, p in zip(names, it.predictions):
                write_tensor(d / f"pred_{name}.cwt", p.astype(np.float32))
    write_iou_csv(out / "iou_matrix.csv", bench.iou, units="percent")
    manifest = {
        "seed": bench.seed,
        "config": bench.config.to_dict(),
        "networks": list(names),
        "classes": list(bench.config.class_names),
        "iou_matrix": "iou_matrix.csv",
        "iou_units": "percent",
        "splits": {
            "val": [{"name": it.name, "seed": it.scene.seed} for it in bench.val],
            "test": [{"name": it.name, "seed": it.scene.seed} for it in bench.test],
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_split(bench_dir, split):
    """Read back one split as BenchItems (predictions as stored, float32)."""
    root = Path(bench_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    items = []
    for entry in manifest["splits"][split]:
        d = root / split / entry["name"]
        scene = SynthScene(read_labels(d / "labels.pgm").astype(np.int64), read_ppm(d / "image.ppm"), entry["seed"])
        preds = [read_tensor(d / f"pred_{n}.cwt") for n in manifest["networks"]]
        items.append(BenchItem(entry["name"], scene, preds))
    return items


def load_benchmark_matrix(bench_dir):
    root = Path(bench_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    return load_iou_csv(root / manifest["iou_matrix"], units=manifest.get("iou_units", "percent"))
