"""End-to-end batch pipeline: load K network maps, fuse, refine, score, time.

Input layout (one directory per image, as written by ``synth``)::

    <input_dir>/<item>/image.ppm
    <input_dir>/<item>/pred_<network>.cwt
    <input_dir>/<item>/labels.pgm          # optional ground truth

Outputs go to ``<output_dir>/<item>/labels.pgm`` (plus ``overlay.ppm`` when
requested) and ``<output_dir>/{report,timing,selection}.json``.
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .crf import CrfParams, refine
from .errors import ArgumentError, CwcrfError
from .fusion import DEFAULT_ALPHA, FusionConfig, fuse
from .selection import DATA_DIR, DEFAULT_K, greedy_select, load_iou_csv
from .tensor_io import read_labels, read_ppm, read_tensor, validate_probability_map, write_pgm

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    matrix: str
    input_dir: str
    output_dir: str
    units: str = "percent"
    k: int = DEFAULT_K
    networks: list | None = None  # explicit experts; otherwise greedy selection
    alpha: float = DEFAULT_ALPHA
    mode: str = "probability"
    crf_params: str | None = None
    backend: str = "auto"
    ignore_label: int = metrics.DEFAULT_IGNORE
    excluded_classes: list = field(default_factory=list)
    overlay: bool = False
    threads: int = 1

    @classmethod
    def from_dict(cls, data, base_dir=None):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ArgumentError(f"unknown pipeline config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if base_dir is not None:
            for key in ("matrix", "input_dir", "output_dir", "crf_params"):
                v = getattr(cfg, key)
                if v is not None and not Path(v).is_absolute():
                    setattr(cfg, key, str(Path(base_dir) / v))
        return cfg

    @classmethod
    def from_json(cls, path, overrides=None):
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data, base_dir=Path(path).parent)

    def validate(self):
        if not Path(self.matrix).is_file():
            raise ArgumentError(f"IoU matrix not found: {self.matrix}")
        if not Path(self.input_dir).is_dir():
            raise ArgumentError(f"input directory not found: {self.input_dir}")
        if self.crf_params is not None and not Path(self.crf_params).is_file():
            raise ArgumentError(f"CRF params file not found: {self.crf_params}")
        if self.threads < 1:
            raise ArgumentError("threads must be >= 1")
        FusionConfig(self.alpha, self.mode)


@dataclass
class TimingReport:
    """Load time per network, fusion+CRF time and their sum (seconds)."""

    t_net: dict
    t_fusion: float
    t_total: float
    images: int
    wall: float = 0.0

    def to_dict(self):
        return asdict(self)


def load_palette():
    data = json.loads((DATA_DIR / "palette.json").read_text())
    return np.array(data["colors"], dtype=np.int64)


def overlay(image, labels, palette=None):
    """Blend the class palette 50/50 over the image; integer arithmetic only."""
    palette = load_palette() if palette is None else palette
    color = palette[np.asarray(labels) % len(palette)]
    img = np.asarray(image, dtype=np.int64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return ((img + color) // 2).astype(np.uint8)


def list_items(input_dir):
    return sorted(p for p in Path(input_dir).iterdir() if p.is_dir())


def choose_networks(matrix, cfg):
    """Expert indices: explicit names from the config or greedy selection."""
    if cfg.networks:
        return [matrix.network_index(n) for n in cfg.networks], None
    sel_matrix = matrix.without_classes(cfg.excluded_classes) if cfg.excluded_classes else matrix
    k = min(cfg.k, matrix.n_networks)
    result = greedy_select(sel_matrix, k)
    return list(result.ordered_indices), result


def process_item(item_dir, names, iou_sub, fusion_cfg, params, backend):
    """Run one image. Returns (labels, image, gt or None, per-network load times, fusion time)."""
    t_load = []
    maps = []
    for name in names:
        start = time.perf_counter()
        tensor = read_tensor(item_dir / f"pred_{name}.cwt")
        maps.append(validate_probability_map(tensor))
        t_load.append(time.perf_counter() - start)
    image = read_ppm(item_dir / "image.ppm")
    gt_path = item_dir / "labels.pgm"
    gt = read_labels(gt_path) if gt_path.exists() else None
    start = time.perf_counter()
    fused = fuse(maps, iou_sub, fusion_cfg)
    _, labels = refine(fused, image, params, backend)
    t_fusion = time.perf_counter() - start
    return labels, image, gt, t_load, t_fusion


def run_pipeline(cfg):
    """Run the batch; returns a summary dict and writes outputs to ``cfg.output_dir``."""
    cfg.validate()
    wall_start = time.perf_counter()
    matrix = load_iou_csv(cfg.matrix, cfg.units)
    chosen, selection = choose_networks(matrix, cfg)
    names = [matrix.network_names[i] for i in chosen]
    iou_sub = matrix.values[chosen]
    fusion_cfg = FusionConfig(cfg.alpha, cfg.mode)
    params = CrfParams.from_json(cfg.crf_params) if cfg.crf_params else CrfParams()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = list_items(cfg.input_dir)
    palette = load_palette() if cfg.overlay else None

    def work(item_dir):
        try:
            return item_dir, process_item(item_dir, names, iou_sub, fusion_cfg, params, cfg.backend), None
        except (CwcrfError, OSError, ValueError) as exc:
            return item_dir, None, exc

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]

    cm = metrics.empty_confusion(matrix.n_classes)
    have_gt = False
    t_net = {n: 0.0 for n in names}
    t_fusion = 0.0
    failed = []
    # merge in sorted item order so outputs never depend on scheduling
    for item_dir, res, exc in results:
        if exc is not None:
            logger.error("%s: %s", item_dir.name, exc)
            failed.append({"item": item_dir.name, "error": str(exc)})
            continue
        labels, image, gt, t_load, t_fu = res
        dest = out / item_dir.name
        dest.mkdir(parents=True, exist_ok=True)
        write_pgm(dest / "labels.pgm", labels.astype(np.uint8))
        if palette is not None:
            write_pgm(dest / "overlay.ppm", overlay(image, labels, palette))
        if gt is not None:
            try:
                cm = metrics.accumulate(cm, labels, gt, cfg.ignore_label)
                have_gt = True
            except ArgumentError as exc:
                logger.error("%s: %s", item_dir.name, exc)
                failed.append({"item": item_dir.name, "error": str(exc)})
        for n, t in zip(names, t_load):
            t_net[n] += t
        t_fusion += t_fu

    timing = TimingReport(t_net, t_fusion, math.fsum(t_net.values()) + t_fusion,
                          len(items) - len(failed), time.perf_counter() - wall_start)
    summary = {
        "networks": names,
        "selection": selection.to_dict(matrix) if selection else None,
        "fusion": {"alpha": cfg.alpha, "mode": cfg.mode},
        "crf_params": params.to_dict(),
        "failed": failed,
    }
    report = None
    if have_gt:
        excluded = [matrix.class_index(c) for c in cfg.excluded_classes]
        report = metrics.iou_report(cm, excluded, matrix.class_names)
        (out / "report.json").write_text(report.to_json() + "\n")
        summary["miou"] = report.miou
    (out / "timing.json").write_text(json.dumps(timing.to_dict(), indent=2) + "\n")
    (out / "selection.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary, report, timing
