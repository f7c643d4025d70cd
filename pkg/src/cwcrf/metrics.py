"""Confusion matrices and IoU / mIoU reports."""

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ArgumentError

DEFAULT_IGNORE = 255


def empty_confusion(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm, pred, gt, ignore_label=DEFAULT_IGNORE):
    """Add one image to ``cm`` (rows = ground truth, columns = prediction).

    Returns a new matrix; ``cm`` is not modified.
    """
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.shape[0]
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ArgumentError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    pred = pred.astype(np.int64).ravel()
    gt = gt.astype(np.int64).ravel()
    keep = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    g, p = gt[keep], pred[keep]
    if g.size and (g.min() < 0 or g.max() >= n):
        raise ArgumentError(f"ground-truth label outside [0, {n})")
    if p.size and (p.min() < 0 or p.max() >= n):
        raise ArgumentError(f"predicted label outside [0, {n})")
    counts = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return cm + counts


def confusion(pred, gt, num_classes, ignore_label=DEFAULT_IGNORE):
    return accumulate(empty_confusion(num_classes), pred, gt, ignore_label)


@dataclass(frozen=True)
class IouReport:
    per_class: tuple  # float or None (undefined: empty union)
    miou: float | None
    excluded: tuple
    class_names: tuple = ()

    def to_dict(self):
        names = self.class_names or tuple(str(i) for i in range(len(self.per_class)))
        return {
            "per_class": {n: v for n, v in zip(names, self.per_class)},
            "miou": self.miou,
            "excluded": [names[i] for i in self.excluded],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def table(self, row_label="result", percent=True):
        """Plain-text table: one column per class plus mIoU."""
        names = list(self.class_names or (str(i) for i in range(len(self.per_class))))
        scale = 100.0 if percent else 1.0
        fmt = "{:.2f}" if percent else "{:.4f}"
        heads = ["", *names, "mIoU"]
        cells = [row_label]
        for i, v in enumerate(self.per_class):
            s = "-" if v is None else fmt.format(v * scale)
            cells.append(s + ("*" if i in self.excluded else ""))
        cells.append("-" if self.miou is None else fmt.format(self.miou * scale))
        widths = [max(len(a), len(b)) for a, b in zip(heads, cells)]
        line = lambda row: "  ".join(s.rjust(wd) for s, wd in zip(row, widths))
        out = [line(heads), line(cells)]
        if self.excluded:
            out.append("* excluded from mIoU")
        return "\n".join(out)


def iou_report(cm, excluded=(), class_names=()):
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.shape[0]
    excluded = tuple(sorted({_class_idx(e, class_names, n) for e in excluded}))
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = tuple(None if u == 0 else float(t) / float(u) for t, u in zip(tp, union))
    # exact rational mean, rounded once
    scored = [Fraction(int(t), int(u)) for i, (t, u) in enumerate(zip(tp, union)) if u and i not in excluded]
    miou = float(sum(scored) / len(scored)) if scored else None
    return IouReport(per_class, miou, excluded, tuple(class_names))


def _class_idx(e, names, n):
    if isinstance(e, str):
        if e in names:
            return list(names).index(e)
        if e.isdigit():
            e = int(e)
        else:
            raise ArgumentError(f"unknown class {e!r}")
    if not 0 <= int(e) < n:
        raise ArgumentError(f"excluded class {e} out of range")
    return int(e)


def miou_of(pred, gt, num_classes, ignore_label=DEFAULT_IGNORE, excluded=()):
    return iou_report(confusion(pred, gt, num_classes, ignore_label), excluded).miou
