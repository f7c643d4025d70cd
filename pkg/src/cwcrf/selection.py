"""Expert-network selection from a per-class IoU matrix.

The objective for a subset of networks is the mean over classes of the best
IoU any member achieves ("oracle mIoU").  ``greedy_select`` grows the subset
one network at a time; ``brute_force_select`` enumerates every subset and is
kept as a reference for testing the greedy procedure.
"""

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, BudgetExceededError, FormatError

DEFAULT_K = 3
BRUTE_FORCE_BUDGET = 10**6
_BRUTE_CHUNK = 8192

DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class IouMatrix:
    network_names: tuple
    class_names: tuple
    values: np.ndarray  # (N, C) fractions

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "network_names", tuple(self.network_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if values.ndim != 2 or values.shape != (len(self.network_names), len(self.class_names)):
            raise ArgumentError(
                f"values shape {values.shape} does not match "
                f"{len(self.network_names)} networks x {len(self.class_names)} classes"
            )
        if len(set(self.network_names)) != len(self.network_names):
            raise ArgumentError("network names must be unique")
        if len(set(self.class_names)) != len(self.class_names):
            raise ArgumentError("class names must be unique")
        if not np.all(np.isfinite(values)) or values.min(initial=0) < 0 or values.max(initial=0) > 1:
            raise ArgumentError("IoU values must be fractions in [0, 1]")

    @property
    def n_networks(self):
        return len(self.network_names)

    @property
    def n_classes(self):
        return len(self.class_names)

    def without_classes(self, excluded):
        """Drop class columns by name or index (e.g. Vaihingen clutter)."""
        drop = {self.class_index(c) for c in excluded}
        keep = [i for i in range(self.n_classes) if i not in drop]
        return IouMatrix(
            self.network_names,
            [self.class_names[i] for i in keep],
            self.values[:, keep],
        )

    def subset(self, indices):
        indices = list(indices)
        return IouMatrix(
            [self.network_names[i] for i in indices], self.class_names, self.values[indices]
        )

    def class_index(self, name_or_index):
        if isinstance(name_or_index, (int, np.integer)):
            if not 0 <= name_or_index < self.n_classes:
                raise ArgumentError(f"class index {name_or_index} out of range")
            return int(name_or_index)
        try:
            return self.class_names.index(name_or_index)
        except ValueError:
            raise ArgumentError(f"unknown class {name_or_index!r}") from None

    def network_index(self, name):
        try:
            return self.network_names.index(name)
        except ValueError:
            raise ArgumentError(f"unknown network {name!r}") from None


@dataclass(frozen=True)
class SelectionResult:
    ordered_indices: tuple
    oracle_miou: float
    per_step_miou: tuple = field(default=())

    def names(self, matrix):
        return [matrix.network_names[i] for i in self.ordered_indices]

    def to_dict(self, matrix=None):
        out = {
            "ordered_indices": list(self.ordered_indices),
            "oracle_miou": self.oracle_miou,
            "per_step_miou": list(self.per_step_miou),
        }
        if matrix is not None:
            out["networks"] = self.names(matrix)
        return out


def load_iou_csv(path, units="percent"):
    """Load an IoU matrix CSV: header ``network,<class...>``, one row per network."""
    if units not in ("percent", "fraction"):
        raise ArgumentError(f"units must be 'percent' or 'fraction', got {units!r}")
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise FormatError("IoU CSV needs a header and at least one network row", path=path)
    header = [h.strip() for h in rows[0]]
    classes = header[1:]
    if not classes:
        raise FormatError("IoU CSV header lists no classes", path=path)
    names, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(
                f"line {lineno}: expected {len(header)} fields, got {len(row)}", path=path
            )
        names.append(row[0].strip())
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}", path=path) from None
    arr = np.array(values, dtype=np.float64)
    if units == "percent":
        arr = arr / 100.0
    return IouMatrix(names, classes, arr)


def write_iou_csv(path, matrix, units="percent"):
    scale = 100.0 if units == "percent" else 1.0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["network", *matrix.class_names])
        for name, row in zip(matrix.network_names, matrix.values):
            w.writerow([name, *(repr(float(v * scale)) for v in row)])


def load_fixture(name, units="percent"):
    """Bundled IoU fixtures: ``loveda_val``, ``vaihingen_val``, ``vaihingen_val_noclutter``."""
    return load_iou_csv(DATA_DIR / f"{name}.csv", units=units)


def _row_means(maxima):
    # Shared by every caller so that vectorized and scalar paths round identically.
    maxima = np.atleast_2d(maxima)
    return np.add.reduce(maxima, axis=-1) / maxima.shape[-1]


def oracle_miou(matrix, subset):
    """Mean over classes of the best IoU achieved by any network in ``subset``."""
    values = matrix.values if isinstance(matrix, IouMatrix) else np.asarray(matrix, float)
    idx = list(subset)
    if not idx:
        raise ArgumentError("subset must be non-empty")
    n = values.shape[0]
    if any(not 0 <= i < n for i in idx):
        raise ArgumentError(f"subset {idx} has indices outside [0, {n})")
    return float(_row_means(values[idx].max(axis=0))[0])


def greedy_select(matrix, k=DEFAULT_K):
    values = matrix.values if isinstance(matrix, IouMatrix) else np.asarray(matrix, float)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f"K must be in [1, {n}], got {k}")
    selected = []
    steps = []
    for _ in range(k):
        best_miou, best_net = -1.0, -1
        for j in range(n):
            if j in selected:
                continue
            miou = oracle_miou(values, selected + [j])
            if miou > best_miou:  # strict: earliest candidate wins ties
                best_miou, best_net = miou, j
        selected.append(best_net)
        steps.append(best_miou)
    return SelectionResult(tuple(selected), steps[-1], tuple(steps))


def brute_force_select(matrix, k=DEFAULT_K, budget=BRUTE_FORCE_BUDGET):
    """Exhaustive search over all size-``k`` subsets; ties go to the lexicographically first."""
    values = matrix.values if isinstance(matrix, IouMatrix) else np.asarray(matrix, float)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f"K must be in [1, {n}], got {k}")
    total = math.comb(n, k)
    if total > budget:
        raise BudgetExceededError(f"C({n},{k}) = {total} subsets exceeds budget {budget}")
    best_score, best_subset = -1.0, None
    combos = itertools.combinations(range(n), k)
    while True:
        chunk = np.array(list(itertools.islice(combos, _BRUTE_CHUNK)), dtype=np.intp)
        if chunk.size == 0:
            break
        scores = _row_means(values[chunk].max(axis=1))
        i = int(np.argmax(scores))
        if scores[i] > best_score:
            best_score, best_subset = float(scores[i]), tuple(int(v) for v in chunk[i])
    steps = tuple(oracle_miou(values, best_subset[: i + 1]) for i in range(k))
    return SelectionResult(best_subset, best_score, steps)
