"""Masking-degradation scoring and saliency-quality metrics.

Cells are ranked by |R| (descending, ties by flat ``(i, t)`` order) and
selected until their mass reaches ``d`` percent of the map total. The model is
then rescored with the selected cells redrawn from the base process, and the
selection is compared with the ground-truth mask using saliency-weighted
precision and recall.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParameterError
from .saliency import RelevanceMap
from .synthgen import Dataset, fresh_bases, resample_batch

D_GRID = tuple(range(0, 101, 10))
CURVE_COLUMNS = (
    "d",
    "accuracy",
    "precision",
    "recall",
    "time_precision",
    "time_recall",
    "feature_precision",
    "feature_recall",
)
SUMMARY_COLUMNS = (
    "dataset",
    "architecture",
    "method",
    "AUP",
    "AUR",
    "AUPR",
    "AUC",
    "time_AUP",
    "time_AUR",
    "feature_AUP",
    "feature_AUR",
)


def _values(R) -> np.ndarray:
    return np.asarray(R.values if isinstance(R, RelevanceMap) else R)


@dataclass
class SelectionSpec:
    """Top-ranked cells holding at least ``d`` percent of the |R| mass."""

    d: float
    selected: np.ndarray  # flat indices in rank order
    shape: tuple
    cut: float  # smallest selected |R|; inf when nothing is selected
    degenerate: bool = False

    @property
    def k(self) -> int:
        return len(self.selected)

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [tuple(int(v) for v in np.unravel_index(f, self.shape)) for f in self.selected]

    def as_mask(self) -> np.ndarray:
        m = np.zeros(int(np.prod(self.shape)), dtype=bool)
        m[self.selected] = True
        return m.reshape(self.shape)


def _rank(mag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-mag, kind="stable")
    return order, np.cumsum(mag[order])


def _prefix_length(cum: np.ndarray, d: float) -> int:
    total = cum[-1] if len(cum) else 0.0
    if d <= 0 or total <= 0:
        return 0
    target = total * (d / 100.0)
    return min(int(np.searchsorted(cum, target, side="left")) + 1, len(cum))


def _check_d(d) -> float:
    d = float(d)
    if not 0.0 <= d <= 100.0:
        raise ParameterError(f"degradation percentage must lie in [0, 100], got {d}")
    return d


def select_top_fraction(R, d: float) -> SelectionSpec:
    """Smallest rank prefix whose |R| mass is at least ``d`` percent of the total."""
    d = _check_d(d)
    vals = _values(R)
    mag = np.abs(vals.astype(np.float64)).reshape(-1)
    order, cum = _rank(mag)
    k = _prefix_length(cum, d)
    sel = order[:k]
    cut = float(mag[sel[-1]]) if k else float("inf")
    return SelectionSpec(d, sel, vals.shape, cut, degenerate=d > 0 and cum[-1] <= 0)


def selection_masks(maps: np.ndarray, d_grid=D_GRID) -> np.ndarray:
    """Boolean ``[D, S, N, T]`` selections for a stack of maps ``[S, N, T]``."""
    maps = np.asarray(maps)
    S = len(maps)
    out = np.zeros((len(d_grid), *maps.shape), dtype=bool)
    flat = out.reshape(len(d_grid), S, -1)
    for s in range(S):
        mag = np.abs(maps[s].astype(np.float64)).reshape(-1)
        order, cum = _rank(mag)
        for j, d in enumerate(d_grid):
            flat[j, s, order[: _prefix_length(cum, _check_d(d))]] = True
    return out


def _weighted_pr(weight: np.ndarray, selected: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Precision and recall with each position weighted by ``weight``.

    Unselected informative positions whose weight ties the selection cut are
    ranked level with the selection and do not count as misses.
    """
    if not selected.any():
        p = 1.0 if not truth.any() else 0.0
        return p, p
    sel_w = weight[selected]
    hit = float(weight[selected & truth].sum())
    chosen = float(sel_w.sum())
    cut = float(sel_w.min())
    missed = float(weight[~selected & truth & (weight < cut)].sum())
    precision = hit / chosen if chosen > 0 else float(not truth.any() or (selected & truth).any())
    denom = hit + missed
    if denom > 0:
        recall = hit / denom
    else:
        recall = 1.0 if not truth.any() or (selected & truth).any() else 0.0
    return min(max(precision, 0.0), 1.0), min(max(recall, 0.0), 1.0)


def weighted_precision_recall(R, selection, mask) -> tuple[float, float]:
    """Saliency-weighted precision and recall of ``selection`` against ``mask``."""
    mag = np.abs(_values(R).astype(np.float64))
    sel = selection.as_mask() if isinstance(selection, SelectionSpec) else np.asarray(selection, dtype=bool)
    truth = np.asarray(mask, dtype=bool)
    if not (mag.shape == sel.shape == truth.shape):
        raise ContractError(f"shapes differ: map {mag.shape}, selection {sel.shape}, mask {truth.shape}")
    return _weighted_pr(mag.reshape(-1), sel.reshape(-1), truth.reshape(-1))


def axis_projected_pr(R, selection, mask, axis: str) -> tuple[float, float]:
    """Precision and recall after projecting onto the time or the feature axis.

    A position is informative if any cell along the other axis is, and
    selected if any of its cells is selected. Selected positions weigh the
    |R| of their selected cells; unselected positions weigh their full |R|.
    """
    axis = axis.upper()
    if axis not in ("TIME", "FEATURE"):
        raise ParameterError("axis must be TIME or FEATURE")
    mag = np.abs(_values(R).astype(np.float64))
    sel = selection.as_mask() if isinstance(selection, SelectionSpec) else np.asarray(selection, dtype=bool)
    truth = np.asarray(mask, dtype=bool)
    if not (mag.shape == sel.shape == truth.shape):
        raise ContractError(f"shapes differ: map {mag.shape}, selection {sel.shape}, mask {truth.shape}")
    over = 0 if axis == "TIME" else 1
    picked = sel.any(axis=over)
    weight = np.where(picked, (mag * sel).sum(axis=over), mag.sum(axis=over))
    return _weighted_pr(weight, picked, truth.any(axis=over))


def _logits_accuracy(model, X, labels, chunk_size) -> float:
    pred = np.asarray(model.logits(X, chunk_size=chunk_size)).argmax(axis=1)
    return float(np.mean(pred == labels))


def degrade_and_score(
    model,
    dataset: Dataset,
    maps,
    d_grid=D_GRID,
    trials: int = 3,
    seed: int = 0,
    chunk_size: int = 512,
) -> np.ndarray:
    """Mean accuracy over ``trials`` resampling seeds at each degradation level.

    Within one trial every level redraws from the same replacement values,
    so curves at different ``d`` differ only by which cells are replaced.
    """
    maps = np.asarray([_values(m) for m in maps]) if isinstance(maps, (list, tuple)) else np.asarray(maps)
    if maps.shape != dataset.X.shape:
        raise ContractError(f"maps {maps.shape} do not align with dataset {dataset.X.shape}")
    if trials < 1:
        raise ParameterError("trials must be at least 1")
    masks = selection_masks(maps, d_grid)
    acc = np.zeros(len(d_grid))
    labels = np.asarray(dataset.labels)
    for trial in range(trials):
        trial_seed = int(np.random.SeedSequence([int(seed), trial]).generate_state(1)[0])
        fresh = None
        for j in range(len(d_grid)):
            if masks[j].any() and fresh is None:
                fresh = fresh_bases(dataset, trial_seed)
            Xd = resample_batch(dataset, masks[j], trial_seed, fresh=fresh)
            acc[j] += _logits_accuracy(model, Xd, labels, chunk_size)
    return acc / trials


def curve_areas(d_grid, precision, recall, accuracy) -> dict:
    """AUP, AUR, AUPR (unit scale) and AUC (accuracy percent) by trapezoids."""
    d = np.asarray(d_grid, dtype=np.float64)
    if len(d) < 2:
        raise ContractError("curve areas need at least two points")
    x = d / 100.0
    p, r, a = (np.asarray(v, dtype=np.float64) for v in (precision, recall, accuracy))
    if not (len(p) == len(r) == len(a) == len(d)):
        raise ContractError("curves must have one value per degradation level")
    order = np.argsort(r, kind="stable")
    return {
        "AUP": float(np.trapezoid(p, x)),
        "AUR": float(np.trapezoid(r, x)),
        "AUPR": float(np.trapezoid(p[order], r[order])),
        "AUC": float(np.trapezoid(100.0 * a, x)),
    }


def saliency_rank_distribution(maps) -> np.ndarray:
    """Mean of per-sample descending |R|, each normalized to unit mass.

    A map with zero total mass contributes a flat curve.
    """
    maps = np.asarray([_values(m) for m in maps]) if isinstance(maps, (list, tuple)) else np.asarray(maps)
    flat = np.abs(maps.astype(np.float64)).reshape(len(maps), -1)
    ranked = -np.sort(-flat, axis=1)
    total = ranked.sum(axis=1, keepdims=True)
    width = ranked.shape[1]
    normed = np.where(total > 0, ranked / np.where(total > 0, total, 1.0), 1.0 / width)
    return normed.mean(axis=0)


@dataclass
class EvalReport:
    method: str
    architecture: str
    dataset: str
    d_grid: tuple
    accuracy: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    time_precision: np.ndarray
    time_recall: np.ndarray
    feature_precision: np.ndarray
    feature_recall: np.ndarray
    areas: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{c: (int(self.d_grid[j]) if c == "d" else float(getattr(self, c)[j])) for c in CURVE_COLUMNS} for j in range(len(self.d_grid))]

    def summary_row(self) -> dict:
        return {"dataset": self.dataset, "architecture": self.architecture, "method": self.method, **self.areas}


def precision_recall_curves(maps, masks, d_grid=D_GRID) -> dict[str, np.ndarray]:
    """Per-level means over samples of cell, time and feature precision/recall."""
    maps = np.asarray(maps)
    masks = np.asarray(masks, dtype=bool)
    if maps.shape != masks.shape:
        raise ContractError(f"maps {maps.shape} do not match masks {masks.shape}")
    sel = selection_masks(maps, d_grid)
    keys = ("precision", "recall", "time_precision", "time_recall", "feature_precision", "feature_recall")
    out = {k: np.zeros(len(d_grid)) for k in keys}
    for j in range(len(d_grid)):
        acc = np.zeros(6)
        for s in range(len(maps)):
            acc += (
                *weighted_precision_recall(maps[s], sel[j, s], masks[s]),
                *axis_projected_pr(maps[s], sel[j, s], masks[s], "TIME"),
                *axis_projected_pr(maps[s], sel[j, s], masks[s], "FEATURE"),
            )
        for k, v in zip(keys, acc / max(len(maps), 1)):
            out[k][j] = v
    return out


def evaluate_maps(
    model,
    dataset: Dataset,
    maps,
    method: str,
    architecture: str = "",
    dataset_name: str = "",
    d_grid=D_GRID,
    trials: int = 3,
    seed: int = 0,
) -> EvalReport:
    maps = np.asarray(maps)
    acc = degrade_and_score(model, dataset, maps, d_grid, trials=trials, seed=seed)
    curves = precision_recall_curves(maps, dataset.masks, d_grid)
    areas = curve_areas(d_grid, curves["precision"], curves["recall"], acc)
    for axis in ("time", "feature"):
        sub = curve_areas(d_grid, curves[f"{axis}_precision"], curves[f"{axis}_recall"], acc)
        areas[f"{axis}_AUP"], areas[f"{axis}_AUR"] = sub["AUP"], sub["AUR"]
    return EvalReport(method, architecture, dataset_name, tuple(d_grid), acc, **curves, areas=areas, seeds={"resample": seed, "trials": trials})


def random_baseline_maps(sources: dict[str, np.ndarray], seed: int = 0) -> np.ndarray:
    """Per sample, a random permutation of one randomly chosen method's map."""
    names = sorted(sources)
    if not names:
        raise ParameterError("random baseline needs at least one source method")
    rng = np.random.default_rng(seed)
    first = np.asarray(sources[names[0]])
    out = np.empty(first.shape, dtype=np.float64)
    for s in range(len(first)):
        src = np.asarray(sources[names[rng.integers(len(names))]][s])
        out[s] = rng.permutation(src.reshape(-1)).reshape(src.shape)
    return out


def _fmt(v) -> str:
    return v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else f"{float(v):.6f}")


def write_csv(path: Path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def write_curve_csv(report: EvalReport, path) -> Path:
    return write_csv(path, CURVE_COLUMNS, report.rows())


def write_summary_csv(reports: list[EvalReport], path) -> Path:
    return write_csv(path, SUMMARY_COLUMNS, [r.summary_row() for r in reports])


def write_rank_csv(curves: dict[str, np.ndarray], path) -> Path:
    names = list(curves)
    rows = [{"rank": k, **{n: curves[n][k] for n in names}} for k in range(len(curves[names[0]]))] if names else []
    return write_csv(path, ("rank", *names), rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
