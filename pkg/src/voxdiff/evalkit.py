"""Detection and segmentation scoring.

Dice overlap, one-to-one lesion matching at an IoU floor, per-case
precision/recall/F1 with mean and spread, size-stratified reporting, and
the (noise level, guidance scale) sweep that picks a configuration by
mean Dice.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .classifier import auc  # noqa: F401  (scoring entry point lives here too)
from .postprocess import ComponentSet
from .volgrid import BinaryMask, VolumeError

IOU_MATCH_THRESHOLD = 0.2


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """2|A.B| / (|A|+|B|); two empty masks count as perfect agreement."""
    if not a.same_geometry(b):
        raise VolumeError("mask geometries differ")
    am = a.data.astype(bool)
    bm = b.data.astype(bool)
    denom = int(am.sum()) + int(bm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((am & bm).sum()) / denom


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean voxel sets on one grid."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("components live on different grids")
    union = int((a | b).sum())
    if union == 0:
        raise ValueError("IoU undefined for two empty components")
    return int((a & b).sum()) / union


@dataclass(frozen=True)
class MatchTable:
    """One-to-one pred/ref assignment above the IoU floor."""

    matches: tuple[tuple[int, int, float], ...]
    unmatched_pred: tuple[int, ...]
    unmatched_ref: tuple[int, ...]
    threshold: float = IOU_MATCH_THRESHOLD

    def __post_init__(self):
        preds = [p for p, _, _ in self.matches]
        refs = [r for _, r, _ in self.matches]
        if len(set(preds)) != len(preds) or len(set(refs)) != len(refs):
            raise ValueError("a component id appears in more than one match")
        if set(preds) & set(self.unmatched_pred) or set(refs) & set(self.unmatched_ref):
            raise ValueError("matched ids repeated in the unmatched lists")
        if any(v < self.threshold for _, _, v in self.matches):
            raise ValueError("matched IoU below threshold")

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_ref)


def match_lesions(pred: ComponentSet, ref: ComponentSet,
                  threshold: float = IOU_MATCH_THRESHOLD) -> MatchTable:
    """Greedy one-to-one matching by descending IoU, floor inclusive."""
    if pred.labels.shape != ref.labels.shape:
        raise VolumeError("component sets live on different grids")
    pairs = []
    for p in range(1, pred.n_components + 1):
        pm = pred.component_mask(p)
        for r in range(1, ref.n_components + 1):
            v = iou(pm, ref.component_mask(r))
            if v >= threshold:
                pairs.append((v, p, r))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p: set[int] = set()
    used_r: set[int] = set()
    matches = []
    for v, p, r in pairs:
        if p in used_p or r in used_r:
            continue
        matches.append((p, r, v))
        used_p.add(p)
        used_r.add(r)
    return MatchTable(
        tuple(matches),
        tuple(p for p in range(1, pred.n_components + 1) if p not in used_p),
        tuple(r for r in range(1, ref.n_components + 1) if r not in used_r),
        threshold,
    )


@dataclass(frozen=True)
class SizeBin:
    """Diameter interval in cm, (lower, upper]; first bin starts at zero."""

    lower_cm: float
    upper_cm: float

    def contains(self, diameter_cm: float) -> bool:
        return self.lower_cm < diameter_cm <= self.upper_cm

    @property
    def name(self) -> str:
        if self.lower_cm <= 0:
            return f"<={self.upper_cm:g}"
        if math.isinf(self.upper_cm):
            return f">{self.lower_cm:g}"
        return f"{self.lower_cm:g}-{self.upper_cm:g}"


DEFAULT_BINS = (
    SizeBin(0.0, 2.0),
    SizeBin(2.0, 4.0),
    SizeBin(4.0, 7.0),
    SizeBin(7.0, math.inf),
)


def bins_from_edges(edges_cm) -> tuple[SizeBin, ...]:
    """Upper edges in cm -> bins (0,e1], (e1,e2], ..., (en, inf)."""
    edges = [float(e) for e in edges_cm]
    if not edges or any(e <= 0 for e in edges) or sorted(set(edges)) != edges:
        raise ValueError("edges must be positive and strictly increasing")
    lowers = [0.0] + edges
    uppers = edges + [math.inf]
    return tuple(SizeBin(lo, hi) for lo, hi in zip(lowers, uppers))


@dataclass(frozen=True)
class CaseResult:
    """Everything scoring needs from one case."""

    case_id: str
    table: MatchTable
    pred_diameters_cm: tuple[float, ...]
    ref_diameters_cm: tuple[float, ...]
    dsc: float | None


def evaluate_case(case_id: str, pred: ComponentSet, ref: ComponentSet,
                  threshold: float = IOU_MATCH_THRESHOLD,
                  compute_dsc: bool = True) -> CaseResult:
    """Match instances and record geometry; dsc is the whole-case mask
    overlap, omitted for detection-only inputs."""
    table = match_lesions(pred, ref, threshold)
    d = None
    if compute_dsc:
        d = dice(pred.to_mask(), ref.to_mask())
    return CaseResult(
        case_id,
        table,
        tuple(float(x) / 10.0 for x in pred.equivalent_diameters_mm),
        tuple(float(x) / 10.0 for x in ref.equivalent_diameters_mm),
        d,
    )


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float | None, float | None]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else None
    if recall is None:
        return precision, None, None
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def _mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


@dataclass(frozen=True)
class DetectionReport:
    """Across-case aggregation; sd is the population standard deviation.

    Cases without reference lesions contribute precision only; dsc fields
    are None when no case carried segmentation masks.
    """

    n_cases: int
    precision_mean: float
    precision_sd: float
    recall_mean: float
    recall_sd: float
    f1_mean: float
    f1_sd: float
    dsc_mean: float | None = None
    dsc_sd: float | None = None


def detection_metrics(results) -> DetectionReport:
    results = list(results)
    if not results:
        raise ValueError("no cases to score")
    precisions, recalls, f1s, dscs = [], [], [], []
    for r in results:
        p, rec, f1 = _prf(r.table.tp, r.table.fp, r.table.fn)
        precisions.append(p)
        if rec is not None:
            recalls.append(rec)
            f1s.append(f1)
        if r.dsc is not None:
            dscs.append(r.dsc)
    if not recalls:
        raise ValueError("no case has reference lesions; recall undefined")
    pm, ps = _mean_sd(precisions)
    rm, rs = _mean_sd(recalls)
    fm, fs = _mean_sd(f1s)
    dm, dsd = _mean_sd(dscs) if dscs else (None, None)
    return DetectionReport(len(results), pm, ps, rm, rs, fm, fs, dm, dsd)


def _bin_counts(result: CaseResult, size_bin: SizeBin) -> tuple[int, int, int] | None:
    """TP/FP/FN restricted to one size bin; None when the case is excluded
    because it has no reference lesion in the bin."""
    refs_in = [r + 1 for r in range(len(result.ref_diameters_cm))
               if size_bin.contains(result.ref_diameters_cm[r])]
    if not refs_in:
        return None
    matched_refs = {r for _, r, _ in result.table.matches}
    tp = sum(1 for r in refs_in if r in matched_refs)
    fn = len(refs_in) - tp
    fp = sum(1 for p in result.table.unmatched_pred
             if size_bin.contains(result.pred_diameters_cm[p - 1]))
    return tp, fp, fn


def stratified_eval(results, bins=DEFAULT_BINS) -> dict[str, DetectionReport]:
    """Per-bin scoring: refs in the bin drive TP/FN, unmatched preds of
    in-bin size drive FP, and cases without in-bin refs are excluded."""
    results = list(results)
    out = {}
    for size_bin in bins:
        precisions, recalls, f1s, dscs = [], [], [], []
        n = 0
        for r in results:
            counts = _bin_counts(r, size_bin)
            if counts is None:
                continue
            n += 1
            p, rec, f1 = _prf(*counts)
            precisions.append(p)
            recalls.append(rec)
            f1s.append(f1)
            if r.dsc is not None:
                dscs.append(r.dsc)
        if n == 0:
            out[size_bin.name] = DetectionReport(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
            continue
        pm, ps = _mean_sd(precisions)
        rm, rs = _mean_sd(recalls)
        fm, fs = _mean_sd(f1s)
        dm, dsd = _mean_sd(dscs) if dscs else (None, None)
        out[size_bin.name] = DetectionReport(n, pm, ps, rm, rs, fm, fs, dm, dsd)
    return out


def write_report_csv(path, results, bins=DEFAULT_BINS) -> None:
    """Per-case rows: the 'all' row plus one row per retained size bin."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "bin", "TP", "FP", "FN", "precision", "recall", "f1", "dsc"])
        for r in results:
            p, rec, f1 = _prf(r.table.tp, r.table.fp, r.table.fn)
            w.writerow([r.case_id, "all", r.table.tp, r.table.fp, r.table.fn,
                        _fmt(p), _fmt(rec), _fmt(f1), _fmt(r.dsc)])
            for size_bin in bins:
                counts = _bin_counts(r, size_bin)
                if counts is None:
                    continue
                tp, fp, fn = counts
                p, rec, f1 = _prf(tp, fp, fn)
                w.writerow([r.case_id, size_bin.name, tp, fp, fn,
                            _fmt(p), _fmt(rec), _fmt(f1), _fmt(r.dsc)])


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def _fmt_na(v) -> str:
    return "N/A" if v is None else f"{v:.6f}"


def write_summary_csv(path, reports: dict[str, DetectionReport]) -> None:
    """Aggregate table, one row per scope ('all' first, then each bin).

    Carries the per-scope case count; DSC columns read N/A when the run
    was detection-only.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "n_cases", "precision_mean", "precision_sd",
                    "recall_mean", "recall_sd", "f1_mean", "f1_sd",
                    "dsc_mean", "dsc_sd"])
        for name, r in reports.items():
            w.writerow([name, r.n_cases,
                        _fmt(r.precision_mean), _fmt(r.precision_sd),
                        _fmt(r.recall_mean), _fmt(r.recall_sd),
                        _fmt(r.f1_mean), _fmt(r.f1_sd),
                        _fmt_na(r.dsc_mean), _fmt_na(r.dsc_sd)])


def sweep(run_case, cases, mode: str, levels, scales):
    """Score every (level, scale) cell with run_case(case, mode, L, s) ->
    CaseResult and pick the best mean DSC; ties prefer smaller L, then s.

    Returns ((level, scale), rows) with rows as (mode, L, s, mean, sd).
    """
    levels = sorted(int(v) for v in levels)
    scales = sorted(float(v) for v in scales)
    if not levels or not scales or not list(cases):
        raise ValueError("sweep needs a nonempty grid and at least one case")
    rows = []
    for level in levels:
        for scale in scales:
            results = [run_case(case, mode, level, scale) for case in cases]
            dscs = [r.dsc for r in results if r.dsc is not None]
            if not dscs:
                raise ValueError("sweep requires segmentation DSC per cell")
            mean, sd = _mean_sd(dscs)
            rows.append((mode, level, scale, mean, sd))
    best = max(rows, key=lambda r: (r[3], -r[1], -r[2]))
    return (best[1], best[2]), rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "L", "s", "mean_dsc", "sd_dsc"])
        for mode, level, scale, mean, sd in rows:
            w.writerow([mode, level, f"{scale:g}", f"{mean:.6f}", f"{sd:.6f}"])
