"""Occlusion-stratified panoptic evaluation: PQ, PQ^Th, PQ^St, mIoU, AP.

PQ follows the Kirillov et al. formulation: segments of equal category match
when IoU > 0.5 (which makes the match a partial bijection automatically),
and PQ = sum of matched IoUs / (TP + FP/2 + FN/2), computed per category and
averaged over categories that occur in the evaluation set. mIoU collapses
segments to categories; AP follows the COCO mask-AP convention (IoU
thresholds 0.50:0.05:0.95, 101-point interpolation).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ._kernels import pair_counts
from .errors import DomainError, ValidationError
from .occlevel import LEVELS
from .pandata import PanopticDataset, PanopticMap

SUBSETS = LEVELS + ("all",)
CSV_COLUMNS = ("subset", "PQ", "PQ_th", "PQ_st", "SQ", "RQ",
               "AP_th_pan", "mIoU_pan")
AP_THRESHOLDS = np.arange(0.5, 1.0, 0.05)


@dataclass
class MatchResult:
    true_positives: list[tuple[int, int, float]]  # (pred id, gt id, IoU)
    false_positives: list[int]
    false_negatives: list[int]

    def validate(self) -> None:
        pred_ids = [p for p, _, _ in self.true_positives]
        gt_ids = [g for _, g, _ in self.true_positives]
        if len(pred_ids) != len(set(pred_ids)) or len(gt_ids) != len(set(gt_ids)):
            raise ValidationError("a segment participates in two TP pairs")
        for _, _, iou in self.true_positives:
            if not iou > 0.5:
                raise ValidationError(f"TP with IoU {iou} <= 0.5")


def _index_raster(pan: PanopticMap):
    """Compact 0..n index raster (0 = void) plus id list in index order."""
    ids = [s.id for s in pan.segments]
    lut_size = int(pan.id_raster.max(initial=0)) + 1
    lut = np.zeros(lut_size, dtype=np.int64)
    for idx, seg_id in enumerate(ids, start=1):
        lut[seg_id] = idx
    return lut[pan.id_raster], ids


def _check_pair(pred: PanopticMap, gt: PanopticMap, categories=None) -> None:
    if pred.id_raster.shape != gt.id_raster.shape:
        raise DomainError(
            f"raster dimensions differ: pred {pred.id_raster.shape} "
            f"vs gt {gt.id_raster.shape}")
    if categories is not None:
        known = {c.id for c in categories}
        for pan, side in ((pred, "pred"), (gt, "gt")):
            stray = {s.category_id for s in pan.segments} - known
            if stray:
                raise DomainError(
                    f"{side} uses category ids outside the taxonomy: {sorted(stray)}")


def segment_ious(pred: PanopticMap, gt: PanopticMap,
                 ignore_void: bool = True):
    """IoU for every same-category (gt, pred) segment pair with overlap.

    With ignore_void, pixels void in gt are excluded from the union (COCO
    panoptic convention). Returns ({(gt_id, pred_id): iou}, pair-count info).
    """
    gt_idx, gt_ids = _index_raster(gt)
    pred_idx, pred_ids = _index_raster(pred)
    counts = pair_counts(gt_idx, pred_idx, len(gt_ids) + 1, len(pred_ids) + 1)
    gt_area = {s.id: s.area for s in gt.segments}
    pred_area = {s.id: s.area for s in pred.segments}
    gt_cat = {s.id: s.category_id for s in gt.segments}
    pred_cat = {s.id: s.category_id for s in pred.segments}
    ious = {}
    for gi, g in enumerate(gt_ids, start=1):
        for pi, p in enumerate(pred_ids, start=1):
            inter = int(counts[gi, pi])
            if inter == 0 or gt_cat[g] != pred_cat[p]:
                continue
            area_p = pred_area[p]
            if ignore_void:
                area_p -= int(counts[0, pi])
            union = gt_area[g] + area_p - inter
            ious[(g, p)] = inter / union
    return ious, counts, gt_ids, pred_ids


def match_segments(pred: PanopticMap, gt: PanopticMap,
                   ignore_void: bool = True, categories=None) -> MatchResult:
    """Match pred and gt segments of one image by the IoU > 0.5 rule."""
    _check_pair(pred, gt, categories)
    ious, counts, gt_ids, pred_ids = segment_ious(pred, gt, ignore_void)
    gt_seg = {s.id: s for s in gt.segments}
    tp = []
    matched_gt, matched_pred = set(), set()
    for (g, p), iou in sorted(ious.items()):
        if gt_seg[g].iscrowd or iou <= 0.5:
            continue
        tp.append((p, g, iou))
        matched_gt.add(g)
        matched_pred.add(p)
    fn = [s.id for s in gt.segments
          if s.id not in matched_gt and not s.iscrowd]
    # unmatched preds mostly covering gt void or same-category crowd regions
    # are discarded without penalty
    crowd_by_cat: dict[int, list[int]] = {}
    for gi, g in enumerate(gt_ids, start=1):
        if gt_seg[g].iscrowd:
            crowd_by_cat.setdefault(gt_seg[g].category_id, []).append(gi)
    fp = []
    for pi, p in enumerate(pred_ids, start=1):
        if p in matched_pred:
            continue
        seg = pred.segment_by_id(p)
        ignore_overlap = int(counts[0, pi])
        for gi in crowd_by_cat.get(seg.category_id, []):
            ignore_overlap += int(counts[gi, pi])
        if ignore_overlap > seg.area / 2:
            continue
        fp.append(p)
    result = MatchResult(true_positives=tp, false_positives=fp,
                         false_negatives=fn)
    result.validate()
    return result


@dataclass
class PQStat:
    """Per-category accumulators for PQ over an image set."""

    iou_sum: dict[int, float] = field(default_factory=dict)
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)
    n_images: int = 0

    def _touch(self, cat):
        for d in (self.iou_sum, self.tp, self.fp, self.fn):
            d.setdefault(cat, 0)

    def update(self, pred: PanopticMap, gt: PanopticMap,
               ignore_void: bool = True, categories=None) -> MatchResult:
        matches = match_segments(pred, gt, ignore_void, categories)
        gt_cat = {s.id: s.category_id for s in gt.segments}
        pred_cat = {s.id: s.category_id for s in pred.segments}
        for p, g, iou in matches.true_positives:
            cat = gt_cat[g]
            self._touch(cat)
            self.iou_sum[cat] += iou
            self.tp[cat] += 1
        for p in matches.false_positives:
            self._touch(pred_cat[p])
            self.fp[pred_cat[p]] += 1
        for g in matches.false_negatives:
            self._touch(gt_cat[g])
            self.fn[gt_cat[g]] += 1
        self.n_images += 1
        return matches

    def results(self, category_ids=None) -> dict[str, float]:
        """Average PQ/SQ/RQ over categories with any TP, FP or FN."""
        if self.n_images == 0:
            raise DomainError("PQ over an empty evaluation set")
        cats = sorted(self.tp) if category_ids is None \
            else sorted(set(self.tp) & set(category_ids))
        pqs, sqs, rqs = [], [], []
        for c in cats:
            tp, fp, fn = self.tp[c], self.fp[c], self.fn[c]
            if tp + fp + fn == 0:
                continue
            denom = tp + 0.5 * fp + 0.5 * fn
            sq = self.iou_sum[c] / tp if tp else 0.0
            rq = tp / denom
            pqs.append(sq * rq)
            sqs.append(sq)
            rqs.append(rq)
        if not pqs:
            return {"PQ": None, "SQ": None, "RQ": None, "n_categories": 0}
        return {"PQ": float(np.mean(pqs)), "SQ": float(np.mean(sqs)),
                "RQ": float(np.mean(rqs)), "n_categories": len(pqs)}


def pq(pairs, ignore_void: bool = True, categories=None) -> dict[str, float]:
    """PQ/SQ/RQ over an iterable of (pred, gt) map pairs."""
    stat = PQStat()
    for pred, gt in pairs:
        stat.update(pred, gt, ignore_void, categories)
    return stat.results()


class ConfusionAccumulator:
    """Category-level confusion over an image set, for mIoU_pan."""

    def __init__(self, categories):
        self.cat_ids = sorted(c.id for c in categories)
        self.index = {c: i for i, c in enumerate(self.cat_ids, start=1)}
        n = len(self.cat_ids) + 1
        self.matrix = np.zeros((n, n), dtype=np.int64)

    def _collapse(self, pan: PanopticMap) -> np.ndarray:
        lut_size = int(pan.id_raster.max(initial=0)) + 1
        lut = np.zeros(lut_size, dtype=np.int64)
        for s in pan.segments:
            lut[s.id] = self.index[s.category_id]
        return lut[pan.id_raster]

    def update(self, pred: PanopticMap, gt: PanopticMap) -> None:
        _check_pair(pred, gt)
        n = len(self.cat_ids) + 1
        self.matrix += pair_counts(self._collapse(gt), self._collapse(pred), n, n)

    def miou(self) -> float:
        """Mean IoU over categories present in gt; gt void pixels ignored."""
        conf = self.matrix[1:, 1:]
        gt_tot = self.matrix[1:, :].sum(axis=1)  # includes pred-void mistakes
        pred_tot = conf.sum(axis=0)              # pred pixels on gt-nonvoid
        ious = []
        for i in range(len(self.cat_ids)):
            if gt_tot[i] == 0:
                continue
            inter = conf[i, i]
            union = gt_tot[i] + pred_tot[i] - inter
            ious.append(inter / union if union else 0.0)
        if not ious:
            raise DomainError("mIoU over a set with no ground-truth pixels")
        return float(np.mean(ious))


def miou_pan(pairs, categories) -> float:
    acc = ConfusionAccumulator(categories)
    for pred, gt in pairs:
        acc.update(pred, gt)
    return acc.miou()


def _plain_ious(pred: PanopticMap, gt: PanopticMap):
    """Category-agnostic mask IoUs for AP matching (no void exclusion)."""
    gt_idx, gt_ids = _index_raster(gt)
    pred_idx, pred_ids = _index_raster(pred)
    counts = pair_counts(gt_idx, pred_idx, len(gt_ids) + 1, len(pred_ids) + 1)
    gt_area = {s.id: s.area for s in gt.segments}
    pred_area = {s.id: s.area for s in pred.segments}
    ious = {}
    for gi, g in enumerate(gt_ids, start=1):
        for pi, p in enumerate(pred_ids, start=1):
            inter = int(counts[gi, pi])
            if inter:
                ious[(g, p)] = inter / (gt_area[g] + pred_area[p] - inter)
    return ious


def ap_pan(pairs, categories) -> float:
    """Mask AP for thing categories, COCO style.

    `pairs` is an iterable of (pred, gt) with every thing pred carrying a
    score. Matching is score-descending and greedy per IoU threshold; the
    PR curve is integrated at 101 recall points; the result is averaged over
    thresholds 0.50:0.05:0.95 and over thing categories present in gt.
    """
    thing_ids = sorted(c.id for c in categories if c.isthing)
    # detections[cat] = list of (score, img, pred_id); gts[cat][img] = [gt ids]
    detections = {c: [] for c in thing_ids}
    gt_lists = {c: {} for c in thing_ids}
    iou_lookup = {}
    for img, (pred, gt) in enumerate(pairs):
        _check_pair(pred, gt)
        ious = _plain_ious(pred, gt)
        for (g, p), iou in ious.items():
            iou_lookup[(img, g, p)] = iou
        for s in gt.segments:
            if s.category_id in gt_lists and not s.iscrowd:
                gt_lists[s.category_id].setdefault(img, []).append(s.id)
        for s in pred.segments:
            if s.category_id not in detections:
                continue
            if s.score is None:
                raise DomainError(
                    f"thing prediction {s.id} has no score; rerun with --no-ap "
                    "to skip AP")
            detections[s.category_id].append((s.score, img, s.id))
    recall_grid = np.linspace(0, 1, 101)
    ap_per_cat = []
    for cat in thing_ids:
        n_gt = sum(len(v) for v in gt_lists[cat].values())
        if n_gt == 0:
            continue
        dets = sorted(detections[cat], key=lambda d: (-d[0], d[1], d[2]))
        aps = []
        for t in AP_THRESHOLDS:
            matched: set[tuple[int, int]] = set()
            flags = []
            for score, img, p in dets:
                best_iou, best_g = 0.0, None
                for g in gt_lists[cat].get(img, []):
                    if (img, g) in matched:
                        continue
                    iou = iou_lookup.get((img, g, p), 0.0)
                    if iou >= t and iou > best_iou:
                        best_iou, best_g = iou, g
                if best_g is not None:
                    matched.add((img, best_g))
                    flags.append(True)
                else:
                    flags.append(False)
            tp_cum = np.cumsum(flags) if flags else np.array([])
            if len(tp_cum):
                precision = tp_cum / np.arange(1, len(tp_cum) + 1)
                recall = tp_cum / n_gt
                # monotone non-increasing interpolated precision
                for i in range(len(precision) - 2, -1, -1):
                    precision[i] = max(precision[i], precision[i + 1])
                interp = np.zeros_like(recall_grid)
                idx = np.searchsorted(recall, recall_grid, side="left")
                valid = idx < len(precision)
                interp[valid] = precision[idx[valid]]
                aps.append(float(interp.mean()))
            else:
                aps.append(0.0)
        ap_per_cat.append(float(np.mean(aps)))
    if not ap_per_cat:
        raise DomainError("AP over a set with no thing ground truth")
    return float(np.mean(ap_per_cat))


@dataclass
class StratifiedReport:
    """Metric bundle keyed by occlusion subset plus the overall row."""

    rows: dict[str, dict[str, float | None] | None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for subset in SUBSETS:
            row = self.rows.get(subset)
            if row is None:
                writer.writerow([subset] + ["n/a"] * (len(CSV_COLUMNS) - 1))
                continue
            writer.writerow([subset] + [
                "n/a" if row.get(col) is None else f"{row[col] * 100:.4f}"
                for col in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [" ".join(f"{c:>10}" for c in CSV_COLUMNS)]
        for subset in SUBSETS:
            row = self.rows.get(subset)
            cells = [f"{subset:>10}"]
            for col in CSV_COLUMNS[1:]:
                v = None if row is None else row.get(col)
                cells.append(f"{'n/a':>10}" if v is None else f"{v * 100:>10.1f}")
            lines.append(" ".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_pairs(pairs, categories, ignore_void: bool = True,
                   with_ap: bool = True) -> dict[str, float | None]:
    """All metrics over a list of (pred, gt) pairs."""
    if not pairs:
        raise DomainError("empty evaluation set")
    thing_ids = {c.id for c in categories if c.isthing}
    stuff_ids = {c.id for c in categories if not c.isthing}
    stat = PQStat()
    conf = ConfusionAccumulator(categories)
    for pred, gt in pairs:
        stat.update(pred, gt, ignore_void, categories)
        conf.update(pred, gt)
    overall = stat.results()
    things = stat.results(thing_ids)
    stuff = stat.results(stuff_ids)
    row = {
        "PQ": overall["PQ"], "SQ": overall["SQ"], "RQ": overall["RQ"],
        "PQ_th": things["PQ"], "PQ_st": stuff["PQ"],
        "mIoU_pan": conf.miou(),
        "AP_th_pan": ap_pan(pairs, categories) if with_ap else None,
    }
    return row


def stratified_report(pred_ds: PanopticDataset, gt_ds: PanopticDataset,
                      ignore_void: bool = True,
                      with_ap: bool = True) -> StratifiedReport:
    """Every metric on each of {low, mid, high, all}.

    The overall row is computed on the union of images, not averaged from
    the subset rows; empty subsets yield an n/a row.
    """
    if set(pred_ds.image_ids) != set(gt_ds.image_ids):
        raise DomainError(
            "pred and gt datasets cover different image_id sets")
    splits = gt_ds.split_by_level()
    rows: dict[str, dict | None] = {}
    all_pairs = []
    for level in LEVELS:
        ids = splits[level].image_ids
        pairs = [(pred_ds.load(i, with_image=False).panoptic,
                  gt_ds.load(i, with_image=False).panoptic) for i in ids]
        all_pairs.extend(pairs)
        rows[level] = None if not pairs else evaluate_pairs(
            pairs, gt_ds.categories, ignore_void, with_ap)
    rows["all"] = evaluate_pairs(all_pairs, gt_ds.categories,
                                 ignore_void, with_ap)
    return StratifiedReport(rows=rows)
