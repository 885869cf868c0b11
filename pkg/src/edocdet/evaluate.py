"""Detection scoring under the COCO protocol.

Matching is greedy in score order with a highest-IoU tie-break, one-to-one
per image and category. AP is the area under the 101-point interpolated
precision/recall curve averaged over the IoU sweep 0.50:0.05:0.95; AR is
recall at a detection cap averaged over the same sweep. Area buckets use
the 32^2 / 96^2 pixel cut-offs. A bucket with zero ground-truth instances
reports the sentinel value -1.0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import boxes as _boxes
from .data import CATEGORY_NAMES, PageRecord

IOU_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES: Dict[str, Tuple[float, float]] = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}
MAX_DETS: Tuple[int, ...] = (1, 10, 100)
SENTINEL = -1.0


class EvaluationError(ValueError):
    """Predictions reference unknown images/categories or are malformed."""


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two [x1, y1, w, h] boxes."""
    try:
        return _boxes.iou(a, b)
    except ValueError as exc:
        raise EvaluationError(str(exc)) from exc


# ---------------------------------------------------------------------------
# single-threshold matching


@dataclass
class MatchResult:
    """Greedy one-to-one assignment at a single IoU threshold."""

    pred_matched_gt: List[int]   # per prediction: matched gt index, or -1 (FP)
    gt_matched_pred: List[int]   # per gt: matching prediction index, or -1 (missed)

    @property
    def tp(self) -> int:
        return sum(1 for g in self.pred_matched_gt if g >= 0)

    @property
    def fp(self) -> int:
        return sum(1 for g in self.pred_matched_gt if g < 0)

    @property
    def fn(self) -> int:
        return sum(1 for p in self.gt_matched_pred if p < 0)


def greedy_match(pred_boxes: Sequence[Sequence[float]], scores: Sequence[float],
                 gt_boxes: Sequence[Sequence[float]], iou_threshold: float,
                 max_dets: int = 100) -> MatchResult:
    """Score-ordered greedy matching: each prediction claims the free gt of
    highest IoU at or above the threshold. Predictions beyond max_dets are FPs
    by omission (never matched, not counted)."""
    order = sorted(range(len(pred_boxes)), key=lambda i: -scores[i])[:max_dets]
    pred_matched = [-1] * len(pred_boxes)
    gt_matched = [-1] * len(gt_boxes)
    for pi in order:
        best_iou = iou_threshold
        best_gt = -1
        for gi, gt in enumerate(gt_boxes):
            if gt_matched[gi] >= 0:
                continue
            value = iou(pred_boxes[pi], gt)
            if value >= best_iou and (best_gt < 0 or value > best_iou):
                best_iou = value
                best_gt = gi
        if best_gt >= 0:
            pred_matched[pi] = best_gt
            gt_matched[best_gt] = pi
    return MatchResult(pred_matched, gt_matched)


def simple_pr(match: MatchResult) -> Tuple[float, float]:
    """(precision, recall) = (TP/(TP+FP), TP/(TP+FN)); 0/0 gives the -1.0 sentinel."""
    tp, fp, fn = match.tp, match.fp, match.fn
    precision = tp / (tp + fp) if tp + fp > 0 else SENTINEL
    recall = tp / (tp + fn) if tp + fn > 0 else SENTINEL
    return precision, recall


# ---------------------------------------------------------------------------
# full COCO-style sweep


@dataclass
class EvalRow:
    metric: str       # "AP" or "AR"
    iou: str          # "0.50:0.95", "0.50", or "0.75"
    area: str         # "all", "medium", "large", "small"
    max_dets: int
    value: float


REPORT_ROW_ORDER = [("0.50:0.95", "all"), ("0.50", "all"), ("0.75", "all"),
                    ("0.50:0.95", "medium"), ("0.50:0.95", "large"), ("0.50:0.95", "small")]


@dataclass
class EvalReport:
    rows: List[EvalRow]

    def value(self, metric: str, iou_spec: str, area: str, max_dets: int = 100) -> float:
        for row in self.rows:
            if (row.metric, row.iou, row.area, row.max_dets) == (metric, iou_spec, area, max_dets):
                return row.value
        raise KeyError((metric, iou_spec, area, max_dets))

    def to_text(self, max_dets: int = 100) -> str:
        lines = []
        for metric, title in (("AP", "Average Precision"), ("AR", "Average Recall")):
            lines.append(title)
            lines.append(f" {'maxDets':<8} {'IoU':<10} {'Area':<7} {'Value':>7}")
            for iou_spec, area in REPORT_ROW_ORDER:
                v = self.value(metric, iou_spec, area, max_dets)
                lines.append(f" {max_dets:<8} {iou_spec:<10} {area:<7} {v:>7.3f}")
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {"rows": [{"metric": r.metric, "iou": r.iou, "area": r.area,
                          "maxDets": r.max_dets, "value": r.value} for r in self.rows]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1), encoding="utf-8")


def _match_with_ignore(iou_mat: np.ndarray, gt_ignore: np.ndarray, thr: float):
    """Per-image COCO matching: gts ordered unignored-first; a prediction
    prefers the best unignored gt and may fall back to an ignored one."""
    n_dt, n_gt = iou_mat.shape
    gt_order = np.argsort(gt_ignore, kind="stable")
    dt_match = np.full(n_dt, -1, dtype=int)
    dt_ig = np.zeros(n_dt, dtype=bool)
    gt_match = np.full(n_gt, -1, dtype=int)
    for di in range(n_dt):
        best = thr - 1e-12
        m = -1
        for gi in gt_order:
            if gt_match[gi] >= 0:
                continue
            if m >= 0 and not gt_ignore[m] and gt_ignore[gi]:
                break  # an unignored match is already in hand
            if iou_mat[di, gi] < best:
                continue
            best = iou_mat[di, gi]
            m = gi
        if m >= 0:
            dt_match[di] = m
            gt_match[m] = di
            dt_ig[di] = bool(gt_ignore[m])
    return dt_match, dt_ig


def _interpolated_ap(scores: np.ndarray, tp: np.ndarray, npig: int) -> float:
    if npig == 0:
        return SENTINEL
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp_sorted = tp[order]
    tp_cum = np.cumsum(tp_sorted)
    fp_cum = np.cumsum(~tp_sorted)
    recall = tp_cum / npig
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    # envelope: precision becomes the max to the right
    for i in range(precision.size - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(q.mean())


def _index_gts(gt_records: Sequence[PageRecord]):
    by_key: Dict[Tuple[int, int], List[List[float]]] = {}
    image_ids = set()
    for rec in gt_records:
        image_ids.add(rec.image_id)
        for ann in rec.annotations:
            by_key.setdefault((rec.image_id, ann.category_id), []).append(list(ann.bbox))
    return by_key, image_ids


def coco_ap_ar(predictions: Sequence[dict], gt_records: Sequence[PageRecord],
               max_dets: Sequence[int] = MAX_DETS) -> EvalReport:
    """Full AP/AR sweep.

    predictions: dicts with image_id, category_id, bbox, score.
    gt_records: pages whose annotations carry the ground truth.
    """
    gt_by_key, image_ids = _index_gts(gt_records)
    preds_by_key: Dict[Tuple[int, int], List[Tuple[float, List[float]]]] = {}
    for k, pred in enumerate(predictions):
        try:
            img, cat = int(pred["image_id"]), int(pred["category_id"])
            box, score = list(pred["bbox"]), float(pred["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise EvaluationError(f"prediction {k}: malformed record: {exc}") from exc
        if img not in image_ids:
            raise EvaluationError(f"prediction {k}: unknown image id {img}")
        if not 1 <= cat <= len(CATEGORY_NAMES):
            raise EvaluationError(f"prediction {k}: unknown category id {cat}")
        preds_by_key.setdefault((img, cat), []).append((score, box))

    cap = max(max_dets)
    images = sorted(image_ids)
    cats = range(1, len(CATEGORY_NAMES) + 1)
    n_thr = len(IOU_THRESHOLDS)

    # per (cat, area): ap[t] list over cats and recall[t] per maxDet
    ap_acc: Dict[Tuple[str, int], List[np.ndarray]] = {}
    ar_acc: Dict[Tuple[str, int], List[np.ndarray]] = {}
    for area in AREA_RANGES:
        for d in max_dets:
            ap_acc[(area, d)] = []
            ar_acc[(area, d)] = []

    for cat in cats:
        per_image = []  # (scores sorted desc, iou matrix, gt areas, dt areas)
        for img in images:
            dts = sorted(preds_by_key.get((img, cat), ()), key=lambda p: -p[0])[:cap]
            gts = gt_by_key.get((img, cat), [])
            mat = np.zeros((len(dts), len(gts)))
            for di, (_, dbox) in enumerate(dts):
                for gi, gbox in enumerate(gts):
                    mat[di, gi] = iou(dbox, gbox)
            gt_areas = np.array([b[2] * b[3] for b in gts], dtype=float)
            dt_areas = np.array([b[2] * b[3] for _, b in dts], dtype=float)
            per_image.append((np.array([s for s, _ in dts]), mat, gt_areas, dt_areas))
        if not any(len(ga) or len(sc) for sc, _, ga, _ in per_image):
            continue  # category absent from both gts and predictions
        for area, (lo, hi) in AREA_RANGES.items():
            npig = 0
            # dt bookkeeping per threshold: scores, tp flags, ignore flags
            collects = {d: [[] for _ in range(n_thr)] for d in max_dets}
            for scores, mat, gt_areas, dt_areas in per_image:
                gt_ig = ~((gt_areas >= lo) & (gt_areas < hi))
                npig += int((~gt_ig).sum())
                dt_outside = (dt_areas < lo) | (dt_areas >= hi)
                for ti, thr in enumerate(IOU_THRESHOLDS):
                    dt_match, dt_ig = _match_with_ignore(mat, gt_ig, thr)
                    # unmatched dts outside the area range are ignored, per COCO
                    dt_ig = dt_ig | ((dt_match < 0) & dt_outside)
                    for d in max_dets:
                        sel = slice(0, d)
                        sc, tp, ig = scores[sel], dt_match[sel] >= 0, dt_ig[sel]
                        collects[d][ti].append((sc, tp, ig))
            if npig == 0:
                for d in max_dets:
                    ap_acc[(area, d)].append(np.full(n_thr, SENTINEL))
                    ar_acc[(area, d)].append(np.full(n_thr, SENTINEL))
                continue
            for d in max_dets:
                aps = np.zeros(n_thr)
                recalls = np.zeros(n_thr)
                for ti in range(n_thr):
                    parts = collects[d][ti]
                    sc = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
                    tp = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, bool)
                    ig = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0, bool)
                    keep = ~ig
                    aps[ti] = _interpolated_ap(sc[keep], tp[keep], npig)
                    recalls[ti] = float(tp[keep].sum()) / npig if npig else SENTINEL
                ap_acc[(area, d)].append(aps)
                ar_acc[(area, d)].append(recalls)

    rows: List[EvalRow] = []
    thr50 = IOU_THRESHOLDS.index(0.5)
    thr75 = IOU_THRESHOLDS.index(0.75)

    def summarize(acc: List[np.ndarray], thr_index: Optional[int]) -> float:
        if not acc:
            return SENTINEL
        stacked = np.stack(acc)  # cats x thresholds
        vals = stacked if thr_index is None else stacked[:, thr_index:thr_index + 1]
        valid = vals > SENTINEL
        if not valid.any():
            return SENTINEL
        return float(vals[valid].mean())

    for d in max_dets:
        for metric, acc_map in (("AP", ap_acc), ("AR", ar_acc)):
            for iou_spec, thr_index in (("0.50:0.95", None), ("0.50", thr50), ("0.75", thr75)):
                for area in AREA_RANGES:
                    rows.append(EvalRow(metric, iou_spec, area, d,
                                        summarize(acc_map[(area, d)], thr_index)))
    return EvalReport(rows)


# ---------------------------------------------------------------------------
# prediction files (COCO results style)


def save_predictions(predictions: Sequence[dict], path) -> None:
    Path(path).write_text(json.dumps(list(predictions), indent=1), encoding="utf-8")


def load_predictions(path) -> List[dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise EvaluationError(f"{path}: cannot parse predictions: {exc}") from exc
    if not isinstance(doc, list):
        raise EvaluationError(f"{path}: expected a list of prediction records")
    return doc


def detections_to_predictions(per_image: Dict[int, Sequence], ) -> List[dict]:
    """Flatten {image_id: [Detection, ...]} into COCO-results records."""
    out = []
    for image_id, dets in per_image.items():
        for det in dets:
            out.append({"image_id": image_id, "category_id": det.category_id,
                        "bbox": [float(v) for v in det.bbox], "score": float(det.score)})
    return out
