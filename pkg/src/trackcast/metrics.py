"""Evaluation: oriented 3-D IoU, CLEAR tracking metrics, recall-integrated
tracking metrics, and forecasting accuracy/diversity metrics.

Boxes are 7-vectors (x, y, z, l, w, h, theta): center, size, heading.  The
ground plane is (x, z); the footprint is the (l, w) rectangle rotated by
theta, height h extends along y.  Frame lists pair identities with boxes;
multi-sequence evaluation sums raw counts before forming any ratio.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .mot import hungarian_max

DEFAULT_IOU_GATE = 0.25
DEFAULT_RECALL_STEPS = 40


# ---------------------------------------------------------------------------
# oriented 3-D IoU
# ---------------------------------------------------------------------------

def bev_corners(box) -> np.ndarray:
    """(4, 2) footprint corners in the (x, z) plane, counter-clockwise."""
    x, _, z, l, w, _, theta = box
    c, s = math.cos(theta), math.sin(theta)
    axis_l = np.array([c, s])
    axis_w = np.array([-s, c])
    center = np.array([x, z])
    half_l, half_w = l / 2.0, w / 2.0
    return np.array([
        center + half_l * axis_l + half_w * axis_w,
        center - half_l * axis_l + half_w * axis_w,
        center - half_l * axis_l - half_w * axis_w,
        center + half_l * axis_l - half_w * axis_w,
    ])


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip a polygon by each edge of a convex polygon.

    Both polygons counter-clockwise; returns the (possibly empty) vertex list
    of the intersection.
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            return np.zeros((0, 2))
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        polygon = output
        output = []
        for j in range(len(polygon)):
            cur = np.array(polygon[j])
            prev = np.array(polygon[j - 1])
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
            if cur_in:
                if not prev_in:
                    output.append(tuple(_edge_intersection(prev, cur, a, b)))
                output.append(tuple(cur))
            elif prev_in:
                output.append(tuple(_edge_intersection(prev, cur, a, b)))
    return np.array(output) if output else np.zeros((0, 2))


def _edge_intersection(p1, p2, a, b) -> np.ndarray:
    d1 = p2 - p1
    d2 = b - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < 1e-300:
        return p2
    t = ((a[0] - p1[0]) * d2[1] - (a[1] - p1[1]) * d2[0]) / denom
    return p1 + t * d1


def _polygon_area(points: np.ndarray) -> float:
    if len(points) < 3:
        return 0.0
    x = points[:, 0]
    y = points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def iou3d(box_a, box_b) -> float:
    """Oriented 3-D IoU: clipped footprint overlap times vertical overlap,
    over the union of volumes."""
    box_a = np.asarray(box_a, dtype=np.float64)
    box_b = np.asarray(box_b, dtype=np.float64)
    if np.any(box_a[3:6] <= 0) or np.any(box_b[3:6] <= 0):
        raise ContractError("box sizes must be positive")
    footprint = _polygon_area(_clip_polygon(bev_corners(box_a), bev_corners(box_b)))
    if footprint <= 0.0:
        return 0.0
    ya0, ya1 = box_a[1] - box_a[5] / 2.0, box_a[1] + box_a[5] / 2.0
    yb0, yb1 = box_b[1] - box_b[5] / 2.0, box_b[1] + box_b[5] / 2.0
    vertical = max(0.0, min(ya1, yb1) - max(ya0, yb0))
    inter = footprint * vertical
    if inter <= 0.0:
        return 0.0
    vol_a = float(np.prod(box_a[3:6]))
    vol_b = float(np.prod(box_b[3:6]))
    return inter / (vol_a + vol_b - inter)


# ---------------------------------------------------------------------------
# CLEAR metrics
# ---------------------------------------------------------------------------

@dataclass
class ClearCounts:
    """Raw CLEAR tallies; ratios are formed only after any summation."""
    num_gt: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    matches: int = 0
    iou_sum: float = 0.0

    @property
    def mota(self) -> float:
        if self.num_gt == 0:
            return 1.0 if self.fp == 0 else 0.0
        return 1.0 - (self.fp + self.fn + self.ids) / self.num_gt

    @property
    def motp(self) -> float:
        return self.iou_sum / self.matches if self.matches else 0.0

    @property
    def recall(self) -> float:
        return self.matches / self.num_gt if self.num_gt else 1.0

    def add(self, other: "ClearCounts") -> "ClearCounts":
        return ClearCounts(self.num_gt + other.num_gt, self.fp + other.fp,
                           self.fn + other.fn, self.ids + other.ids,
                           self.matches + other.matches,
                           self.iou_sum + other.iou_sum)


def clear_metrics(gt_frames, pred_frames, iou_threshold: float = DEFAULT_IOU_GATE
                  ) -> ClearCounts:
    """Frame-by-frame CLEAR matching over one sequence.

    `gt_frames` holds per frame a list of (gt_id, box7); `pred_frames` a list
    of (pred_id, box7).  Matching prefers the previous frame's
    correspondences when they remain valid under the IoU gate, fills the rest
    by Hungarian on IoU, and counts an identity switch whenever a gt object's
    matched predicted id differs from its last known one.
    """
    if len(gt_frames) != len(pred_frames):
        raise ContractError("gt and prediction streams must cover the same frames")
    counts = ClearCounts()
    prev_match: dict = {}   # gt_id -> pred_id in the previous frame
    last_match: dict = {}   # gt_id -> last matched pred_id ever
    for gts, preds in zip(gt_frames, pred_frames):
        counts.num_gt += len(gts)
        gt_ids = [g[0] for g in gts]
        pred_ids = [p[0] for p in preds]
        iou = np.zeros((len(gts), len(preds)))
        for i, (_, gbox) in enumerate(gts):
            for j, (_, pbox) in enumerate(preds):
                iou[i, j] = iou3d(gbox, pbox)
        matched_gt: dict[int, int] = {}
        used_preds: set[int] = set()
        # carry-over: keep yesterday's pairs that still clear the gate
        for i, gid in enumerate(gt_ids):
            pid = prev_match.get(gid)
            if pid is None or pid not in pred_ids:
                continue
            j = pred_ids.index(pid)
            if iou[i, j] >= iou_threshold and j not in used_preds:
                matched_gt[i] = j
                used_preds.add(j)
        free_gt = [i for i in range(len(gts)) if i not in matched_gt]
        free_pred = [j for j in range(len(preds)) if j not in used_preds]
        if free_gt and free_pred:
            sub = iou[np.ix_(free_gt, free_pred)]
            for a, b in hungarian_max(sub):
                if sub[a, b] >= iou_threshold:
                    matched_gt[free_gt[a]] = free_pred[b]
                    used_preds.add(free_pred[b])
        new_prev: dict = {}
        for i, j in matched_gt.items():
            gid, pid = gt_ids[i], pred_ids[j]
            counts.matches += 1
            counts.iou_sum += iou[i, j]
            if gid in last_match and last_match[gid] != pid:
                counts.ids += 1
            last_match[gid] = pid
            new_prev[gid] = pid
        counts.fn += len(gts) - len(matched_gt)
        counts.fp += len(preds) - len(matched_gt)
        prev_match = new_prev
    return counts


def clear_totals(per_sequence: list[ClearCounts]) -> ClearCounts:
    total = ClearCounts()
    for counts in per_sequence:
        total = total.add(counts)
    return total


# ---------------------------------------------------------------------------
# recall-integrated metrics
# ---------------------------------------------------------------------------

@dataclass
class OperatingPoint:
    threshold: float
    counts: ClearCounts

    @property
    def recall(self) -> float:
        return self.counts.recall


def _filtered_predictions(pred_frames, threshold: float):
    return [[(pid, box) for pid, box, score in frame if score >= threshold]
            for frame in pred_frames]


def integrated_metrics(sequences, recall_steps: int = DEFAULT_RECALL_STEPS,
                       iou_threshold: float = DEFAULT_IOU_GATE
                       ) -> tuple[dict, list[dict]]:
    """Confidence-sweep metrics over one or more sequences.

    `sequences` is a list of (gt_frames, scored_pred_frames) pairs where each
    prediction is (pred_id, box7, score).  For each target recall level the
    closest achievable operating point is used (ties to the higher recall,
    then to the higher threshold), and its own achieved recall enters the
    formulas:

        MOTA_r  = max(0, 1 - (FP + FN + IDS - (1 - r) num_gt) / num_gt)
        sMOTA_r = max(0, 1 - (FP + FN + IDS - (1 - r) num_gt) / (r num_gt))

    Returns (summary, curve_rows).
    """
    if recall_steps < 2:
        raise ContractError("need at least two recall steps")
    scores = sorted({score for _, preds in sequences
                     for frame in preds for _, _, score in frame}, reverse=True)
    points: list[OperatingPoint] = []
    if not scores:
        points.append(OperatingPoint(math.inf, clear_totals(
            [clear_metrics(gt, [[] for _ in gt], iou_threshold)
             for gt, _ in sequences])))
    for threshold in scores:
        per_seq = [clear_metrics(gt, _filtered_predictions(preds, threshold),
                                 iou_threshold)
                   for gt, preds in sequences]
        points.append(OperatingPoint(threshold, clear_totals(per_seq)))

    amota_terms, samota_terms, amotp_terms = [], [], []
    curve_rows = []
    for step in range(1, recall_steps + 1):
        target = step / recall_steps
        point = min(points, key=lambda p: (abs(p.recall - target), -p.recall))
        c = point.counts
        r = point.recall
        if c.num_gt == 0 or r == 0.0:
            # a zero-recall operating point carries no tracking value; the
            # (1 - r) compensation term is only meaningful for r > 0
            mota_bar = smota = 0.0
        else:
            penalty = c.fp + c.fn + c.ids - (1.0 - r) * c.num_gt
            mota_bar = max(0.0, 1.0 - penalty / c.num_gt)
            smota = max(0.0, 1.0 - penalty / (r * c.num_gt))
        amota_terms.append(mota_bar)
        samota_terms.append(smota)
        amotp_terms.append(c.motp)
        curve_rows.append({
            "recall": r, "target_recall": target, "threshold": point.threshold,
            "mota": c.mota, "mota_bar": mota_bar, "smota": smota, "motp": c.motp,
        })
    summary = {
        "samota": float(np.mean(samota_terms)),
        "amota": float(np.mean(amota_terms)),
        "amotp": float(np.mean(amotp_terms)),
    }
    return summary, curve_rows


def mot_report(sequences, recall_steps: int = DEFAULT_RECALL_STEPS,
               iou_threshold: float = DEFAULT_IOU_GATE) -> tuple[dict, list[dict]]:
    """Full tracking report: CLEAR at threshold zero plus integrated metrics."""
    base = clear_totals([
        clear_metrics(gt, [[(pid, box) for pid, box, _ in frame] for frame in preds],
                      iou_threshold)
        for gt, preds in sequences])
    integrated, curve = integrated_metrics(sequences, recall_steps, iou_threshold)
    report = {
        "samota": integrated["samota"],
        "amota": integrated["amota"],
        "amotp": integrated["amotp"],
        "mota": base.mota,
        "motp": base.motp,
        "ids": base.ids,
        "fp": base.fp,
        "fn": base.fn,
        "num_gt": base.num_gt,
        "recall": base.recall,
    }
    return report, curve


# ---------------------------------------------------------------------------
# forecasting metrics
# ---------------------------------------------------------------------------

def forecast_metrics(agents) -> dict:
    """Best-of-K accuracy and nearest-other-sample diversity, averaged over
    agents.

    `agents` is a list of (samples, gt) pairs with samples (K, T, 2) and gt
    (T, 2).  ADE/FDE take the best sample; ASD/FSD average each sample's
    distance to its nearest other sample.  With K = 1 the diversity metrics
    are reported as None.
    """
    if not agents:
        raise ContractError("no agents to evaluate")
    ade_list, fde_list, asd_list, fsd_list = [], [], [], []
    for samples, gt in agents:
        samples = np.asarray(samples, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        k = samples.shape[0]
        step_err = np.linalg.norm(samples - gt[None], axis=2)  # (K, T)
        ade_list.append(step_err.mean(axis=1).min())
        fde_list.append(step_err[:, -1].min())
        if k >= 2:
            pair = np.linalg.norm(samples[:, None] - samples[None, :], axis=3)  # (K,K,T)
            mean_pair = pair.mean(axis=2)
            final_pair = pair[:, :, -1]
            np.fill_diagonal(mean_pair, np.inf)
            np.fill_diagonal(final_pair, np.inf)
            asd_list.append(mean_pair.min(axis=1).mean())
            fsd_list.append(final_pair.min(axis=1).mean())
    return {
        "ade": float(np.mean(ade_list)),
        "fde": float(np.mean(fde_list)),
        "asd": float(np.mean(asd_list)) if asd_list else None,
        "fsd": float(np.mean(fsd_list)) if fsd_list else None,
    }


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curves(path, curve_rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "MOTA_r", "sMOTA_r", "MOTP_r"])
        for row in curve_rows:
            writer.writerow([row["recall"], row["mota_bar"], row["smota"],
                             row["motp"]])
