"""Detection scoring: boxes from masks, matching, F1/F2, detection latency."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

DETECTION_THRESHOLD = 0.9
REFERENCE_SIZE = 224
REFERENCE_MIN_AREA = 16
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class Box(NamedTuple):
    """Axis-aligned box, half-open: rows ``y0:y1``, columns ``x0:x1``."""

    y0: int
    x0: int
    y1: int
    x1: int

    @property
    def area(self) -> int:
        return max(0, self.y1 - self.y0) * max(0, self.x1 - self.x0)


def default_min_area(shape: tuple[int, int]) -> int:
    """16 px at 224x224, scaled with image area (never below 1)."""
    return max(1, int(round(REFERENCE_MIN_AREA * shape[0] * shape[1] / REFERENCE_SIZE ** 2)))


def components(binary: np.ndarray, min_area: int = 1) -> list[Box]:
    """Bounding boxes of 8-connected components with at least ``min_area`` pixels."""
    labels, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    boxes = []
    for (sy, sx), area in zip(ndimage.find_objects(labels), areas):
        if area >= min_area:
            boxes.append(Box(sy.start, sx.start, sy.stop, sx.stop))
    return boxes


def extract_detections(
    pred_mask: np.ndarray, threshold: float = DETECTION_THRESHOLD, min_area: Optional[int] = None
) -> tuple[list[Box], np.ndarray]:
    """Binarise a probability map at ``> threshold`` and box its components."""
    binary = np.asarray(pred_mask) > threshold
    if min_area is None:
        min_area = default_min_area(binary.shape)
    return components(binary, min_area), binary


def ground_truth_boxes(mask: np.ndarray) -> list[Box]:
    return components(np.asarray(mask) > 0)


def iou_literal(p_mask: np.ndarray, g_mask: np.ndarray, epsilon: float = 1.0) -> float:
    """Overlap over summed areas (plus epsilon), in percent.

    This is the literal overlap ratio, not intersection-over-union: two
    identical masks score just under 50.
    """
    p = np.asarray(p_mask, dtype=np.float64)
    g = np.asarray(g_mask, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return float((p * g).sum() / (p.sum() + g.sum() + epsilon) * 100.0)


def _box_intersection(a: Box, b: Box) -> int:
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    return max(h, 0) * max(w, 0)


def iou_standard(p: Union[Box, Sequence[int], np.ndarray], g: Union[Box, Sequence[int], np.ndarray]) -> float:
    """Intersection over union in percent, for two boxes or two masks; 0 if both are empty."""
    if isinstance(p, np.ndarray) and p.ndim == 2:
        pm, gm = p > 0, np.asarray(g) > 0
        union = np.logical_or(pm, gm).sum()
        return float(np.logical_and(pm, gm).sum() / union * 100.0) if union else 0.0
    a, b = Box(*p), Box(*g)
    inter = _box_intersection(a, b)
    union = a.area + b.area - inter
    return inter / union * 100.0 if union else 0.0


def match_frame(detections: Sequence[Box], gt_boxes: Sequence[Box]) -> tuple[int, int, int]:
    """Greedy one-to-one matching by descending IoU; only IoU > 0 pairs match.

    Returns (tp, fp, fn).
    """
    pairs = []
    for i, d in enumerate(detections):
        for j, g in enumerate(gt_boxes):
            iou = iou_standard(d, g)
            if iou > 0:
                pairs.append((-iou, i, j))
    pairs.sort()
    used_d, used_g = set(), set()
    for _, i, j in pairs:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
    tp = len(used_g)
    return tp, len(detections) - tp, len(gt_boxes) - tp


@dataclass
class DetectionCounts:
    n_tp: int = 0
    n_fp: int = 0
    n_fn: int = 0

    def __post_init__(self):
        if min(self.n_tp, self.n_fp, self.n_fn) < 0:
            raise ValueError(f"counts must be non-negative: {self}")

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.n_tp + other.n_tp, self.n_fp + other.n_fp, self.n_fn + other.n_fn)


@dataclass
class Scores:
    precision: float
    recall: float
    f1: float
    f2: float


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def prf_scores(counts: DetectionCounts) -> Scores:
    """Precision, recall, F1 and F2 in percent; any 0/0 is taken as 0."""
    p = _ratio(counts.n_tp, counts.n_tp + counts.n_fp)
    r = _ratio(counts.n_tp, counts.n_tp + counts.n_fn)
    f1 = _ratio(2 * p * r, p + r)
    f2 = _ratio(5 * p * r, 4 * p + r)
    return Scores(100 * p, 100 * r, 100 * f1, 100 * f2)


@dataclass
class LatencyRecord:
    video_id: str
    t1: int
    t2: Optional[int]

    @property
    def delta_t(self) -> Optional[int]:
        return None if self.t2 is None else self.t2 - self.t1

    @property
    def missed(self) -> bool:
        return self.t2 is None


def detection_latency(
    gt_timeline: Sequence[bool], det_timeline: Sequence[bool], video_id: str = ""
) -> Optional[LatencyRecord]:
    """Frames from the first ground-truth polyp to the first correct detection.

    Returns None for videos without any ground-truth polyp; ``t2`` is None
    when the polyp is never detected.
    """
    if len(gt_timeline) != len(det_timeline):
        raise ValueError(f"timelines differ in length: {len(gt_timeline)} vs {len(det_timeline)}")
    t1 = next((i for i, flag in enumerate(gt_timeline) if flag), None)
    if t1 is None:
        return None
    t2 = next((i for i in range(t1, len(det_timeline)) if det_timeline[i]), None)
    return LatencyRecord(video_id, t1, t2)


@dataclass
class FrameResult:
    video_id: str
    frame_index: int
    detections: list[Box]
    gt_boxes: list[Box]
    tp: int
    fp: int
    fn: int
    scores: list[float] = field(default_factory=list)


@dataclass
class ScoreReport:
    counts: DetectionCounts
    scores: Scores
    latencies: list[LatencyRecord]
    frames: list[FrameResult] = field(default_factory=list)
    method: str = "Y-Net"

    def row(self) -> dict:
        s = self.scores
        return {
            "method": self.method,
            "TP": self.counts.n_tp,
            "FP": self.counts.n_fp,
            "FN": self.counts.n_fn,
            "Prec": round(s.precision, 1),
            "Rec": round(s.recall, 1),
            "F1": round(s.f1, 1),
            "F2": round(s.f2, 1),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.row()), lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.row())
        buf.write("\nvideo_id,t1,t2,delta_t\n")
        for rec in self.latencies:
            dt = "missed" if rec.missed else rec.delta_t
            buf.write(f"{rec.video_id},{rec.t1},{'' if rec.t2 is None else rec.t2},{dt}\n")
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "row": self.row(),
            "counts": asdict(self.counts),
            "scores": asdict(self.scores),
            "latency": [
                {"video_id": r.video_id, "t1": r.t1, "t2": r.t2, "delta_t": "missed" if r.missed else r.delta_t}
                for r in self.latencies
            ],
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    def detections_jsonl(self) -> str:
        lines = []
        for fr in self.frames:
            lines.append(
                json.dumps(
                    {
                        "video": fr.video_id,
                        "frame": fr.frame_index,
                        "boxes": [list(b) for b in fr.detections],
                        "scores": fr.scores,
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + ("\n" if lines else "")


FrameKey = tuple[str, int]


def score_run(
    ground_truth: Iterable[tuple[str, int, np.ndarray]],
    predictions: Mapping[FrameKey, Union[np.ndarray, Sequence[Box]]],
    threshold: float = DETECTION_THRESHOLD,
    min_area: Optional[int] = None,
    method: str = "Y-Net",
) -> ScoreReport:
    """Aggregate detection counts and per-video latency over a test split.

    Args:
        ground_truth: ``(video_id, frame_index, mask)`` for every test frame,
            in temporal order within each video.
        predictions: per-frame probability map, or an already extracted box
            list. Frames without an entry count as having no detections.
    """
    total = DetectionCounts()
    frames: list[FrameResult] = []
    timelines: dict[str, tuple[list[bool], list[bool]]] = {}
    for video_id, frame_index, mask in ground_truth:
        gt = ground_truth_boxes(mask)
        pred = predictions.get((video_id, frame_index))
        scores: list[float] = []
        if pred is None:
            logger.warning("no prediction for %s frame %d; counting zero detections", video_id, frame_index)
            dets: list[Box] = []
        elif isinstance(pred, np.ndarray) and pred.ndim == 2:
            dets, _ = extract_detections(pred, threshold, min_area)
            scores = [float(pred[b.y0:b.y1, b.x0:b.x1].max()) for b in dets]
        else:
            dets = [Box(*b) for b in pred]
        tp, fp, fn = match_frame(dets, gt)
        total = total + DetectionCounts(tp, fp, fn)
        frames.append(FrameResult(video_id, frame_index, dets, gt, tp, fp, fn, scores))
        gt_line, det_line = timelines.setdefault(video_id, ([], []))
        gt_line.append(bool(gt))
        det_line.append(tp > 0)
    latencies = []
    for video_id, (gt_line, det_line) in timelines.items():
        rec = detection_latency(gt_line, det_line, video_id)
        if rec is not None:
            latencies.append(rec)
    return ScoreReport(total, prf_scores(total), latencies, frames, method)


REFERENCE_RESULTS = {
    # method: (TP, FP, FN, Prec, Rec, F1, F2) as reported
    "PLS": (1594, 10103, 2719, 13.6, 36.9, 19.9, 27.5),
    "CVC-CLINIC": (1578, 3456, 2735, 31.3, 36.6, 33.8, 35.4),
    "OUS": (2222, 229, 2091, 90.6, 51.5, 65.7, 56.4),
    "ASU": (2636, 184, 1677, 93.5, 61.1, 73.9, 65.7),
    "CUMED": (3081, 769, 1232, 80.0, 71.4, 75.5, 73.0),
    "Fusion": (3062, 414, 1251, 88.1, 71.0, 78.6, 73.9),
    "Y-Net": (3582, 513, 662, 87.4, 84.4, 85.9, 85.0),
}

REFERENCE_LATENCY = {"Vid5": 8, "Vid6": 0, "Vid7": 0, "Vid8": 18, "Vid9": 0, "Vid10": 0, "Vid11": 0, "Vid12": 0, "Vid13": 0}
