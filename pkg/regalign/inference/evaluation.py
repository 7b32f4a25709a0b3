import json
from pathlib import Path
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from regalign.data.scenes import Box, iou
from regalign.inference.detect import DetectionResult
from regalign.utils.errors import NoGroundTruth, UnknownCategory, CorruptFile, UsageError
from regalign.utils.log import logger

MODES = ('novel', 'base', 'generalized')
COCO_RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _as_scene_box(gt):
    if isinstance(gt, Box):
        return -1, gt
    scene_id, box = gt
    return scene_id, box


def match_detections(dets, gts, iou_thr=0.5):
    """Greedy TP/FP flags for detections of one category.

    ``dets`` must already be sorted by descending score. ``gts`` holds
    boxes or ``(scene_id, box)`` pairs; a detection only matches ground
    truth of its own scene, each ground truth at most once, and a match
    needs IoU >= ``iou_thr``.
    """
    gts = [_as_scene_box(gt) for gt in gts]
    used = [False] * len(gts)
    flags = []
    for det in dets:
        best, best_j = -1.0, None
        for j, (scene_id, box) in enumerate(gts):
            if used[j] or scene_id != det.scene_id:
                continue
            overlap = iou(det.box, box)
            if overlap > best:
                best, best_j = overlap, j
        if best_j is not None and best >= iou_thr:
            used[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def precision_recall(flags, n_gt):
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return precision, recall


def average_precision(flags, n_gt, interpolation='all_point'):
    """Area under the monotone precision envelope (all-point), or the mean
    envelope precision at 101 recall points (``coco101``)."""
    if n_gt == 0:
        raise NoGroundTruth('average precision is undefined without ground truth')
    if len(flags) == 0:
        return 0.0
    precision, recall = precision_recall(flags, n_gt)

    if interpolation == 'coco101':
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        positions = np.searchsorted(recall, COCO_RECALL_POINTS, side='left')
        sampled = [envelope[i] if i < len(envelope) else 0.0 for i in positions]
        return float(np.mean(sampled))

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


@dataclass
class MetricsReport:
    mode: str
    per_category: Dict[str, dict]
    novel_ap50: Optional[float] = None
    base_ap50: Optional[float] = None
    all_ap50: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        data = {
            'mode': self.mode,
            'per_category': self.per_category,
            'novel_ap50': self.novel_ap50,
            'base_ap50': self.base_ap50,
            'all_ap50': self.all_ap50,
        }
        data.update(self.extra)
        return data

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + '\n'


def _mean(values):
    return float(np.mean(values)) if values else None


def category_aps(detections, dataset, class_ids, iou_thr, interpolation):
    """AP per category with ground truth, keyed by vocabulary id, plus
    GT/detection counts for every category of ``class_ids``."""
    scenes = dataset.eval
    allowed = set(class_ids)
    for det in detections:
        if det.category_id not in allowed:
            raise UnknownCategory(f'detection category {det.category_id} is outside the evaluated classes')

    aps, counts = {}, {}
    for cid in class_ids:
        gts = [(scene.id, box) for scene in scenes for box, c in scene.objects if c == cid]
        order = [(i, d) for i, d in enumerate(detections) if d.category_id == cid]
        dets = [d for _, d in sorted(order, key=lambda item: (-item[1].score, item[0]))]
        counts[cid] = {'n_gt': len(gts), 'n_det': len(dets)}
        if not gts:
            continue
        flags = match_detections(dets, gts, iou_thr)
        aps[cid] = average_precision(flags, len(gts), interpolation)
    return aps, counts


def evaluate(detections, dataset, mode='generalized', iou_thr=0.5, interpolation='all_point', iou_sweep=None):
    if mode not in MODES:
        raise UsageError(f'unknown split mode "{mode}"')
    class_ids = dataset.class_ids(mode)
    aps, counts = category_aps(detections, dataset, class_ids, iou_thr, interpolation)

    vocabulary = dataset.vocabulary
    per_category = {}
    for cid in class_ids:
        per_category[vocabulary[cid]] = {'id': cid, 'ap': aps.get(cid), **counts[cid],
                                         'split': 'novel' if cid in dataset.novel_ids else 'base'}

    novel = [aps[c] for c in dataset.novel_ids if c in aps]
    base = [aps[c] for c in dataset.base_ids if c in aps]
    report = MetricsReport(mode=mode, per_category=per_category)
    if mode in ('novel', 'generalized'):
        report.novel_ap50 = _mean(novel)
    if mode in ('base', 'generalized'):
        report.base_ap50 = _mean(base)
    report.all_ap50 = _mean([aps[c] for c in class_ids if c in aps])
    report.extra = {'iou_threshold': iou_thr, 'interpolation': interpolation}

    if iou_sweep:
        sweep = {}
        for thr in iou_sweep:
            thr_aps, _ = category_aps(detections, dataset, class_ids, thr, interpolation)
            sweep[f'{thr:.2f}'] = _mean(list(thr_aps.values()))
        values = [v for v in sweep.values() if v is not None]
        report.extra['iou_sweep'] = {'per_threshold': sweep, 'map': _mean(values)}

    logger.info(f'Evaluation ({mode}): novel={report.novel_ap50} base={report.base_ap50} all={report.all_ap50}')
    return report


def load_detections(path):
    """Read a detection dump; returns (header, detections)."""
    path = Path(path)
    header, detections = {}, []
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise CorruptFile(path, str(e))
    for line in lines:
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            if record.get('header'):
                header = record
                continue
            detections.append(DetectionResult(Box.from_list(record['box']), int(record['category_id']),
                                              float(record['score']), int(record['scene_id'])))
        except (ValueError, KeyError, TypeError) as e:
            raise CorruptFile(path, str(e))
    return header, detections
