import json
import math
from pathlib import Path
from dataclasses import dataclass

import torch

from regalign.data.concepts import encode_concepts
from regalign.data.scenes import Box, iou
from regalign.inference.proposals import drop_degenerate
from regalign.model.losses import detection_logits, IGNORE_LABEL
from regalign.utils.errors import UnknownCategory
from regalign.utils.log import logger


@dataclass(frozen=True)
class DetectionResult:
    box: Box
    category_id: int
    score: float
    scene_id: int = -1

    def to_json(self, vocabulary=None):
        record = {'scene_id': self.scene_id, 'box': self.box.as_list(),
                  'category_id': self.category_id, 'score': self.score}
        if vocabulary is not None:
            record['category'] = vocabulary[self.category_id]
        return record


class DetectorHead(object):
    """Class rows (unit norm) plus an implicit all-zero background row.

    ``class_ids`` are vocabulary ids; row ``k`` of ``embeddings`` belongs to
    ``class_ids[k]`` and index ``len(class_ids)`` is the background.
    """

    def __init__(self, class_ids, embeddings, tau=0.01, background_weight=0.2, gamma=0.5):
        assert len(class_ids) == embeddings.shape[0]
        norms = torch.linalg.vector_norm(embeddings, dim=-1)
        assert bool(torch.allclose(norms, torch.ones_like(norms), atol=1e-9)), 'class rows must be unit norm'
        self.class_ids = list(class_ids)
        self.embeddings = embeddings
        self.tau = tau
        self.background_weight = background_weight
        self.gamma = gamma

    @property
    def n_classes(self):
        return len(self.class_ids)

    @property
    def background_index(self):
        return self.n_classes

    @property
    def background_embedding(self):
        return torch.zeros(self.embeddings.shape[1], dtype=self.embeddings.dtype)

    def class_index(self, category_id):
        try:
            return self.class_ids.index(category_id)
        except ValueError:
            raise UnknownCategory(f'category {category_id} is not in the head')

    @classmethod
    def from_vocabulary(cls, vocabulary, class_ids, templates, text_encoder, **kwargs):
        embeddings = encode_concepts([vocabulary[i] for i in class_ids], templates, text_encoder)
        return cls(class_ids, embeddings, **kwargs)


def class_probabilities(features, head):
    """Softmax over class logits ``cos / tau`` and the background logit 0."""
    return torch.softmax(detection_logits(features, head.embeddings, head.tau), dim=-1)


def class_scores(student, image, box, head):
    if isinstance(box, Box):
        box = box.as_list()
    features = student.region_features(image, box)
    return class_probabilities(features, head)[0]


def fuse_objectness(objectness, class_prob):
    assert 0.0 <= objectness <= 1.0 and 0.0 <= class_prob <= 1.0
    return math.sqrt(objectness * class_prob)


def nms(detections, iou_threshold, class_agnostic=False):
    """Greedy NMS by descending score (ties: earlier detection first).

    A detection is dropped when its IoU with a kept detection of the same
    class (any class when ``class_agnostic``) is strictly above the
    threshold.
    """
    assert 0 < iou_threshold <= 1
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept = []
    for i in order:
        det = detections[i]
        suppressed = any((class_agnostic or k.category_id == det.category_id) and iou(k.box, det.box) > iou_threshold
                         for k in kept)
        if not suppressed:
            kept.append(det)
    return kept


@torch.no_grad()
def zero_shot_detect(student, scene, proposals, head, nms_threshold=0.9, drop_background=True,
                     class_agnostic_nms=False):
    proposals, skipped = drop_degenerate(proposals, student.spatial_scale)
    if skipped:
        logger.warning(f'Scene {scene.id}: skipped {skipped} degenerate proposals')
    if not proposals:
        return []

    features = student.region_features(scene.image, [p.box.as_list() for p in proposals])
    probs = class_probabilities(features, head)
    detections = []
    for proposal, p in zip(proposals, probs):
        if drop_background and int(p.argmax()) == head.background_index:
            continue
        k = int(p[:head.n_classes].argmax())
        score = fuse_objectness(proposal.objectness, float(p[k]))
        if score <= 0:
            continue
        detections.append(DetectionResult(proposal.box, head.class_ids[k], score, scene.id))

    return nms(detections, nms_threshold, class_agnostic=class_agnostic_nms)


@torch.no_grad()
def predict_regions(student, scenes, head):
    """Argmax class (background excluded) for every annotated box."""
    predicted, expected = [], []
    for scene in scenes:
        if not scene.objects:
            continue
        features = student.region_features(scene.image, [box.as_list() for box in scene.boxes])
        logits = detection_logits(features, head.embeddings, head.tau)[:, :head.n_classes]
        predicted.extend(head.class_ids[int(k)] for k in logits.argmax(dim=-1))
        expected.extend(scene.concept_ids)
    return predicted, expected


def region_accuracy(student, scenes, head):
    """Zero-shot recognition accuracy on ground-truth boxes."""
    predicted, expected = predict_regions(student, scenes, head)
    known = set(head.class_ids)
    pairs = [(p, e) for p, e in zip(predicted, expected) if e in known]
    if not pairs:
        return 0.0
    return sum(p == e for p, e in pairs) / len(pairs)


@torch.no_grad()
def topk_predictions(features, head, k=3):
    """The ``k`` best classes per region with their probabilities under a
    softmax restricted to the real classes."""
    logits = detection_logits(features, head.embeddings, head.tau)[:, :head.n_classes]
    probs = torch.softmax(logits, dim=-1)
    k = min(k, head.n_classes)
    values, indices = torch.topk(probs, k, dim=-1)
    return [[(head.class_ids[int(i)], float(v)) for v, i in zip(row_v, row_i)]
            for row_v, row_i in zip(values, indices)]


def label_regions(boxes, scene, head, fg_iou=0.5, bg_iou=0.4):
    """Training labels for fine-tuning: the head index of the best annotated
    box when IoU >= ``fg_iou``, background below ``bg_iou``, ignored between.
    Annotated boxes of classes outside the head count as background."""
    gts = [(box, cid) for box, cid in scene.objects if cid in head.class_ids]
    labels = []
    for box in boxes:
        best, best_cid = 0.0, None
        for gt, cid in gts:
            overlap = iou(box, gt)
            if overlap > best:
                best, best_cid = overlap, cid
        if best >= fg_iou:
            labels.append(head.class_index(best_cid))
        elif best < bg_iou:
            labels.append(head.background_index)
        else:
            labels.append(IGNORE_LABEL)
    return labels


def save_detections(detections, path, vocabulary=None, config_digest=None, dataset_digest=None):
    """JSON-lines dump; the first line is a header with the digests."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        f.write(json.dumps({'header': True, 'config_digest': config_digest,
                            'dataset_digest': dataset_digest}, sort_keys=True) + '\n')
        for det in detections:
            f.write(json.dumps(det.to_json(vocabulary), sort_keys=True) + '\n')
