from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from regalign.model.numerics import GradPair, KLFromLogits, check_distribution, cosine_matrix
from regalign.utils.errors import EmptyBatch, NonPositiveTemperature, ShapeMismatch

LOSS_NAMES = ('contrastive', 'distillation', 'image_contrastive')
IGNORE_LABEL = -1


@dataclass
class RegionBatch:
    """Images of a batch plus the regions pooled from them.

    ``labels`` are pseudo-label concept ids (or detector class indices for
    fine-tuning), ``soft_targets`` the teacher distributions over the pool.
    """
    images: torch.Tensor
    boxes: torch.Tensor
    batch_index: torch.Tensor
    labels: torch.Tensor
    soft_targets: Optional[torch.Tensor] = None
    caption_embeddings: Optional[torch.Tensor] = None
    scene_ids: List[int] = field(default_factory=list)

    @property
    def n_regions(self):
        return int(self.boxes.shape[0])


def make_region_batch(scenes, pairs, text_encoder=None):
    """Stack scenes and their pseudo region-text pairs (one list per scene)."""
    images = torch.stack([torch.as_tensor(s.image, dtype=torch.float64) for s in scenes])
    flat = [(i, p) for i, scene_pairs in enumerate(pairs) for p in scene_pairs]
    boxes = torch.tensor([p.box.as_list() for _, p in flat], dtype=torch.float64).reshape(-1, 4)
    soft_targets = torch.stack([p.soft_target for _, p in flat]) if flat else None
    captions = text_encoder.encode_batch([s.caption for s in scenes]) if text_encoder is not None else None
    return RegionBatch(
        images=images, boxes=boxes,
        batch_index=torch.tensor([i for i, _ in flat], dtype=torch.long),
        labels=torch.tensor([p.concept_id for _, p in flat], dtype=torch.long),
        soft_targets=soft_targets, caption_embeddings=captions,
        scene_ids=[s.id for s in scenes])


def _check_tau(tau):
    if not tau > 0:
        raise NonPositiveTemperature(f'temperature must be positive, got {tau}')


class RegionContrastiveLoss(nn.Module):
    """-log p(v_i, l_m) where the softmax runs over the region's own concept
    and every other concept matched in the batch (deduplicated)."""

    def __init__(self, tau=0.01):
        super().__init__()
        _check_tau(tau)
        self._tau = tau

    def forward(self, features, labels, embeddings):
        if features.shape[0] == 0:
            raise EmptyBatch('region contrastive loss needs at least one region')
        candidates, target = torch.unique(labels, sorted=True, return_inverse=True)
        logits = cosine_matrix(features, embeddings[candidates]) / self._tau
        return F.cross_entropy(logits, target)


class DistillationLoss(nn.Module):
    """Mean KL(q_teacher || softmax(S(v, l_j) / tau)) over all pool concepts."""

    def __init__(self, tau=0.01):
        super().__init__()
        _check_tau(tau)
        self._tau = tau

    def forward(self, features, soft_targets, embeddings):
        if features.shape[0] == 0:
            raise EmptyBatch('distillation loss needs at least one region')
        if soft_targets.shape != (features.shape[0], embeddings.shape[0]):
            raise ShapeMismatch(f'soft targets {tuple(soft_targets.shape)} do not cover '
                                f'{features.shape[0]} regions x {embeddings.shape[0]} concepts')
        check_distribution(soft_targets, 'teacher soft target')
        logits = cosine_matrix(features, embeddings) / self._tau
        return KLFromLogits.apply(soft_targets, logits).mean()


class ImageContrastiveLoss(nn.Module):
    """Global-box image features against the batch captions, image to text;
    ``symmetric`` averages in the text to image direction."""

    def __init__(self, tau=0.01, symmetric=False):
        super().__init__()
        _check_tau(tau)
        self._tau = tau
        self._symmetric = symmetric

    def forward(self, image_features, caption_embeddings):
        if image_features.shape[0] == 0:
            raise EmptyBatch('image contrastive loss needs at least one image')
        logits = cosine_matrix(image_features, caption_embeddings) / self._tau
        target = torch.arange(logits.shape[0])
        loss = F.cross_entropy(logits, target)
        if self._symmetric:
            loss = 0.5 * (loss + F.cross_entropy(logits.T, target))
        return loss


def focal_weight(p_b, gamma):
    """(1 - p_b) ** gamma; a float in, a float out, tensors stay tensors."""
    if isinstance(p_b, torch.Tensor):
        return (1.0 - p_b).clamp_min(1e-12) ** gamma if gamma > 0 else torch.ones_like(p_b)
    assert 0.0 <= p_b <= 1.0 and gamma >= 0
    return (1.0 - p_b) ** gamma


class DetectionFinetuneLoss(nn.Module):
    """Class-wise weighted cross-entropy over base classes plus background.

    Logits are ``cos(v, l_c) / tau`` for the class rows and a constant 0 for
    the all-zero background embedding (the last index). Base-class regions
    are weighted by ``(1 - p_gt) ** gamma``, background regions by
    ``background_weight``; ``IGNORE_LABEL`` regions are left out of the mean.
    """

    def __init__(self, gamma=0.5, background_weight=0.2, tau=0.01):
        super().__init__()
        _check_tau(tau)
        self._gamma = gamma
        self._background_weight = background_weight
        self._tau = tau

    def forward(self, features, labels, class_embeddings):
        keep = labels != IGNORE_LABEL
        if not bool(keep.any()):
            raise EmptyBatch('no labelled regions to fine-tune on')
        features, labels = features[keep], labels[keep]

        logits = detection_logits(features, class_embeddings, self._tau)
        log_p = torch.log_softmax(logits, dim=-1).gather(1, labels[:, None])[:, 0]
        background = labels == class_embeddings.shape[0]
        weight = torch.where(background, torch.full_like(log_p, self._background_weight),
                             focal_weight(log_p.exp(), self._gamma))
        return (-weight * log_p).mean()


def detection_logits(features, class_embeddings, tau):
    logits = cosine_matrix(features, class_embeddings) / tau
    return torch.cat([logits, torch.zeros(logits.shape[0], 1, dtype=logits.dtype)], dim=1)


@dataclass
class LossReport:
    contrastive: float = 0.0
    distillation: float = 0.0
    image_contrastive: float = 0.0
    total: float = 0.0
    grad_norms: Dict[str, float] = field(default_factory=dict)

    def as_record(self):
        record = {
            'L_cntrst': self.contrastive,
            'L_dist': self.distillation,
            'L_cntrst_img': self.image_contrastive,
            'L_total': self.total,
        }
        record['grad_norm'] = float(sum(v ** 2 for v in self.grad_norms.values()) ** 0.5)
        return record


def total_loss(components, enabled=None, weights=None):
    """Sum of the enabled components; disabled ones contribute 0.

    ``components`` maps loss names to floats or scalar tensors. With
    ``weights`` left at None the sum is unweighted.
    """
    enabled = enabled or {name: True for name in LOSS_NAMES}
    weights = weights or {}
    total = 0.0
    values = {}
    for name in LOSS_NAMES:
        value = components.get(name)
        if value is None or not enabled.get(name, False):
            values[name] = 0.0
            continue
        values[name] = float(value.detach()) if torch.is_tensor(value) else float(value)
        total = total + weights.get(name, 1.0) * value
    report = LossReport(total=float(total.detach()) if torch.is_tensor(total) else float(total), **values)
    return total, report


def region_features(student, batch):
    return student.region_features(batch.images, batch.boxes, batch.batch_index)


def _gradients(loss, model):
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return GradPair(value=float(loss.detach()), grad={
        name: g if g is not None else torch.zeros_like(p) for (name, p), g in zip(named, grads)})


def region_contrastive_loss(student, batch, pool, tau):
    if batch.n_regions == 0:
        raise EmptyBatch('region contrastive loss needs at least one region')
    loss = RegionContrastiveLoss(tau)(region_features(student, batch), batch.labels, pool.embeddings)
    return _gradients(loss, student)


def distillation_loss(student, batch, pool, tau):
    if batch.n_regions == 0:
        raise EmptyBatch('distillation loss needs at least one region')
    loss = DistillationLoss(tau)(region_features(student, batch), batch.soft_targets, pool.embeddings)
    return _gradients(loss, student)


def image_contrastive_loss(student, batch, tau, symmetric=False):
    if batch.images.shape[0] == 0:
        raise EmptyBatch('image contrastive loss needs at least one image')
    loss = ImageContrastiveLoss(tau, symmetric)(student.image_features(batch.images), batch.caption_embeddings)
    return _gradients(loss, student)
