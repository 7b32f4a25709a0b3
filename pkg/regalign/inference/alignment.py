import json
from pathlib import Path
from dataclasses import dataclass

import torch

from regalign.inference.proposals import drop_degenerate
from regalign.model.numerics import cosine_matrix, softmax_temp
from regalign.utils.errors import EmptyPool, NonPositiveTemperature
from regalign.utils.log import logger

DUMP_TOP_K = 16


@dataclass
class RegionTextPair:
    scene_id: int
    box: object
    concept_id: int
    teacher_score: float
    soft_target: torch.Tensor
    objectness: float = 1.0


def label_features(features, embeddings, tau):
    """Match region features (N x d) against concept embeddings (C x d).

    Returns the argmax concept per row (first index on ties), its cosine
    score and the temperature softmax over all concepts.
    """
    if not tau > 0:
        raise NonPositiveTemperature(f'temperature must be positive, got {tau}')
    scores = cosine_matrix(features, embeddings)
    best_scores, best_ids = scores.max(dim=-1)
    return best_ids, best_scores, softmax_temp(scores, tau)


@torch.no_grad()
def pseudo_label(teacher, scene, proposals, pool, tau):
    pairs = pseudo_label_batch(teacher, [scene], [proposals], pool, tau)
    return pairs[0]


@torch.no_grad()
def pseudo_label_batch(teacher, scenes, proposals, pool, tau):
    """Pseudo region-text pairs for a batch of scenes, one list per scene.

    Degenerate proposals are skipped and counted in a warning.
    """
    if len(pool) == 0:
        raise EmptyPool('cannot pseudo-label against an empty pool')

    kept, skipped = [], 0
    for scene_proposals in proposals:
        valid, n_skipped = drop_degenerate(scene_proposals, teacher.spatial_scale)
        kept.append(valid)
        skipped += n_skipped
    if skipped:
        logger.warning(f'Skipped {skipped} degenerate proposals while pseudo-labelling')

    boxes = [p.box.as_list() for scene_proposals in kept for p in scene_proposals]
    if not boxes:
        return [[] for _ in scenes]
    batch_index = [i for i, scene_proposals in enumerate(kept) for _ in scene_proposals]
    images = torch.stack([torch.as_tensor(s.image, dtype=torch.float64) for s in scenes])

    features = teacher.region_features(images, boxes, batch_index)
    best_ids, best_scores, soft_targets = label_features(features, pool.embeddings, tau)

    pairs, row = [], 0
    for scene, scene_proposals in zip(scenes, kept):
        scene_pairs = []
        for proposal in scene_proposals:
            scene_pairs.append(RegionTextPair(
                scene_id=scene.id, box=proposal.box, concept_id=int(best_ids[row]),
                teacher_score=float(best_scores[row]), soft_target=soft_targets[row],
                objectness=proposal.objectness))
            row += 1
        pairs.append(scene_pairs)
    return pairs


def collect_negatives(batch_pairs, i):
    """Concept ids matched to the other regions of the batch, minus the
    region's own concept. Duplicates collapse: negatives are concepts."""
    labels = [p if isinstance(p, int) else p.concept_id for p in batch_pairs]
    assert labels, 'empty batch'
    own = labels[i]
    return {label for j, label in enumerate(labels) if j != i and label != own}


def dump_pseudo_labels(pairs, path, pool=None, top_k=DUMP_TOP_K, config_digest=None):
    """JSON-lines record per pair after a header line with the config digest;
    soft targets larger than ``top_k`` keep only their ``top_k`` entries
    with concept ids."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        f.write(json.dumps({'header': True, 'config_digest': config_digest, 'n_pairs': len(pairs)},
                           sort_keys=True) + '\n')
        for pair in pairs:
            record = {
                'scene_id': pair.scene_id,
                'box': pair.box.as_list(),
                'concept_id': pair.concept_id,
                'teacher_score': pair.teacher_score,
                'objectness': pair.objectness,
            }
            if pool is not None:
                record['concept'] = pool.concepts[pair.concept_id].text
            q = pair.soft_target
            if q.numel() > top_k:
                values, ids = torch.topk(q, top_k)
                record['soft_target_top'] = {'ids': ids.tolist(), 'p': values.tolist()}
            else:
                record['soft_target'] = q.tolist()
            f.write(json.dumps(record, sort_keys=True) + '\n')
