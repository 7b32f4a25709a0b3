import math
from dataclasses import dataclass

import numpy as np

from regalign.data.scenes import Box, iou
from regalign.utils.errors import BadConfig

SOURCES = ('random', 'oracle_rpn', 'ground_truth')
OBJECTNESS_FLOOR = 0.05
DEFAULT_SCALE_RANGE = (0.15, 0.6)
DEFAULT_ASPECT_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class RegionProposal:
    box: Box
    objectness: float
    source: str

    def __post_init__(self):
        assert 0 < self.objectness <= 1, self.objectness
        assert self.source in SOURCES


def propose_random(rng_seed, n, image_size, min_side,
                   scale_range=DEFAULT_SCALE_RANGE, aspect_range=DEFAULT_ASPECT_RANGE):
    """Boxes with uniform centres, log-uniform scale and aspect ratio.

    Scale is a fraction of the image side; width and height are clamped to
    ``[min_side, image_size]`` and the box is kept inside the image.
    """
    if n < 1:
        raise BadConfig('proposals.n', f'need at least one proposal, got {n}')
    if min_side < 2 or min_side > image_size:
        raise BadConfig('proposals.min_side', f'{min_side} is outside [2, {image_size}]')

    rng = np.random.default_rng(rng_seed)
    log_scale = rng.uniform(math.log(scale_range[0]), math.log(scale_range[1]), size=n)
    log_aspect = rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1]), size=n)
    side = np.exp(log_scale) * image_size
    widths = np.clip(side * np.exp(log_aspect / 2), min_side, image_size)
    heights = np.clip(side * np.exp(-log_aspect / 2), min_side, image_size)
    cx = widths / 2 + rng.uniform(size=n) * (image_size - widths)
    cy = heights / 2 + rng.uniform(size=n) * (image_size - heights)

    return [RegionProposal(Box(float(x - w / 2), float(y - h / 2), float(x + w / 2), float(y + h / 2)), 1.0, 'random')
            for x, y, w, h in zip(cx, cy, widths, heights)]


def propose_oracle_rpn(scene, rng_seed, n, jitter_sigma, min_side=8,
                       scale_range=DEFAULT_SCALE_RANGE, aspect_range=DEFAULT_ASPECT_RANGE):
    """Class-agnostic localizer stand-in.

    Every object box of the scene (annotated or not) is emitted first with
    Gaussian corner noise of ``jitter_sigma * side``; the remaining slots are
    random distractors. Objectness is the best IoU against the object boxes,
    floored at 0.05.
    """
    objects = [box for box, _ in scene.all_objects]
    if n < len(objects):
        raise BadConfig('proposals.n', f'{n} proposals cannot cover {len(objects)} objects')

    height, width = scene.size
    rng = np.random.default_rng(rng_seed)
    boxes = []
    for gt in objects:
        noise = rng.standard_normal(4) * jitter_sigma * np.array([gt.width, gt.height, gt.width, gt.height])
        x1, y1, x2, y2 = np.asarray(gt.as_list()) + noise
        x1, x2 = max(0.0, x1), min(float(width), x2)
        y1, y2 = max(0.0, y1), min(float(height), y2)
        boxes.append(Box(x1, y1, x2, y2) if x2 - x1 >= 1 and y2 - y1 >= 1 else gt)

    if n > len(objects):
        distractors = propose_random(int(rng.integers(2 ** 31)), n - len(objects), min(height, width),
                                     min_side, scale_range, aspect_range)
        boxes.extend(p.box for p in distractors)

    return [RegionProposal(box, objectness(box, objects), 'oracle_rpn') for box in boxes]


def objectness(box, objects):
    best = max((iou(box, gt) for gt in objects), default=0.0)
    return float(min(1.0, max(OBJECTNESS_FLOOR, best)))


def propose_ground_truth(scene):
    return [RegionProposal(box, 1.0, 'ground_truth') for box in scene.boxes]


def make_proposals(scene, source, n, rng_seed, proposals_cfg):
    """Dispatch on the configured proposal source (``proposals`` section)."""
    if source == 'random':
        return propose_random(rng_seed, n, min(scene.size), proposals_cfg['min_side'],
                              proposals_cfg['scale_range'], proposals_cfg['aspect_range'])
    if source == 'oracle_rpn':
        return propose_oracle_rpn(scene, rng_seed, max(n, len(scene.all_objects)), proposals_cfg['jitter_sigma'],
                                  proposals_cfg['min_side'], proposals_cfg['scale_range'],
                                  proposals_cfg['aspect_range'])
    if source == 'ground_truth':
        return propose_ground_truth(scene)
    raise BadConfig('proposals.source', f'unknown source "{source}"')


def is_degenerate(box, spatial_scale):
    return box.width * spatial_scale <= 1e-6 or box.height * spatial_scale <= 1e-6


def drop_degenerate(proposals, spatial_scale):
    kept = [p for p in proposals if not is_degenerate(p.box, spatial_scale)]
    return kept, len(proposals) - len(kept)
