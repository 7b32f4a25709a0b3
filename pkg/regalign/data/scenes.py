import cv2
import numpy as np
from dataclasses import dataclass, field
from typing import List, Tuple

from regalign.utils.errors import DegenerateBox, LayoutFailure, BadConfig
from regalign.utils.misc import fnv1a_64, get_bbox_from_mask

MAX_PLACEMENT_ATTEMPTS = 100
CAPTION_PREFIX = 'a photo of a '
CAPTION_JOINER = ' and a '

PALETTE = {
    'red': (1.0, 0.0, 0.0),
    'green': (0.0, 1.0, 0.0),
    'blue': (0.0, 0.0, 1.0),
    'yellow': (1.0, 1.0, 0.0),
    'magenta': (1.0, 0.0, 1.0),
    'cyan': (0.0, 1.0, 1.0),
    'white': (1.0, 1.0, 1.0),
    'orange': (1.0, 0.5, 0.0),
    'purple': (0.5, 0.0, 1.0),
}


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DegenerateBox(f'invalid box {self.as_list()}')

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def as_list(self):
        return [float(self.x1), float(self.y1), float(self.x2), float(self.y2)]

    def clip(self, width, height):
        return Box(max(0.0, self.x1), max(0.0, self.y1), min(float(width), self.x2), min(float(height), self.y2))

    @classmethod
    def from_list(cls, coords):
        return cls(*(float(c) for c in coords))


def iou(a, b):
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


class Vocabulary(object):
    """Concept ids are ``color_idx * n_shapes + shape_idx``."""

    def __init__(self, colors, shapes):
        self.colors = list(colors)
        self.shapes = list(shapes)
        for shape in self.shapes:
            if shape not in SHAPE_RENDERERS:
                raise BadConfig('data.shapes', f'no renderer for shape "{shape}"')

    def __len__(self):
        return len(self.colors) * len(self.shapes)

    @property
    def names(self):
        return [self.name(i) for i in range(len(self))]

    def name(self, concept_id):
        return f'{self.color_of(concept_id)} {self.shape_of(concept_id)}'

    def color_of(self, concept_id):
        return self.colors[concept_id // len(self.shapes)]

    def shape_of(self, concept_id):
        return self.shapes[concept_id % len(self.shapes)]

    def rgb(self, concept_id):
        color = self.color_of(concept_id)
        if color in PALETTE:
            return np.array(PALETTE[color])
        rng = np.random.default_rng(fnv1a_64(color.encode('utf-8')))
        return rng.uniform(0.3, 1.0, size=3)


def _draw_circle(mask, x0, y0, size):
    radius = (size - 1) // 2
    cv2.circle(mask, (x0 + radius, y0 + radius), radius, 1, thickness=-1, lineType=cv2.LINE_8)


def _draw_square(mask, x0, y0, size):
    cv2.rectangle(mask, (x0, y0), (x0 + size - 1, y0 + size - 1), 1, thickness=-1, lineType=cv2.LINE_8)


def _draw_triangle(mask, x0, y0, size):
    points = np.array([[x0 + size // 2, y0], [x0, y0 + size - 1], [x0 + size - 1, y0 + size - 1]], dtype=np.int32)
    cv2.fillPoly(mask, [points], 1, lineType=cv2.LINE_8)


def _draw_cross(mask, x0, y0, size):
    t = max(2, size // 3)
    lo = (size - t) // 2
    cv2.rectangle(mask, (x0, y0 + lo), (x0 + size - 1, y0 + lo + t - 1), 1, thickness=-1)
    cv2.rectangle(mask, (x0 + lo, y0), (x0 + lo + t - 1, y0 + size - 1), 1, thickness=-1)


def _draw_bar(mask, x0, y0, size):
    t = max(3, size // 3)
    lo = (size - t) // 2
    cv2.rectangle(mask, (x0, y0 + lo), (x0 + size - 1, y0 + lo + t - 1), 1, thickness=-1)


SHAPE_RENDERERS = {
    'circle': _draw_circle,
    'square': _draw_square,
    'triangle': _draw_triangle,
    'cross': _draw_cross,
    'bar': _draw_bar,
}


def render_mask(shape, image_size, x0, y0, size):
    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    SHAPE_RENDERERS[shape](mask, x0, y0, size)
    return mask


@dataclass
class Scene:
    image: np.ndarray
    objects: List[Tuple[Box, int]]
    caption: str
    id: int
    seed: int = 0
    # objects present in the image but withheld from the annotation (novel
    # categories of a base-only training split)
    unannotated: List[Tuple[Box, int]] = field(default_factory=list)

    @property
    def boxes(self):
        return [box for box, _ in self.objects]

    @property
    def concept_ids(self):
        return [cid for _, cid in self.objects]

    @property
    def all_objects(self):
        return self.objects + self.unannotated

    @property
    def size(self):
        return self.image.shape[0], self.image.shape[1]

    def annotation(self):
        return {
            'id': self.id,
            'seed': self.seed,
            'caption': self.caption,
            'objects': [{'box': box.as_list(), 'concept_id': cid} for box, cid in self.objects],
            'unannotated': [{'box': box.as_list(), 'concept_id': cid} for box, cid in self.unannotated],
        }

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.annotation() == other.annotation() and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image))


def generate_scene(rng_seed, vocab, layout, scene_id=0):
    """Render one scene from its own seed.

    ``layout`` carries image_size, max_objects, min/max_object_size,
    overlap_cap, caption_ratio and noise_amplitude (the ``data`` config
    section). A placement is rejected when its box reaches the IoU cap
    against a placed box or when its pixels touch another shape.
    """
    assert len(vocab) > 0
    image_size = layout['image_size']
    assert image_size >= 32
    rng = np.random.default_rng(rng_seed)

    image = rng.uniform(0.0, layout['noise_amplitude'], size=(image_size, image_size, 3))
    occupied = np.zeros((image_size, image_size), dtype=bool)
    n_objects = int(rng.integers(1, layout['max_objects'] + 1))

    objects = []
    for _ in range(n_objects):
        concept_id = int(rng.integers(len(vocab)))
        shape = vocab.shape_of(concept_id)
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            size = int(rng.integers(layout['min_object_size'], layout['max_object_size'] + 1))
            x0 = int(rng.integers(0, image_size - size + 1))
            y0 = int(rng.integers(0, image_size - size + 1))
            mask = render_mask(shape, image_size, x0, y0, size).astype(bool)
            box = Box(*get_bbox_from_mask(mask))
            if (mask & occupied).any():
                continue
            if any(iou(box, other) >= layout['overlap_cap'] for other, _ in objects):
                continue
            break
        else:
            raise LayoutFailure(f'scene {scene_id}: could not place object {len(objects) + 1} '
                                f'after {MAX_PLACEMENT_ATTEMPTS} attempts')

        occupied |= mask
        image[mask] = vocab.rgb(concept_id)
        objects.append((box, concept_id))

    n_mentioned = max(1, int(round(layout['caption_ratio'] * n_objects)))
    mentioned = sorted(rng.choice(n_objects, size=n_mentioned, replace=False).tolist())
    caption = make_caption([vocab.name(objects[i][1]) for i in mentioned])

    return Scene(image=image, objects=objects, caption=caption, id=scene_id, seed=int(rng_seed))


def make_caption(concept_names):
    return CAPTION_PREFIX + CAPTION_JOINER.join(concept_names)
