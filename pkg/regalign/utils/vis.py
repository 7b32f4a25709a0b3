from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np


@lru_cache(maxsize=16)
def get_palette(num_cls):
    palette = np.zeros(3 * num_cls, dtype=np.int32)

    for j in range(0, num_cls):
        lab = j
        i = 0

        while lab > 0:
            palette[j*3 + 0] |= (((lab >> 0) & 1) << (7-i))
            palette[j*3 + 1] |= (((lab >> 1) & 1) << (7-i))
            palette[j*3 + 2] |= (((lab >> 2) & 1) << (7-i))
            i = i + 1
            lab >>= 3

    return palette.reshape((-1, 3))


def to_display(image):
    """Float RGB in [0, 1] -> uint8 RGB."""
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def draw_boxes(image, boxes, category_ids, num_cls, thickness=1):
    """Burn box outlines into a uint8 RGB image, one palette color per category
    (palette index 0 is black, so categories start at index 1)."""
    image = image.copy()
    palette = get_palette(num_cls + 1)
    for box, cid in zip(boxes, category_ids):
        x1, y1, x2, y2 = box
        color = tuple(int(c) for c in palette[cid + 1])
        cv2.rectangle(image, (int(round(x1)), int(round(y1))), (int(round(x2)) - 1, int(round(y2)) - 1),
                      color, thickness)
    return image


def upscale(image, factor=4):
    return cv2.resize(image, None, fx=factor, fy=factor, interpolation=cv2.INTER_NEAREST)


def save_ppm(image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ok, encoded = cv2.imencode('.ppm', cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
    assert ok
    path.write_bytes(encoded.tobytes())


def caption_lines(detections, vocabulary, topk=None):
    """Text record beside a visualised scene: one line per detection with
    category id, name and score, plus the top-k region classes if given."""
    lines = []
    for k, det in enumerate(detections):
        line = f'{det.category_id} {vocabulary[det.category_id]} {det.score:.4f}'
        if topk is not None:
            line += ' | ' + ', '.join(f'{vocabulary[cid]}:{p:.3f}' for cid, p in topk[k])
        lines.append(line)
    return lines


def dump_detections(scene, detections, vocabulary, out_dir, topk=None, scale=4, config_digest=None):
    out_dir = Path(out_dir)
    image = draw_boxes(upscale(to_display(scene.image), scale),
                       [[c * scale for c in d.box.as_list()] for d in detections],
                       [d.category_id for d in detections], len(vocabulary))
    save_ppm(image, out_dir / f'{scene.id}.ppm')
    lines = caption_lines(detections, vocabulary, topk)
    if config_digest is not None:
        lines.insert(0, f'# config_digest {config_digest}')
    (out_dir / f'{scene.id}.txt').write_text('\n'.join(lines) + '\n')
