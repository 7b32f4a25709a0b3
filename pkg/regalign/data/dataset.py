import json
import copy
from pathlib import Path

import cv2
import numpy as np

from regalign.data.scenes import Box, Scene, Vocabulary, generate_scene
from regalign.utils.errors import BadConfig, CorruptFile, UsageError
from regalign.utils.exp import validate_config, DEFAULT_CONFIG
from regalign.utils.log import logger
from regalign.utils.misc import derive_seed, fnv1a_hex, parallel_map

MANIFEST_NAME = 'manifest.json'
SCENES_DIR = 'scenes'
# stream id for the base/novel split, outside the range of scene ids
SPLIT_STREAM = 2 ** 31 - 1
LAYOUT_KEYS = ('image_size', 'max_objects', 'min_object_size', 'max_object_size',
               'overlap_cap', 'caption_ratio', 'noise_amplitude')


class Dataset(object):
    def __init__(self, vocab, base_ids, novel_ids, train, eval, seed, layout, base_only=True):
        self.vocab = vocab
        self.base_ids = sorted(base_ids)
        self.novel_ids = sorted(novel_ids)
        assert not set(self.base_ids) & set(self.novel_ids)
        assert set(self.base_ids) | set(self.novel_ids) == set(range(len(vocab)))

        self.splits = {'train': list(train), 'eval': list(eval)}
        self.seed = seed
        self.layout = dict(layout)
        self.base_only = base_only

    @property
    def vocabulary(self):
        return self.vocab.names

    @property
    def train(self):
        return self.splits['train']

    @property
    def eval(self):
        return self.splits['eval']

    @property
    def scenes(self):
        return self.train + self.eval

    def captions(self, split='train'):
        return [scene.caption for scene in self.splits[split]]

    def class_ids(self, mode):
        if mode == 'novel':
            return list(self.novel_ids)
        if mode == 'base':
            return list(self.base_ids)
        if mode in ('generalized', 'all'):
            return list(range(len(self.vocab)))
        raise UsageError(f'unknown split mode "{mode}"')

    def manifest(self):
        manifest = {
            'vocabulary': self.vocabulary,
            'colors': self.vocab.colors,
            'shapes': self.vocab.shapes,
            'base_ids': self.base_ids,
            'novel_ids': self.novel_ids,
            'splits': {name: [s.id for s in scenes] for name, scenes in self.splits.items()},
            'seeds': {'master': self.seed, 'scenes': {str(s.id): s.seed for s in self.scenes}},
            'counts': {name: len(scenes) for name, scenes in self.splits.items()},
            'layout': self.layout,
            'base_only': self.base_only,
        }
        manifest['dataset_digest'] = self._digest(manifest)
        return manifest

    @property
    def digest(self):
        return self.manifest()['dataset_digest']

    def _digest(self, manifest):
        records = [s.annotation() for s in self.scenes]
        return fnv1a_hex(json.dumps([manifest, records], sort_keys=True).encode('utf-8'))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.manifest() == other.manifest() and all(
            a == b for a, b in zip(self.scenes, other.scenes))

    def __len__(self):
        return len(self.scenes)


def split_vocabulary(n_concepts, novel_fraction, seed):
    n_novel = int(round(novel_fraction * n_concepts))
    rng = np.random.default_rng(derive_seed(seed, SPLIT_STREAM))
    novel_ids = sorted(rng.permutation(n_concepts)[:n_novel].tolist())
    base_ids = sorted(set(range(n_concepts)) - set(novel_ids))
    return base_ids, novel_ids


def _make_scene(scene_id, master_seed, vocab, layout, novel_ids=None):
    scene = generate_scene(derive_seed(master_seed, scene_id), vocab, layout, scene_id=scene_id)
    if novel_ids:
        scene.unannotated = [(box, cid) for box, cid in scene.objects if cid in novel_ids]
        scene.objects = [(box, cid) for box, cid in scene.objects if cid not in novel_ids]
    return scene


def generate_dataset(cfg, n_jobs=1):
    """Seeded train/eval scenes plus a base/novel split of the vocabulary.

    In base-only mode the training scenes keep novel objects in the image
    and possibly in the caption, but move them out of the annotation.
    """
    cfg = copy.deepcopy(cfg)
    if 'data' not in cfg:
        cfg = {**copy.deepcopy(DEFAULT_CONFIG), 'data': cfg}
    validate_config(cfg)

    data = cfg['data']
    vocab = Vocabulary(data['colors'], data['shapes'])
    if len(set(vocab.names)) != len(vocab):
        raise BadConfig('data.colors', 'colors and shapes must be unique')
    base_ids, novel_ids = split_vocabulary(len(vocab), data['novel_fraction'], cfg['seed'])
    layout = {key: data[key] for key in LAYOUT_KEYS}

    n_train, n_eval = data['n_train'], data['n_eval']
    hidden = set(novel_ids) if data['base_only'] else None
    train = parallel_map(list(range(n_train)), _make_scene, n_jobs=n_jobs, desc='Train scenes',
                         const_args={'master_seed': cfg['seed'], 'vocab': vocab, 'layout': layout,
                                     'novel_ids': hidden})
    eval = parallel_map(list(range(n_train, n_train + n_eval)), _make_scene, n_jobs=n_jobs, desc='Eval scenes',
                        const_args={'master_seed': cfg['seed'], 'vocab': vocab, 'layout': layout})

    logger.info(f'Generated {n_train} train and {n_eval} eval scenes over {len(vocab)} concepts '
                f'({len(base_ids)} base / {len(novel_ids)} novel)')
    return Dataset(vocab, base_ids, novel_ids, train, eval, cfg['seed'], layout, data['base_only'])


def to_uint8(image):
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def serialize_dataset(dataset, directory, config_digest=None):
    """Images and annotations under `scenes/`, plus a manifest. The config
    digest is stored beside the dataset digest but is not part of it."""
    directory = Path(directory)
    scenes_path = directory / SCENES_DIR
    scenes_path.mkdir(parents=True, exist_ok=True)

    for scene in dataset.scenes:
        ok, encoded = cv2.imencode('.ppm', cv2.cvtColor(to_uint8(scene.image), cv2.COLOR_RGB2BGR))
        assert ok
        (scenes_path / f'{scene.id}.ppm').write_bytes(encoded.tobytes())
        (scenes_path / f'{scene.id}.json').write_text(json.dumps(scene.annotation(), sort_keys=True, indent=1))

    manifest = dataset.manifest()
    manifest['config_digest'] = config_digest
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + '\n')
    logger.info(f'Saved dataset {manifest["dataset_digest"]} to {directory}')
    return manifest


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise CorruptFile(path, str(e))


def _load_scene(scene_id, directory, seed, vocab, layout):
    """Rebuild a scene from its record; the float image is regenerated from
    the seed and checked against the stored 8-bit image."""
    json_path = directory / SCENES_DIR / f'{scene_id}.json'
    image_path = directory / SCENES_DIR / f'{scene_id}.ppm'
    record = _read_json(json_path)
    if record.get('id') != scene_id or record.get('seed') != seed:
        raise CorruptFile(json_path, 'scene id or seed does not match the manifest')

    try:
        raw = np.frombuffer(image_path.read_bytes(), dtype=np.uint8)
    except OSError as e:
        raise CorruptFile(image_path, str(e))
    stored = cv2.imdecode(raw, cv2.IMREAD_COLOR) if raw.size else None
    if stored is None:
        raise CorruptFile(image_path, 'cannot decode image')
    stored = cv2.cvtColor(stored, cv2.COLOR_BGR2RGB)

    regenerated = generate_scene(seed, vocab, layout, scene_id=scene_id)
    if stored.shape != regenerated.image.shape or not np.array_equal(stored, to_uint8(regenerated.image)):
        raise CorruptFile(image_path, 'image does not match its seed')

    try:
        objects = [(Box.from_list(o['box']), int(o['concept_id'])) for o in record['objects']]
        unannotated = [(Box.from_list(o['box']), int(o['concept_id'])) for o in record.get('unannotated', [])]
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(json_path, str(e))
    if sorted(objects + unannotated, key=_object_key) != sorted(regenerated.objects, key=_object_key):
        raise CorruptFile(json_path, 'annotation does not match the rendered scene')

    return Scene(image=regenerated.image, objects=objects, caption=record['caption'],
                 id=scene_id, seed=seed, unannotated=unannotated)


def _object_key(item):
    box, cid = item
    return box.as_list() + [cid]


def deserialize_dataset(directory, verify_digest=True):
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    manifest = _read_json(manifest_path)

    try:
        vocab = Vocabulary(manifest['colors'], manifest['shapes'])
        layout = manifest['layout']
        seeds = manifest['seeds']
        split_ids = manifest['splits']
        split_scenes = {}
        for name in ('train', 'eval'):
            split_scenes[name] = [
                _load_scene(i, directory, seeds['scenes'][str(i)], vocab, layout)
                for i in split_ids[name]]
        dataset = Dataset(vocab, manifest['base_ids'], manifest['novel_ids'], split_scenes['train'],
                          split_scenes['eval'], seeds['master'], layout, manifest.get('base_only', True))
    except (KeyError, TypeError, AssertionError, BadConfig) as e:
        raise CorruptFile(manifest_path, f'malformed manifest ({e!r})')

    if verify_digest and dataset.digest != manifest.get('dataset_digest'):
        raise CorruptFile(manifest_path, 'dataset digest mismatch')
    return dataset
