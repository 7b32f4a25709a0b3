import os
import copy
import json
import numbers
from pathlib import Path

import yaml
from easydict import EasyDict as edict

from .errors import BadConfig
from .misc import fnv1a_hex

OUTPUT_ENV_VAR = 'REGALIGN_OUT'

DEFAULT_CONFIG = {
    'seed': 0,
    'threads': 1,
    'data': {
        'image_size': 64,
        'n_train': 400,
        'n_eval': 100,
        'colors': ['red', 'green', 'blue', 'yellow', 'magenta', 'cyan'],
        'shapes': ['circle', 'square', 'triangle', 'cross', 'bar'],
        'novel_fraction': 0.27,
        'max_objects': 3,
        'min_object_size': 12,
        'max_object_size': 24,
        'overlap_cap': 0.3,
        'caption_ratio': 0.7,
        'noise_amplitude': 0.2,
        'base_only': True,
    },
    'concepts': {
        'min_freq': 5,
        'templates': ['a photo of a {}'],
        'lexicon': None,
        'source': 'parsed',
    },
    'text': {
        'n_buckets': 512,
        'embed_dim': 64,
        'seed': 1234,
    },
    'model': {
        'patch_size': 8,
        'hidden_dim': 64,
        'depth': 1,
        'pooled_size': 2,
        'samples_per_bin': 2,
    },
    'train': {
        # full-scale values: batch 96 images, 100 regions/image, 600k iterations
        'lr': 0.002,
        'tau': 0.01,
        'batch_images': 8,
        'regions_per_image': 16,
        'image_iterations': 1000,
        'region_iterations': 2000,
        'losses': {'contrastive': True, 'distillation': True, 'image_contrastive': True},
        'loss_weights': {'contrastive': 1.0, 'distillation': 1.0, 'image_contrastive': 1.0},
        'symmetric_image_loss': False,
        'log_every': 10,
    },
    'proposals': {
        'source': 'oracle_rpn',
        'jitter_sigma': 0.1,
        'min_side': 8,
        'scale_range': [0.15, 0.6],
        'aspect_range': [0.5, 2.0],
    },
    'detect': {
        'background_weight': 0.2,
        'gamma': 0.5,
        'nms_threshold': 0.9,
        'class_agnostic_nms': False,
        'drop_background': True,
        'fg_iou': 0.5,
        'bg_iou': 0.4,
        'finetune_iterations': 500,
        'finetune_lr': 0.002,
        'top_k': 3,
        'regions_per_image': 16,
    },
    'eval': {
        'iou_threshold': 0.5,
        'interpolation': 'all_point',
        'iou_sweep': None,
    },
}


def _positive(value):
    return isinstance(value, numbers.Real) and not isinstance(value, bool) and value > 0


def _nonnegative(value):
    return isinstance(value, numbers.Real) and not isinstance(value, bool) and value >= 0


def _positive_int(value):
    return isinstance(value, int) and not isinstance(value, bool) and value >= 1


def _nonnegative_int(value):
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _unit_interval(value):
    return _nonnegative(value) and value <= 1


def _open_unit_interval(value):
    return _positive(value) and value <= 1


def _bool(value):
    return isinstance(value, bool)


def _word_list(value):
    return isinstance(value, list) and len(value) > 0 and all(isinstance(x, str) and x.strip() for x in value)


def _range_pair(value):
    return (isinstance(value, list) and len(value) == 2 and all(_positive(x) for x in value)
            and value[0] <= value[1])


def _one_of(*choices):
    return lambda value: value in choices


CHECKS = {
    'seed': _nonnegative_int,
    'threads': _positive_int,
    'data.image_size': lambda v: _positive_int(v) and v >= 32,
    'data.n_train': _positive_int,
    'data.n_eval': _positive_int,
    'data.colors': _word_list,
    'data.shapes': _word_list,
    'data.novel_fraction': _unit_interval,
    'data.max_objects': _positive_int,
    'data.min_object_size': lambda v: _positive_int(v) and v >= 3,
    'data.max_object_size': _positive_int,
    'data.overlap_cap': _open_unit_interval,
    'data.caption_ratio': _open_unit_interval,
    'data.noise_amplitude': _unit_interval,
    'data.base_only': _bool,
    'concepts.min_freq': _positive_int,
    'concepts.templates': lambda v: _word_list(v) and all(t.count('{}') == 1 for t in v),
    'concepts.lexicon': lambda v: v is None or isinstance(v, str),
    'concepts.source': _one_of('parsed', 'vocabulary'),
    'text.n_buckets': _positive_int,
    'text.embed_dim': _positive_int,
    'text.seed': _nonnegative_int,
    'model.patch_size': _positive_int,
    'model.hidden_dim': _positive_int,
    'model.depth': lambda v: _positive_int(v) and v <= 3,
    'model.pooled_size': _positive_int,
    'model.samples_per_bin': _positive_int,
    'train.lr': _positive,
    'train.tau': _positive,
    'train.batch_images': _positive_int,
    'train.regions_per_image': _positive_int,
    'train.image_iterations': _nonnegative_int,
    'train.region_iterations': _nonnegative_int,
    'train.losses.contrastive': _bool,
    'train.losses.distillation': _bool,
    'train.losses.image_contrastive': _bool,
    'train.loss_weights.contrastive': _nonnegative,
    'train.loss_weights.distillation': _nonnegative,
    'train.loss_weights.image_contrastive': _nonnegative,
    'train.symmetric_image_loss': _bool,
    'train.log_every': _positive_int,
    'proposals.source': _one_of('random', 'oracle_rpn', 'ground_truth'),
    'proposals.jitter_sigma': _nonnegative,
    'proposals.min_side': lambda v: _positive(v) and v >= 2,
    'proposals.scale_range': _range_pair,
    'proposals.aspect_range': _range_pair,
    'detect.background_weight': _nonnegative,
    'detect.gamma': _nonnegative,
    'detect.nms_threshold': _open_unit_interval,
    'detect.class_agnostic_nms': _bool,
    'detect.drop_background': _bool,
    'detect.fg_iou': _open_unit_interval,
    'detect.bg_iou': _unit_interval,
    'detect.finetune_iterations': _nonnegative_int,
    'detect.finetune_lr': _positive,
    'detect.top_k': _positive_int,
    'detect.regions_per_image': _positive_int,
    'eval.iou_threshold': _open_unit_interval,
    'eval.interpolation': _one_of('all_point', 'coco101'),
    'eval.iou_sweep': lambda v: v is None or (isinstance(v, list) and len(v) > 0
                                              and all(_open_unit_interval(x) for x in v)),
}


def load_config_file(config_path, return_edict=False):
    config_path = Path(config_path)
    with open(config_path, 'r') as f:
        cfg = yaml.safe_load(f)

    if cfg is None:
        cfg = dict()
    if not isinstance(cfg, dict):
        raise BadConfig('<root>', f'{config_path} does not contain a mapping')

    return edict(cfg) if return_edict else cfg


def parse_config(path=None, overrides=None):
    """Build a validated run config: defaults <- file <- overrides.

    ``overrides`` is a list of ``"dotted.key=value"`` strings; values are
    parsed as YAML scalars, so ``train.lr=0.01`` gives a float and
    ``data.colors=[red,blue]`` a list. A key without a dot is accepted when
    it names exactly one leaf of the config (``tau=0.5``).
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        _merge(cfg, load_config_file(path), prefix='')

    for item in overrides or []:
        if '=' not in item:
            raise BadConfig(item, 'overrides must look like key=value')
        key, raw_value = item.split('=', 1)
        key = _resolve_key(key.strip())
        _set_dotted(cfg, key, yaml.safe_load(raw_value))

    validate_config(cfg)
    return edict(cfg)


def validate_config(cfg):
    for key, check in CHECKS.items():
        value = _get_dotted(cfg, key)
        if isinstance(value, int) and not isinstance(value, bool) and key in _FLOAT_KEYS:
            value = float(value)
            _set_dotted(cfg, key, value)
        if not check(value):
            raise BadConfig(key, f'got {value!r}')

    data = cfg['data']
    if data['min_object_size'] > data['max_object_size']:
        raise BadConfig('data.min_object_size', 'must not exceed data.max_object_size')
    if data['max_object_size'] >= data['image_size']:
        raise BadConfig('data.max_object_size', 'must be smaller than data.image_size')
    if data['image_size'] % cfg['model']['patch_size'] != 0:
        raise BadConfig('model.patch_size', 'must divide data.image_size')
    if not any(cfg['train']['losses'].values()):
        raise BadConfig('train.losses', 'at least one loss must be enabled')
    if cfg['detect']['bg_iou'] > cfg['detect']['fg_iou']:
        raise BadConfig('detect.bg_iou', 'must not exceed detect.fg_iou')
    if cfg['proposals']['min_side'] > data['image_size']:
        raise BadConfig('proposals.min_side', 'must not exceed data.image_size')
    return cfg


def config_digest(cfg):
    """Digest of everything that can change a result; the thread cap is
    left out since runs are schedule-independent."""
    plain = _plain(cfg)
    plain.pop('threads', None)
    return fnv1a_hex(json.dumps(plain, sort_keys=True).encode('utf-8'))


def config_to_json(cfg):
    return json.dumps(_plain(cfg), sort_keys=True, indent=2)


def get_output_root(default):
    return Path(os.environ.get(OUTPUT_ENV_VAR, default))


def init_experiment(cfg, out_dir):
    out_dir = Path(out_dir)
    paths = edict()
    paths.OUT_PATH = out_dir
    paths.DATA_PATH = out_dir / 'data'
    paths.CHECKPOINTS_PATH = out_dir / 'checkpoints'
    paths.LOGS_PATH = out_dir / 'logs'
    paths.VIS_PATH = out_dir / 'vis'
    for key in ('OUT_PATH', 'CHECKPOINTS_PATH', 'LOGS_PATH'):
        paths[key].mkdir(parents=True, exist_ok=True)

    (out_dir / 'config.json').write_text(config_to_json(cfg) + '\n')
    return paths


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _merge(dst, src, prefix):
    for key, value in src.items():
        path = f'{prefix}{key}'
        if key not in dst:
            raise BadConfig(path, 'unknown key')
        if isinstance(dst[key], dict):
            if not isinstance(value, dict):
                raise BadConfig(path, 'expected a mapping')
            _merge(dst[key], value, prefix=path + '.')
        else:
            dst[key] = value


def _leaf_keys(cfg, prefix=''):
    for key, value in cfg.items():
        if isinstance(value, dict):
            yield from _leaf_keys(value, prefix + key + '.')
        else:
            yield prefix + key


def _resolve_key(key):
    leaves = list(_leaf_keys(DEFAULT_CONFIG))
    if key in leaves:
        return key
    candidates = [leaf for leaf in leaves if leaf.split('.')[-1] == key]
    if '.' not in key and len(candidates) == 1:
        return candidates[0]
    raise BadConfig(key, 'unknown key')


def _get_dotted(cfg, key):
    node = cfg
    for part in key.split('.'):
        node = node[part]
    return node


_FLOAT_KEYS = {key for key in _leaf_keys(DEFAULT_CONFIG)
               if isinstance(_get_dotted(DEFAULT_CONFIG, key), float)}


def _set_dotted(cfg, key, value):
    parts = key.split('.')
    node = cfg
    for part in parts[:-1]:
        node = node[part]
    if isinstance(node[parts[-1]], dict):
        raise BadConfig(key, 'cannot override a whole section')
    node[parts[-1]] = value
