import pytest
import torch

from regalign.data.concepts import Lexicon, build_concept_pool
from regalign.data.dataset import generate_dataset
from regalign.engine.trainer import build_encoder, pretrain_image_level
from regalign.model.encoders import TextEncoder
from regalign.utils.exp import parse_config

# small enough for a full pipeline in seconds on one core
TINY_OVERRIDES = [
    'data.image_size=32',
    'data.n_train=12',
    'data.n_eval=6',
    'data.colors=[red, green, blue]',
    'data.shapes=[circle, square, bar]',
    'data.novel_fraction=0.34',
    'data.max_objects=2',
    'data.min_object_size=8',
    'data.max_object_size=12',
    'concepts.min_freq=1',
    'text.n_buckets=128',
    'text.embed_dim=16',
    'model.hidden_dim=16',
    'train.batch_images=4',
    'train.regions_per_image=6',
    'train.image_iterations=3',
    'train.region_iterations=3',
    'train.log_every=1',
    'proposals.min_side=4',
    'detect.finetune_iterations=3',
    'detect.regions_per_image=6',
]


def tiny_config(*extra):
    return parse_config(None, TINY_OVERRIDES + list(extra))


@pytest.fixture(scope='session', autouse=True)
def single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope='session')
def cfg():
    return tiny_config()


@pytest.fixture(scope='session')
def dataset(cfg):
    return generate_dataset(cfg)


@pytest.fixture(scope='session')
def text_encoder(cfg):
    return TextEncoder(**cfg.text)


@pytest.fixture(scope='session')
def lexicon(cfg):
    return Lexicon.from_vocabulary(cfg.data.colors, cfg.data.shapes)


@pytest.fixture(scope='session')
def pool(cfg, dataset, text_encoder, lexicon):
    return build_concept_pool(dataset.captions('train'), cfg.concepts.min_freq, cfg.concepts.templates,
                              text_encoder, lexicon)


@pytest.fixture(scope='session')
def teacher_ckpt(cfg, dataset, text_encoder):
    ckpt, _ = pretrain_image_level(cfg, dataset, text_encoder)
    return ckpt


@pytest.fixture
def encoder(cfg):
    return build_encoder(cfg)
