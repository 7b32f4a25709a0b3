import copy
import math
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn

from regalign.model import initializer
from regalign.model.numerics import l2_normalize
from regalign.utils.errors import BadShape, DegenerateBox
from regalign.utils.misc import fnv1a_64, fnv1a_hex, tensors_digest
from regalign.utils.serialization import serialize, load_model, Checkpoint

BOUNDARY = '#'
DEGENERATE_EPS = 1e-6


class TextEncoder(object):
    """Frozen language encoder: padded character trigrams, hashed into
    ``n_buckets`` counts, projected by a fixed seeded matrix and normalised.

    The instance is sealed after construction; attribute assignment raises
    and the projection array is read-only.
    """

    def __init__(self, n_buckets=512, embed_dim=64, seed=1234):
        rng = np.random.default_rng(seed)
        projection = rng.standard_normal((n_buckets, embed_dim)) / math.sqrt(embed_dim)
        projection.flags.writeable = False

        object.__setattr__(self, 'n_buckets', int(n_buckets))
        object.__setattr__(self, 'embed_dim', int(embed_dim))
        object.__setattr__(self, 'seed', int(seed))
        object.__setattr__(self, '_projection', projection)
        object.__setattr__(self, '_cache', dict())

    def __setattr__(self, name, value):
        raise AttributeError('TextEncoder is frozen')

    @property
    def projection(self):
        return self._projection

    @property
    def spec(self):
        return {'n_buckets': self.n_buckets, 'embed_dim': self.embed_dim, 'seed': self.seed}

    def trigram_counts(self, text):
        padded = BOUNDARY * 2 + text + BOUNDARY * 2
        counts = np.zeros(self.n_buckets)
        for i in range(len(padded) - 2):
            counts[fnv1a_64(padded[i:i + 3].encode('utf-8')) % self.n_buckets] += 1
        return counts

    def encode(self, text):
        assert text, 'cannot encode an empty text'
        if text not in self._cache:
            counts = self.trigram_counts(text)
            assert counts.sum() > 0
            embedding = l2_normalize(torch.from_numpy(counts @ self._projection))
            self._cache[text] = embedding
        return self._cache[text].clone()

    def encode_batch(self, texts):
        return torch.stack([self.encode(t) for t in texts])

    def digest(self):
        return fnv1a_hex(np.ascontiguousarray(self._projection, dtype='<f8').tobytes())


def roi_align_weights(boxes, fmap_size, pooled_size, spatial_scale, samples_per_bin=2):
    """Interpolation weights mapping a flattened feature map to pooled bins.

    Returns a (R, P*P, Hf*Wf) tensor W such that pooled = W @ fmap.flatten().
    Box corners map to feature coordinates as ``c * scale - 0.5``; each bin
    averages ``samples_per_bin**2`` bilinear samples at regular offsets and
    sample coordinates are clamped to the map border. Bilinear sampling on
    a regular grid is separable, so the weights are an outer product of a
    row and a column factor.
    """
    boxes = torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4)
    height, width = fmap_size
    x1 = boxes[:, 0] * spatial_scale - 0.5
    y1 = boxes[:, 1] * spatial_scale - 0.5
    x2 = boxes[:, 2] * spatial_scale - 0.5
    y2 = boxes[:, 3] * spatial_scale - 0.5
    if bool(((x2 - x1) <= DEGENERATE_EPS).any() or ((y2 - y1) <= DEGENERATE_EPS).any()):
        raise DegenerateBox('mapped box width or height is not positive')

    ax = _axis_weights(x1, x2, width, pooled_size, samples_per_bin)
    ay = _axis_weights(y1, y2, height, pooled_size, samples_per_bin)
    weights = ay[:, :, None, :, None] * ax[:, None, :, None, :]
    return weights.reshape(boxes.shape[0], pooled_size * pooled_size, height * width)


def _axis_weights(start, end, size, pooled_size, samples):
    steps = torch.arange(pooled_size, dtype=torch.float64)[:, None]
    offsets = (steps + (torch.arange(samples, dtype=torch.float64)[None, :] + 0.5) / samples).reshape(-1)
    bin_size = (end - start) / pooled_size
    coords = (start[:, None] + offsets[None, :] * bin_size[:, None]).clamp(0, size - 1)

    low = coords.floor()
    frac = coords - low
    low = low.long().clamp(max=size - 1)
    high = (low + 1).clamp(max=size - 1)
    one_hot = nn.functional.one_hot
    w = (one_hot(low, size) * (1 - frac)[..., None] + one_hot(high, size) * frac[..., None]).to(torch.float64)
    return w.reshape(-1, pooled_size, samples, size).mean(dim=2)


def roi_align(fmap, box, pooled_size, spatial_scale, samples_per_bin=2):
    """Pool one box from a (d, Hf, Wf) feature map into (d, P, P)."""
    d, height, width = fmap.shape
    weights = roi_align_weights(box, (height, width), pooled_size, spatial_scale, samples_per_bin)[0]
    return (fmap.reshape(d, -1) @ weights.T).reshape(d, pooled_size, pooled_size)


def roi_align_batch(fmaps, boxes, batch_index, pooled_size, spatial_scale, samples_per_bin=2):
    """Pool R boxes from a (B, d, Hf, Wf) batch; ``batch_index[r]`` picks the map."""
    _, d, height, width = fmaps.shape
    weights = roi_align_weights(boxes, (height, width), pooled_size, spatial_scale, samples_per_bin)
    feats = fmaps.reshape(fmaps.shape[0], d, -1)[torch.as_tensor(batch_index, dtype=torch.long)]
    pooled = torch.einsum('rdk,rqk->rdq', feats, weights)
    return pooled.reshape(-1, d, pooled_size, pooled_size)


class VisualEncoder(nn.Module):
    """Patch-wise encoder with a RoIAlign region head.

    Each ``patch_size`` x ``patch_size`` patch is flattened and passed
    through ``depth`` ReLU layers and a linear projection to ``embed_dim``
    channels (no spatial mixing). Region features pool a box from that map,
    flatten the P x P x d grid and project it to a unit-norm vector.
    """

    @serialize
    def __init__(self, patch_size=8, hidden_dim=64, embed_dim=64, depth=1,
                 pooled_size=2, samples_per_bin=2, seed=0):
        super().__init__()
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.pooled_size = pooled_size
        self.samples_per_bin = samples_per_bin

        layers = [nn.Linear(3 * patch_size * patch_size, hidden_dim), nn.ReLU()]
        for _ in range(depth - 1):
            layers += [nn.Linear(hidden_dim, hidden_dim), nn.ReLU()]
        self.patch_mlp = nn.Sequential(*layers)
        self.proj = nn.Linear(hidden_dim, embed_dim)
        self.head = nn.Linear(pooled_size * pooled_size * embed_dim, embed_dim)

        generator = torch.Generator().manual_seed(seed)
        self.apply(initializer.XavierGluon(generator, rnd_type='gaussian', magnitude=2))
        self.double()

    @property
    def spatial_scale(self):
        return 1.0 / self.patch_size

    def encode_image(self, images):
        """(H, W, 3) or (B, H, W, 3) images in [0, 1] -> (B, d, H/p, W/p)."""
        images = torch.as_tensor(images, dtype=torch.float64)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[-1] != 3:
            raise BadShape(f'expected (B, H, W, 3) images, got {tuple(images.shape)}')
        batch, height, width, _ = images.shape
        p = self.patch_size
        if height % p or width % p:
            raise BadShape(f'image size {height}x{width} is not divisible by patch size {p}')

        patches = images.reshape(batch, height // p, p, width // p, p, 3).permute(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(batch, height // p, width // p, -1)
        fmap = self.proj(self.patch_mlp(patches))
        return fmap.permute(0, 3, 1, 2)

    def pool_regions(self, fmaps, boxes, batch_index):
        pooled = roi_align_batch(fmaps, boxes, batch_index, self.pooled_size,
                                 self.spatial_scale, self.samples_per_bin)
        return l2_normalize(self.head(pooled.reshape(pooled.shape[0], -1)))

    def region_features(self, images, boxes, batch_index=None):
        fmaps = self.encode_image(images)
        boxes = torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4)
        if batch_index is None:
            batch_index = torch.zeros(boxes.shape[0], dtype=torch.long)
        return self.pool_regions(fmaps, boxes, batch_index)

    def image_features(self, images):
        """Features of a single global box covering each whole image."""
        images = torch.as_tensor(images, dtype=torch.float64)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        batch, height, width, _ = images.shape
        boxes = torch.tensor([[0.0, 0.0, float(width), float(height)]], dtype=torch.float64).repeat(batch, 1)
        return self.region_features(images, boxes, torch.arange(batch))

    def param_groups(self):
        return OrderedDict([
            ('patch', [p for p in self.patch_mlp.parameters()]),
            ('proj', list(self.proj.parameters())),
            ('head', list(self.head.parameters())),
        ])

    def digest(self):
        return tensors_digest(self.state_dict())


def encode_image(params, image):
    return params.encode_image(image)[0]


def region_feature(params, image, box, pooled_size=None):
    if pooled_size is not None:
        assert pooled_size == params.pooled_size, 'pooled size is fixed by the head'
    return params.region_features(image, box)[0]


def freeze(model):
    for param in model.parameters():
        param.requires_grad_(False)
    return model.eval()


def init_student_from_teacher(teacher):
    student = copy.deepcopy(teacher)
    for param in student.parameters():
        param.requires_grad_(True)
    return student.train()


def make_checkpoint(model, stage, seed, config_digest, iterations, extras=None, **metadata):
    metadata = {
        'stage': stage,
        'seed': int(seed),
        'config_digest': config_digest,
        'iterations': int(iterations),
        'model': model._config,
        **metadata,
    }
    params = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
    return Checkpoint(params=params, metadata=metadata, extras=OrderedDict(extras or {}))


def model_from_checkpoint(ckpt, trainable=False):
    model = load_model(ckpt.metadata['model'])
    model.load_state_dict(ckpt.params, strict=True)
    return init_student_from_teacher(model) if trainable else freeze(model)
