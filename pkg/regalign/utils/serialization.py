import json
import struct
import inspect
from pathlib import Path
from copy import deepcopy
from functools import wraps
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import CorruptCheckpoint
from .log import logger
from .misc import fnv1a_64

CHECKPOINT_MAGIC = b'RALN1'


def serialize(init):
    """Record the constructor arguments of an ``nn.Module`` in ``self._config``
    so the model can be rebuilt from checkpoint metadata alone."""
    parameters = list(inspect.signature(init).parameters)

    @wraps(init)
    def new_init(self, *args, **kwargs):
        params = deepcopy(kwargs)
        for pname, value in zip(parameters[1:], args):
            params[pname] = value

        specified_params = set(params.keys())
        for pname, param in get_default_params(self.__class__).items():
            if pname not in params:
                params[pname] = param.default

        config = {
            'class': get_classname(self.__class__),
            'params': {name: {'value': value, 'specified': name in specified_params}
                       for name, value in params.items()},
        }
        setattr(self, '_config', config)
        init(self, *args, **kwargs)

    return new_init


def load_model(config, **kwargs):
    model_class = get_class_from_str(config['class'])
    model_default_params = get_default_params(model_class)

    model_args = dict()
    for pname, param in config['params'].items():
        if pname not in model_default_params:
            raise CorruptCheckpoint(f'unknown constructor argument "{pname}" for {config["class"]}')
        model_args[pname] = param['value']
    model_args.update(kwargs)

    return model_class(**model_args)


def get_config_repr(config):
    config_str = f'Model: {config["class"]}\n'
    for pname, param in config['params'].items():
        param_str = f'{pname:<22} = {str(param["value"]):<12}'
        if not param['specified']:
            param_str += ' (default)'
        config_str += param_str + '\n'
    return config_str


def get_default_params(some_class):
    params = dict()
    for mclass in some_class.mro():
        if mclass is nn.Module or mclass is object:
            continue

        mclass_params = inspect.signature(mclass.__init__).parameters
        for pname, param in mclass_params.items():
            if param.default != param.empty and pname not in params:
                params[pname] = param

    return params


def get_classname(cls):
    module = cls.__module__
    name = cls.__qualname__
    if module is not None and module != "__builtin__":
        name = module + "." + name
    return name


def get_class_from_str(class_str):
    components = class_str.split('.')
    mod = __import__('.'.join(components[:-1]))
    for comp in components[1:]:
        mod = getattr(mod, comp)
    return mod


@dataclass
class Checkpoint:
    """Model weights plus metadata.

    ``metadata`` holds at least ``stage``, ``seed``, ``config_digest``,
    ``iterations`` and ``model`` (the serialized constructor config);
    ``extras`` carries auxiliary arrays such as the concept-pool
    embeddings.
    """
    params: 'OrderedDict[str, torch.Tensor]'
    metadata: dict
    extras: 'OrderedDict[str, torch.Tensor]' = field(default_factory=OrderedDict)

    @property
    def stage(self):
        return self.metadata.get('stage')

    def arrays(self):
        named = OrderedDict((f'params/{k}', v) for k, v in self.params.items())
        named.update((f'extras/{k}', v) for k, v in self.extras.items())
        return named

    def __eq__(self, other):
        if not isinstance(other, Checkpoint) or self.metadata != other.metadata:
            return False
        mine, theirs = self.arrays(), other.arrays()
        return list(mine) == list(theirs) and all(torch.equal(mine[k], theirs[k]) for k in mine)


def save_checkpoint(ckpt, path, verbose=True):
    """Binary layout (little endian): magic, u64 header length, JSON header,
    then per array u32 rank, u64 extents, raw float64 data; finally the
    u64 FNV-1a digest of every preceding byte."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = ckpt.arrays()
    header = json.dumps({'metadata': ckpt.metadata, 'arrays': list(arrays)}, sort_keys=True).encode('utf-8')

    chunks = [CHECKPOINT_MAGIC, struct.pack('<Q', len(header)), header]
    for tensor in arrays.values():
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype='<f8')
        chunks.append(struct.pack('<I', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}Q', *array.shape))
        chunks.append(array.tobytes())
    body = b''.join(chunks)
    path.write_bytes(body + struct.pack('<Q', fnv1a_64(body)))

    if verbose:
        logger.info(f'Save checkpoint to {str(path)}')


def load_checkpoint(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CorruptCheckpoint(f'cannot read {path}: {e}')

    if not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpoint(f'{path}: bad magic')
    if len(data) < len(CHECKPOINT_MAGIC) + 16:
        raise CorruptCheckpoint(f'{path}: length mismatch')

    body, (digest,) = data[:-8], struct.unpack('<Q', data[-8:])
    if fnv1a_64(body) != digest:
        raise CorruptCheckpoint(f'{path}: digest mismatch')

    reader = _Reader(body, len(CHECKPOINT_MAGIC), path)
    (header_len,) = reader.unpack('<Q')
    try:
        header = json.loads(reader.take(header_len).decode('utf-8'))
    except ValueError as e:
        raise CorruptCheckpoint(f'{path}: unreadable header ({e})')

    params, extras = OrderedDict(), OrderedDict()
    for name in header['arrays']:
        (rank,) = reader.unpack('<I')
        shape = reader.unpack(f'<{rank}Q') if rank else ()
        count = int(np.prod(shape)) if rank else 1
        array = np.frombuffer(reader.take(8 * count), dtype='<f8').reshape(shape)
        tensor = torch.from_numpy(array.astype(np.float64))
        group, key = name.split('/', 1)
        (params if group == 'params' else extras)[key] = tensor

    if reader.offset != len(body):
        raise CorruptCheckpoint(f'{path}: length mismatch')

    return Checkpoint(params=params, metadata=header['metadata'], extras=extras)


class _Reader(object):
    def __init__(self, data, offset, path):
        self.data = data
        self.offset = offset
        self.path = path

    def take(self, n):
        if self.offset + n > len(self.data):
            raise CorruptCheckpoint(f'{self.path}: length mismatch')
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
