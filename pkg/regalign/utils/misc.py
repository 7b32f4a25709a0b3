from concurrent.futures import ProcessPoolExecutor

import numpy as np
import torch
from tqdm import tqdm

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
_MASK64 = 0xffffffffffffffff


def fnv1a_64(data, value=FNV_OFFSET):
    for byte in data:
        value ^= byte
        value = (value * FNV_PRIME) & _MASK64
    return value


def fnv1a_hex(data):
    return f'{fnv1a_64(data):016x}'


def tensors_digest(tensors):
    """Digest of named float arrays, independent of dict insertion order."""
    value = FNV_OFFSET
    for name in sorted(tensors):
        array = tensors[name]
        if isinstance(array, torch.Tensor):
            array = array.detach().cpu().numpy()
        array = np.ascontiguousarray(array, dtype='<f8')
        value = fnv1a_64(name.encode('utf-8'), value)
        value = fnv1a_64(np.asarray(array.shape, dtype='<i8').tobytes(), value)
        value = fnv1a_64(array.tobytes(), value)
    return f'{value:016x}'


def derive_seed(*keys):
    """Stable 32-bit seed from a master seed and any number of integer ids."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1)
    return int(state[0])


def get_bbox_from_mask(mask):
    """Tight pixel-edge box (x1, y1, x2, y2) around the nonzero pixels."""
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    rmin, rmax = np.where(rows)[0][[0, -1]]
    cmin, cmax = np.where(cols)[0][[0, -1]]

    return float(cmin), float(rmin), float(cmax + 1), float(rmax + 1)


def parallel_map(array, worker, const_args=None, n_jobs=1, desc=None):
    """Ordered map with an optional process pool.

    Results are returned in input order regardless of completion order,
    so the output never depends on the worker schedule.
    """
    const_args = dict() if const_args is None else const_args
    if n_jobs <= 1 or len(array) <= 1:
        return [worker(a, **const_args) for a in tqdm(array, desc=desc, ncols=100, disable=desc is None)]

    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        futures = [pool.submit(worker, a, **const_args) for a in array]
        return [future.result() for future in tqdm(futures, desc=desc, ncols=100, disable=desc is None)]
