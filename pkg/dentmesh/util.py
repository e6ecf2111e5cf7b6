import hashlib
import json
import logging
from functools import wraps
from pathlib import Path
from time import time

import numpy as np

logger = logging.getLogger(__name__)


def timing(f, level=logging.DEBUG, verbose=False):
    @wraps(f)
    def wrap(*args, **kw):
        ts = time()
        result = f(*args, **kw)
        te = time()
        args_description = f"args:[{args}, {kw}]" if verbose else ''
        logger.log(level, f'func:{f.__name__} {args_description} took: {te-ts:2.4f}sec')
        return result

    return wrap


def file_hash(path):
    """SHA-256 hex digest of a file's content"""
    h = hashlib.sha256()
    with open(path, mode='rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def to_jsonable(value):
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path, data):
    """Writes data as sorted, indented JSON so identical inputs give identical bytes"""
    with open(path, 'wt', encoding='utf8') as f:
        json.dump(to_jsonable(data), f, indent=2, sort_keys=True)
        f.write('\n')
    logger.debug(f"Wrote {path}")
    return path


def read_json(path):
    with open(path, 'rt', encoding='utf8') as f:
        return json.load(f)


def unit_rows(a, eps=0.0):
    """Normalizes the rows of a; rows with length <= eps are left untouched. Returns (rows, lengths)"""
    lengths = np.linalg.norm(a, axis=1)
    out = a.copy()
    ok = lengths > eps
    out[ok] /= lengths[ok, None]
    return out, lengths
