# -*- coding: utf-8 -*-
from typing import Union

import numpy as np

# Stream tags keep derived generators for different purposes independent.
STREAM_MODEL = 1
STREAM_ADAPTER = 2
STREAM_TASK = 3
STREAM_CLIENTS = 4
STREAM_SAMPLING = 5
STREAM_LOCAL = 6
STREAM_GROUPING = 7
STREAM_FUSION = 8
STREAM_TEST = 9


def derive_seed(*keys: Union[int, np.integer]) -> int:
    """
    Collapse an ordered tuple of non-negative integer keys into one 63-bit seed.
    """
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def derive_rng(*keys: Union[int, np.integer]) -> np.random.Generator:
    """
    Independent generator for (run seed, stream, stage, round, client, ...).
    Same keys -> same stream, regardless of which thread asks.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
