"""Named random substreams derived from a single run seed."""
import zlib
from typing import Union

import numpy as np

Key = Union[str, int]


def _key_words(names) -> list:
    words = []
    for name in names:
        if isinstance(name, str):
            words.append(zlib.crc32(name.encode("utf-8")))
        else:
            words.append(int(name))
    return words


def substream(seed: int, *names: Key) -> np.random.Generator:
    """Independent generator for (seed, names...); identical keys give identical streams."""
    return np.random.default_rng([int(seed), *_key_words(names)])


def torch_seed(seed: int, *names: Key) -> int:
    """63-bit integer seed for torch.Generator / torch.manual_seed."""
    return int(substream(seed, *names).integers(0, 2**63 - 1))
