"""Named random substreams derived from one experiment seed."""
import hashlib

import numpy as np

STREAMS = ("split", "episode", "jigsaw", "rotation", "init", "dropout", "validation", "batch", "pool")


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (plus optional integer keys such as an episode index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name), *map(int, extra)]))


def torch_seed(seed: int, name: str, *extra: int) -> int:
    """63-bit integer seed for ``torch.manual_seed`` drawn from the named substream."""
    return int(substream(seed, name, *extra).integers(0, 2**63 - 1))
