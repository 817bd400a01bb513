import hashlib
from pathlib import Path
from typing import Iterable

import numpy as np

def calculate_file_hash(file_content: bytes) -> str:
    """
    Calculate SHA256 hash of file content.
    """
    return hashlib.sha256(file_content).hexdigest()

def hash_path(path) -> str:
    return calculate_file_hash(Path(path).read_bytes())

def pair_rng(master_seed: int, pair_id: int, stream: int = 0) -> np.random.Generator:
    """
    Per-pair random stream.

    Philox is counter-based, so the stream for pair i depends only on
    (master_seed, i, stream) and never on generation order or worker count.
    """
    seq = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, pair_id, stream])
    return np.random.Generator(np.random.Philox(seq))

def bitmask(part_ids: Iterable[int]) -> int:
    mask = 0
    for pid in part_ids:
        mask |= 1 << (pid - 1)
    return mask

def from_bitmask(mask: int) -> frozenset:
    ids = set()
    pid = 1
    while mask:
        if mask & 1:
            ids.add(pid)
        mask >>= 1
        pid += 1
    return frozenset(ids)

