"""Master-seed fan-out.

A single integer seed reproduces a whole run. Each stage gets its own
seed by hashing ``"<master>/<stage>"`` with SHA-256 and keeping the first
eight bytes (big-endian), so stages can be re-run independently and
adding a stage never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *stage: str | int) -> int:
    key = "/".join([str(int(master)), *map(str, stage)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def rng_for(master: int, *stage: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *stage))
