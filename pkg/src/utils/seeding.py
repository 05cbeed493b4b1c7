"""
Seed derivation for reproducible runs.

All randomness in a run flows from one root seed. Each component draws its
own stream from ``derive_seed(root, tag)`` so adding a component never shifts
the streams of the existing ones.
"""
import hashlib

import numpy as np

SEED_MASK = (1 << 63) - 1


def derive_seed(root: int, tag: str) -> int:
    """
    Derive a component seed from the root seed and a component tag.

    Args:
        root: Root seed of the invocation.
        tag: Component tag such as "init", "masks" or "synth/S003".

    Returns:
        Non-negative 63-bit integer seed.
    """
    digest = hashlib.sha256(f"{int(root)}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & SEED_MASK


def make_rng(root: int, tag: str) -> np.random.Generator:
    """Numpy generator for one component stream."""
    return np.random.default_rng(derive_seed(root, tag))

