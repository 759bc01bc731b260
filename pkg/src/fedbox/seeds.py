"""Deterministic 64-bit seed derivation.

Every RNG stream in a run is derived from the global seed with splitmix64,
so adding clients or reordering phases never perturbs existing streams.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1

# Stream tags; client i uses TAG_CLIENT_BASE + i.
TAG_TASK_DATA = 1
TAG_SOURCE_DATA = 2
TAG_PARTITION = 3
TAG_BLACKBOX = 4
TAG_SERVER_INIT = 5
TAG_SAMPLER = 6
TAG_CLIENT_BASE = 0x10000


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def mix64(seed: int, tag: int) -> int:
    """Derive an independent stream seed from (global seed, tag)."""
    return splitmix64((seed & _MASK) ^ splitmix64(tag & _MASK))


def client_seed(global_seed: int, client_id: int) -> int:
    return mix64(global_seed, TAG_CLIENT_BASE + client_id)
