"""Named random streams derived from a user-visible master seed."""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("data", "trust", "init", "minibatch", "noise", "probe")


def stream_seed(master_seed: int, name: str, run_index: int = 0) -> int:
    """Stable 64-bit seed for ``(master_seed, run_index, name)``."""
    digest = hashlib.sha256(f"{master_seed}:{run_index}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def make_streams(
    master_seed: int,
    run_index: int = 0,
    overrides: dict[str, int] | None = None,
) -> dict[str, np.random.Generator]:
    overrides = overrides or {}
    return {
        name: np.random.default_rng(overrides.get(name, stream_seed(master_seed, name, run_index)))
        for name in STREAMS
    }
