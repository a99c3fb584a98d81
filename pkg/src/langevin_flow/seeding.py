"""
Named random substreams.

All randomness in a run derives from one integer seed. Each consumer asks for
its own stream by name plus integer keys (epoch, batch, trial id, ...), so any
draw can be reproduced without carrying generator state around.
"""

import numpy as np

STREAMS = {
    'data': 0,
    'init': 1,
    'dropout': 2,
    'ou_noise': 3,
    'shuffle': 4,
}


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Build the generator for stream ``name`` at position ``keys``.

    Args:
        seed: Run-level seed
        name: One of ``STREAMS``
        *keys: Non-negative integers locating the draw inside the stream

    Returns:
        A fresh ``numpy.random.Generator``
    """
    if name not in STREAMS:
        raise ValueError(f"Unknown random stream '{name}'. Available streams: {list(STREAMS)}")
    entropy = [int(seed), STREAMS[name]] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
