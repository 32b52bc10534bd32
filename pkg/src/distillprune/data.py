"""Synthetic unlabeled training signals."""

import numpy as np


def synth_batch(seed, step, batch_size, seq_len):
    """Unit-normal sequences, a pure function of (seed, step)."""
    rng = np.random.default_rng([int(seed), 2, int(step)])
    return rng.standard_normal((batch_size, seq_len)).astype(np.float32)
