import numpy as np

from seqbench.ehr import Batch


def random_batch(rng, vocab_size=20, batch=3, steps=6, codes=3, full_first=True):
    """Right-padded batch with random lengths; row 0 spans all ``steps`` when ``full_first``."""
    lengths = rng.integers(1, steps + 1, size=batch)
    if full_first:
        lengths[0] = steps
    ids = rng.integers(1, vocab_size, size=(batch, steps, codes))
    n_codes = rng.integers(1, codes + 1, size=(batch, steps))
    code_mask = (np.arange(codes)[None, None, :] < n_codes[:, :, None]).astype(float)
    visit_mask = (np.arange(steps)[None, :] < lengths[:, None]).astype(float)
    code_mask *= visit_mask[:, :, None]
    ids = np.where(code_mask > 0, ids, 0)
    delta = np.where(visit_mask > 0, rng.integers(0, 400, size=(batch, steps)), 0).astype(float)
    delta[:, 0] = 0.0
    labels = np.zeros(batch)
    labels[: max(1, batch // 2)] = 1.0
    return Batch(ids, code_mask, visit_mask, delta, labels)
