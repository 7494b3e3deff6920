"""Shared numerical test utilities: finite differences and random batches."""

import numpy as np

from fcre.losses import Batch


def num_grad(fn, vec, eps=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    vec = np.asarray(vec, dtype=np.float64)
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        up = vec.copy()
        up[i] += eps
        down = vec.copy()
        down[i] -= eps
        grad[i] = (fn(up) - fn(down)) / (2.0 * eps)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def random_batch(rng, size=None, embed_dim=4, k_desc=2, n_relations=2):
    """A well-conditioned random batch: unit-ish rows, every label present."""
    if size is None:
        size = int(rng.integers(4, 8))
    labels = np.concatenate(
        [np.arange(n_relations), rng.integers(0, n_relations, size=size - n_relations)]
    )
    rng.shuffle(labels)
    z = rng.normal(size=(size, embed_dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    z *= rng.uniform(0.5, 1.5, size=(size, 1))
    desc_by_rel = {}
    for rel in range(n_relations):
        block = rng.normal(size=(k_desc, embed_dim))
        block /= np.linalg.norm(block, axis=1, keepdims=True)
        desc_by_rel[rel] = block
    descriptions = np.stack([desc_by_rel[int(l)] for l in labels])
    return Batch(z=z, labels=labels, descriptions=descriptions)
