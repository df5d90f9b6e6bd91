import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from otcluster.bundle import LABELED_KNOWN, TEST, UNLABELED_TRAIN, make_bundle


def toy_bundle(n_per_class=8, k=3, dim=4, seed=0, with_augmented=False):
    """Small bundle with one labeled row per known class; classes 0..k-2 known."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(k, dim)) * 5
    rows, labels, tags = [], [], []
    for c in range(k):
        pts = means[c] + rng.normal(size=(n_per_class, dim))
        rows.append(pts)
        labels.extend([c] * n_per_class)
        for i in range(n_per_class):
            if c < k - 1 and i == 0:
                tags.append(LABELED_KNOWN)
            elif i < n_per_class - 2:
                tags.append(UNLABELED_TRAIN)
            else:
                tags.append(TEST)
    emb = np.concatenate(rows).astype(np.float32)
    aug = emb + 0.01 * rng.normal(size=emb.shape).astype(np.float32) if with_augmented else None
    return make_bundle(emb, labels, tags, known_classes=range(k - 1), augmented=aug)


def balanced_source(k=6, per_class=40, dim=5, seed=0, sep=6.0):
    """Fully labeled balanced source for the long-tail sampler."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(k, dim))
    means *= sep / max(np.linalg.norm(means, axis=1).min(), 1e-9)
    emb, labels = [], []
    for c in range(k):
        emb.append(means[c] + rng.normal(size=(per_class, dim)))
        labels.extend([c] * per_class)
    emb = np.concatenate(emb).astype(np.float32)
    tags = [TEST] * len(labels)  # fully labeled source: tags are placeholders
    return make_bundle(emb, labels, tags, known_classes=range(k))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
