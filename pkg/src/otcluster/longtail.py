"""Long-tailed benchmark construction from a balanced, fully labeled source.

Per-class training counts decay geometrically from ``n_max`` down to
``n_max / gamma``; a random subset of classes is marked known, and a small
labeled subset is drawn inside each known class. Test rows are drawn
balanced across all classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bundle import (
    LABELED_KNOWN,
    TEST,
    UNLABELED_TRAIN,
    DatasetBundle,
    make_bundle,
)

HEAD = "HEAD"
MEDIUM = "MEDIUM"
TAIL = "TAIL"


class DegenerateCountsError(ValueError):
    code = "DEGENERATE"


class InsufficientSourceError(ValueError):
    code = "INSUFFICIENT_SOURCE"


@dataclass
class LongTailSpec:
    gamma: float
    known_ratio: float = 0.75
    labeled_ratio: float = 0.1
    seed: int = 0
    balanced_test: bool = True
    test_per_class: int = 15
    # n_max of the count curve; derived from source availability when None
    n_max: int | None = None

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if not 0 < self.known_ratio <= 1:
            raise ValueError("known_ratio must be in (0, 1]")
        if not 0 <= self.labeled_ratio <= 1:
            raise ValueError("labeled_ratio must be in [0, 1]")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def longtail_counts(n_max: int, num_classes: int, gamma: float) -> np.ndarray:
    """Per-class counts n_k = floor(n_max * gamma^(-(k-1)/(K-1))), non-increasing."""
    if n_max < 1 or num_classes < 1:
        raise ValueError("n_max and num_classes must be >= 1")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if gamma == 1 or num_classes == 1:
        return np.full(num_classes, n_max, dtype=np.int64)
    k = np.arange(num_classes, dtype=np.float64)
    counts = np.floor(n_max * gamma ** (-k / (num_classes - 1))).astype(np.int64)
    if counts[-1] < 1:
        raise DegenerateCountsError(
            f"n_max={n_max}, gamma={gamma} leaves the smallest class empty"
        )
    return counts


def split_known_novel(class_ids, known_ratio: float, rng: np.random.Generator):
    """Partition class ids into (known, novel); |known| = round(known_ratio * K)."""
    if not 0 < known_ratio <= 1:
        raise ValueError("known_ratio must be in (0, 1]")
    ids = np.asarray(class_ids)
    n_known = _round_half_up(known_ratio * len(ids))
    perm = rng.permutation(len(ids))
    known = set(int(ids[i]) for i in perm[:n_known])
    novel = set(int(c) for c in ids) - known
    return known, novel


def group_assignment(counts) -> np.ndarray:
    """HEAD/MEDIUM/TAIL tag per class, 3:4:3 by descending training frequency."""
    counts = np.asarray(counts)
    k = len(counts)
    # stable sort on (-count, class index): ties go to the lower index
    order = np.lexsort((np.arange(k), -counts))
    n_head = _round_half_up(0.3 * k)
    n_medium = _round_half_up(0.4 * k)
    tags = np.empty(k, dtype=object)
    tags[order[:n_head]] = HEAD
    tags[order[n_head : n_head + n_medium]] = MEDIUM
    tags[order[n_head + n_medium :]] = TAIL
    return tags


def sample_longtail(source: DatasetBundle, spec: LongTailSpec) -> DatasetBundle:
    """Draw a long-tailed train split plus balanced test set from a balanced source.

    Classes are put in a random order and assigned the count curve along it,
    so which classes become head or tail depends only on the seed. Within each
    known class, ceil(labeled_ratio * n_k) rows are tagged LABELED_KNOWN
    (always at least one); everything else drawn for training is
    UNLABELED_TRAIN. Labels of unlabeled and test rows are retained for
    evaluation only.
    """
    rng = np.random.default_rng(spec.seed)
    labels = source.labels
    if (labels == -1).any():
        raise InsufficientSourceError("source must be fully labeled")
    classes = np.unique(labels)
    k = len(classes)

    test_quota = spec.test_per_class if spec.balanced_test else 0
    per_class_rows = {int(c): np.flatnonzero(labels == c) for c in classes}
    min_avail = min(len(v) for v in per_class_rows.values())
    n_max = spec.n_max if spec.n_max is not None else min_avail - test_quota
    if n_max < 1:
        raise InsufficientSourceError(
            f"source leaves n_max={n_max} after a test quota of {test_quota}"
        )
    counts = longtail_counts(n_max, k, spec.gamma)

    rank_of_class = rng.permutation(k)  # class position -> frequency rank
    known, _novel = split_known_novel(classes, spec.known_ratio, rng)

    rows, tags = [], []
    for pos, c in enumerate(classes):
        c = int(c)
        n_c = int(counts[rank_of_class[pos]])
        pool = per_class_rows[c]
        if len(pool) < n_c + test_quota:
            raise InsufficientSourceError(
                f"class {c} has {len(pool)} rows, needs {n_c + test_quota}"
            )
        chosen = rng.choice(pool, size=n_c + test_quota, replace=False)
        train, test = chosen[:n_c], chosen[n_c:]
        # ceil keeps at least one labeled row per known class for any ratio > 0
        n_labeled = min(n_c, math.ceil(spec.labeled_ratio * n_c)) if c in known else 0
        for j, r in enumerate(train):
            rows.append(int(r))
            tags.append(LABELED_KNOWN if j < n_labeled else UNLABELED_TRAIN)
        for r in test:
            rows.append(int(r))
            tags.append(TEST)

    rows = np.array(rows)
    return make_bundle(
        embeddings=source.embeddings[rows],
        labels=labels[rows],
        split_tags=tags,
        known_classes=known,
        augmented=None if source.augmented is None else source.augmented[rows],
        class_names=source.class_names,
    )


def training_class_counts(bundle: DatasetBundle, num_classes: int | None = None) -> np.ndarray:
    """Per-class training-row counts, from ground truth: evaluation use only."""
    idx = bundle.train_idx
    labels = bundle.hidden_labels(idx)
    k = num_classes if num_classes is not None else bundle.num_classes
    return np.bincount(labels[labels >= 0], minlength=k)
