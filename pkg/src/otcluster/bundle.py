"""Dataset bundle: embedding matrices plus per-row label/split tags.

On disk a bundle is a directory with ``manifest.json``, ``embeddings.bin``
(raw little-endian float32, row-major), an optional ``augmented.bin`` of the
same shape, ``rows.tsv`` (``row_index<TAB>label<TAB>split_tag``), and an
optional ``classes.txt``. The format is lossless: save followed by load is
bit-identical on the matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
UNLABELED = -1

LABELED_KNOWN = "LABELED_KNOWN"
UNLABELED_TRAIN = "UNLABELED_TRAIN"
TEST = "TEST"

SPLIT_TAGS = (LABELED_KNOWN, UNLABELED_TRAIN, TEST)
_SPLIT_CODE = {tag: i for i, tag in enumerate(SPLIT_TAGS)}


class BundleError(Exception):
    """Base class for bundle I/O and consistency failures."""

    code = "BUNDLE_ERROR"


class MissingFileError(BundleError):
    code = "MISSING_FILE"


class ManifestMismatchError(BundleError):
    code = "MANIFEST_MISMATCH"


class NonFiniteValueError(BundleError):
    code = "NONFINITE_VALUE"


class InvalidSplitTagError(BundleError):
    code = "INVALID_SPLIT_TAG"


class IOFailure(BundleError):
    code = "IO_FAILURE"


@dataclass(frozen=True)
class Diagnostic:
    """One violated invariant; ``row`` is -1 for bundle-level problems."""

    code: str
    row: int
    message: str

    def __str__(self) -> str:
        where = f" (row={self.row})" if self.row >= 0 else ""
        return f"{self.code}{where}: {self.message}"


@dataclass
class BundleManifest:
    n: int
    dim: int
    dtype: str
    has_augmented: bool
    num_classes: int
    split_counts: dict[str, int]
    format_version: int = FORMAT_VERSION
    # known-class ids are part of the bundle state and must round-trip
    known_classes: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BundleManifest":
        raw = json.loads(text)
        return cls(
            n=int(raw["n"]),
            dim=int(raw["dim"]),
            dtype=str(raw["dtype"]),
            has_augmented=bool(raw["has_augmented"]),
            num_classes=int(raw["num_classes"]),
            split_counts={str(k): int(v) for k, v in raw["split_counts"].items()},
            format_version=int(raw.get("format_version", FORMAT_VERSION)),
            known_classes=[int(c) for c in raw.get("known_classes", [])],
        )


@dataclass(frozen=True)
class DatasetBundle:
    """Immutable container for embeddings and per-row supervision state.

    ``labels`` holds ground truth wherever it is known, including rows tagged
    UNLABELED_TRAIN whose labels were kept for evaluation. Training code must
    go through :meth:`training_labels`, which masks those rows; evaluation
    code may call :meth:`hidden_labels` explicitly.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # int8 codes into SPLIT_TAGS
    known_classes: frozenset[int]
    augmented: np.ndarray | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        for arr in (self.embeddings, self.labels, self.split, self.augmented):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_classes(self) -> int:
        known = self.labels[self.labels != UNLABELED]
        top = int(known.max()) + 1 if known.size else 0
        return max(top, len(self.class_names) if self.class_names else 0)

    def split_tags(self) -> np.ndarray:
        return np.array(SPLIT_TAGS)[self.split]

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == _SPLIT_CODE[tag])

    @property
    def labeled_idx(self) -> np.ndarray:
        return self.indices(LABELED_KNOWN)

    @property
    def unlabeled_idx(self) -> np.ndarray:
        return self.indices(UNLABELED_TRAIN)

    @property
    def test_idx(self) -> np.ndarray:
        return self.indices(TEST)

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(self.split != _SPLIT_CODE[TEST])

    def training_labels(self) -> np.ndarray:
        """Labels visible to training: UNLABELED sentinel except on LABELED_KNOWN rows."""
        out = np.full(self.n, UNLABELED, dtype=np.int64)
        idx = self.labeled_idx
        out[idx] = self.labels[idx]
        return out

    def hidden_labels(self, rows: np.ndarray) -> np.ndarray:
        """Ground-truth labels for evaluation paths only."""
        return self.labels[rows].copy()

    def augmented_or_none(self) -> np.ndarray | None:
        return self.augmented

    def manifest(self) -> BundleManifest:
        counts = {tag: int((self.split == code).sum()) for tag, code in _SPLIT_CODE.items()}
        return BundleManifest(
            n=self.n,
            dim=self.dim,
            dtype="float32",
            has_augmented=self.augmented is not None,
            num_classes=self.num_classes,
            split_counts=counts,
            known_classes=sorted(self.known_classes),
        )


def make_bundle(embeddings, labels, split_tags, known_classes, augmented=None, class_names=None) -> DatasetBundle:
    """Build a bundle from plain arrays; split_tags is a sequence of tag strings."""
    emb = np.ascontiguousarray(embeddings, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64).copy()
    codes = np.empty(len(labels), dtype=np.int8)
    for i, tag in enumerate(split_tags):
        if tag not in _SPLIT_CODE:
            raise InvalidSplitTagError(f"unknown split tag {tag!r} at row {i}")
        codes[i] = _SPLIT_CODE[tag]
    aug = None if augmented is None else np.ascontiguousarray(augmented, dtype=np.float32)
    names = tuple(class_names) if class_names is not None else None
    return DatasetBundle(
        embeddings=emb,
        labels=labels,
        split=codes,
        known_classes=frozenset(int(c) for c in known_classes),
        augmented=aug,
        class_names=names,
    )


def _read_matrix(path: Path, n: int, dim: int) -> np.ndarray:
    expected = n * dim * 4
    actual = path.stat().st_size
    if actual != expected:
        raise ManifestMismatchError(
            f"{path.name}: declared {n}x{dim} needs {expected} bytes, file holds {actual}"
        )
    data = np.fromfile(path, dtype="<f4")
    return np.ascontiguousarray(data.reshape(n, dim))


def load_bundle(path) -> DatasetBundle:
    """Load a bundle directory, checking all invariants."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise MissingFileError(f"no manifest.json in {root}")
    manifest = BundleManifest.from_json(manifest_path.read_text(encoding="utf-8"))

    emb_path = root / "embeddings.bin"
    if not emb_path.is_file():
        raise MissingFileError(f"no embeddings.bin in {root}")
    embeddings = _read_matrix(emb_path, manifest.n, manifest.dim)

    augmented = None
    if manifest.has_augmented:
        aug_path = root / "augmented.bin"
        if not aug_path.is_file():
            raise MissingFileError(f"manifest declares augmented view but {aug_path} is missing")
        augmented = _read_matrix(aug_path, manifest.n, manifest.dim)

    rows_path = root / "rows.tsv"
    if not rows_path.is_file():
        raise MissingFileError(f"no rows.tsv in {root}")
    labels = np.full(manifest.n, UNLABELED, dtype=np.int64)
    codes = np.full(manifest.n, -1, dtype=np.int8)
    with rows_path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            idx_s, label_s, tag = line.split("\t")
            i = int(idx_s)
            if not 0 <= i < manifest.n:
                raise ManifestMismatchError(f"rows.tsv row index {i} outside [0, {manifest.n})")
            if tag not in _SPLIT_CODE:
                raise InvalidSplitTagError(f"row {i}: unknown split tag {tag!r}")
            labels[i] = int(label_s)
            codes[i] = _SPLIT_CODE[tag]
    if (codes < 0).any():
        missing = int(np.flatnonzero(codes < 0)[0])
        raise ManifestMismatchError(f"rows.tsv has no entry for row {missing}")

    class_names = None
    names_path = root / "classes.txt"
    if names_path.is_file():
        class_names = tuple(names_path.read_text(encoding="utf-8").splitlines())

    bundle = DatasetBundle(
        embeddings=embeddings,
        labels=labels,
        split=codes,
        known_classes=frozenset(manifest.known_classes),
        augmented=augmented,
        class_names=class_names,
    )
    problems = validate_bundle(bundle)
    for diag in problems:
        if diag.code == NonFiniteValueError.code:
            raise NonFiniteValueError(str(diag))
    if problems:
        raise ManifestMismatchError("; ".join(str(d) for d in problems))
    return bundle


def save_bundle(bundle: DatasetBundle, path) -> None:
    """Write a bundle directory such that load_bundle reproduces it exactly."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "manifest.json").write_text(bundle.manifest().to_json(), encoding="utf-8")
        bundle.embeddings.astype("<f4", copy=False).tofile(root / "embeddings.bin")
        if bundle.augmented is not None:
            bundle.augmented.astype("<f4", copy=False).tofile(root / "augmented.bin")
        tags = bundle.split_tags()
        with (root / "rows.tsv").open("w", encoding="utf-8") as fh:
            for i in range(bundle.n):
                fh.write(f"{i}\t{int(bundle.labels[i])}\t{tags[i]}\n")
        if bundle.class_names is not None:
            (root / "classes.txt").write_text(
                "\n".join(bundle.class_names) + "\n", encoding="utf-8"
            )
    except OSError as exc:
        raise IOFailure(f"writing bundle to {root}: {exc}") from exc


def validate_bundle(bundle: DatasetBundle) -> list[Diagnostic]:
    """Check every bundle invariant; returns an empty list iff all hold."""
    out: list[Diagnostic] = []

    bad = ~np.isfinite(bundle.embeddings)
    if bad.any():
        for row in np.flatnonzero(bad.any(axis=1)):
            out.append(Diagnostic("NONFINITE_VALUE", int(row), "non-finite embedding entry"))
    if bundle.augmented is not None:
        if bundle.augmented.shape != bundle.embeddings.shape:
            out.append(
                Diagnostic(
                    "AUGMENTED_SHAPE_MISMATCH",
                    -1,
                    f"augmented {bundle.augmented.shape} != embeddings {bundle.embeddings.shape}",
                )
            )
        else:
            bad = ~np.isfinite(bundle.augmented)
            for row in np.flatnonzero(bad.any(axis=1)):
                out.append(Diagnostic("NONFINITE_VALUE", int(row), "non-finite augmented entry"))

    labeled_code = _SPLIT_CODE[LABELED_KNOWN]
    test_code = _SPLIT_CODE[TEST]
    for row in np.flatnonzero(bundle.split == labeled_code):
        label = int(bundle.labels[row])
        if label == UNLABELED:
            out.append(Diagnostic("MISSING_LABEL", int(row), "LABELED_KNOWN row without a label"))
        elif label not in bundle.known_classes:
            out.append(
                Diagnostic(
                    "KNOWN_SPLIT_VIOLATION",
                    int(row),
                    f"LABELED_KNOWN row labeled {label}, not a known class",
                )
            )
    for row in np.flatnonzero(bundle.split == test_code):
        if int(bundle.labels[row]) == UNLABELED:
            out.append(Diagnostic("MISSING_LABEL", int(row), "TEST row without ground truth"))
    return out
