"""Datasets, stratified splitting, label masking, synthetic blobs and file formats.

On-disk format
--------------
A dataset is a UTF-8 CSV manifest whose first line is a metadata comment::

    # kdssl-dataset v1 kind=vector num_classes=4 dim=16
    id,label,f0,f1,...,f15
    syn000000,0,0.1234,...

Raster datasets use ``kind=raster`` and a ``id,label,path`` header; ``path`` is
relative to the manifest and points at a binary PGM (P5) image whose pixel
values are mapped to ``[0, 1]``. An empty label field marks an unlabeled row.
Floats are written with ``repr`` so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DatasetValidationError,
    InvalidParameterError,
    InvalidStateError,
    ParseError,
)
from .numkernel import rng_stream

ORIGINAL = "original-label"
PSEUDO = "pseudo-label"

# Class counts of the two public skin-lesion benchmarks, usable as imbalance profiles.
ISIC2018_COUNTS = (1103, 6716, 529, 325, 1087, 120, 135)
ISIC2019_COUNTS = (4522, 12875, 3323, 867, 2624, 239, 253, 628)

# Stream ids for the dataset-level random draws.
STREAM_SYNTHETIC = 1
STREAM_SPLIT = 2
STREAM_MASK = 3


@dataclass(frozen=True)
class Example:
    """One sample. ``audit_label`` keeps the hidden ground truth of unlabeled rows."""

    id: str
    payload: np.ndarray
    label: Optional[int] = None
    audit_label: Optional[int] = None
    origin: str = ORIGINAL
    iteration: Optional[int] = None

    def __post_init__(self):
        arr = np.array(self.payload, dtype=np.float64)
        if arr.ndim not in (1, 2) or arr.size == 0:
            raise ConfigurationError(f"example {self.id}: payload must be a vector or a 2-D grid")
        if not np.all(np.isfinite(arr)):
            raise ConfigurationError(f"example {self.id}: payload contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "payload", arr)

    @property
    def is_raster(self) -> bool:
        return self.payload.ndim == 2

    @property
    def true_label(self) -> Optional[int]:
        return self.label if self.origin == ORIGINAL and self.label is not None else self.audit_label


@dataclass(frozen=True)
class DatasetPools:
    """Labeled pool D_L and unlabeled pool D_U. Expansion returns a new value."""

    labeled: tuple
    unlabeled: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "labeled", tuple(self.labeled))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        lab_ids = {e.id for e in self.labeled}
        if len(lab_ids) != len(self.labeled):
            raise InvalidStateError("duplicate ids in labeled pool")
        if any(e.id in lab_ids for e in self.unlabeled):
            raise InvalidStateError("labeled and unlabeled pools overlap")
        for e in self.labeled:
            if e.label is None or not 0 <= e.label < self.num_classes:
                raise InvalidStateError(f"labeled example {e.id} has no valid label")

    def class_counts(self) -> np.ndarray:
        return np.bincount([e.label for e in self.labeled], minlength=self.num_classes)

    @property
    def size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    labeled_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train, self.val, self.test)
        if any(not 0.0 <= f <= 1.0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must lie in [0,1] and sum to 1, got {fracs}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise InvalidParameterError(f"labeled fraction must be in (0, 1], got {self.labeled_fraction}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian blobs. Bayes separability grows with ``separation / noise``."""

    counts: tuple
    dim: int = 16
    separation: float = 3.0
    noise: float = 1.0

    @property
    def num_classes(self) -> int:
        return len(self.counts)


def largest_remainder(n: int, fractions: Sequence[float], min_one: bool = True) -> list:
    """Apportion ``n`` items over ``fractions``; ties go to the earlier slot.

    With ``min_one`` every slot with a positive fraction receives at least one
    item whenever ``n`` allows it, taken from the currently largest slot.
    """
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    if min_one:
        wanted = [i for i, f in enumerate(fractions) if f > 0]
        if n >= len(wanted):
            for i in wanted:
                if sizes[i] == 0:
                    donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
                    sizes[donor] -= 1
                    sizes[i] += 1
    return sizes


def _by_class(dataset: Sequence[Example], num_classes: int) -> list:
    groups = [[] for _ in range(num_classes)]
    for idx, ex in enumerate(dataset):
        if ex.label is None:
            raise ConfigurationError(f"example {ex.id} is unlabeled")
        if not 0 <= ex.label < num_classes:
            raise ConfigurationError(f"example {ex.id} has label {ex.label} outside [0, {num_classes})")
        groups[ex.label].append(idx)
    return groups


def infer_num_classes(dataset: Sequence[Example]) -> int:
    labels = [e.label for e in dataset if e.label is not None]
    if not labels:
        raise ConfigurationError("dataset has no labeled examples")
    return max(labels) + 1


def stratified_split(dataset: Sequence[Example], spec: SplitSpec, num_classes: Optional[int] = None):
    """Split per class into (train, validation, test) by largest-remainder rounding.

    Each part keeps the input order. The per-class shuffle is driven by
    ``spec.seed`` only, so the partition is reproducible.
    """
    num_classes = num_classes or infer_num_classes(dataset)
    groups = _by_class(dataset, num_classes)
    rng = rng_stream(spec.seed, STREAM_SPLIT)
    part_of = np.empty(len(dataset), dtype=np.int64)
    for c, members in enumerate(groups):
        if not members:
            raise ConfigurationError(f"class {c} has no examples")
        members = np.array(members)[rng.permutation(len(members))]
        sizes = largest_remainder(len(members), (spec.train, spec.val, spec.test))
        bounds = np.cumsum([0] + sizes)
        for part in range(3):
            part_of[members[bounds[part]:bounds[part + 1]]] = part
    parts = ([], [], [])
    for idx, ex in enumerate(dataset):
        parts[part_of[idx]].append(ex)
    return parts


def mask_labels(train: Sequence[Example], p: float, seed: int, num_classes: Optional[int] = None) -> DatasetPools:
    """Keep ``round(p * n_c)`` labels per class (at least one); hide the rest.

    Hidden labels move to ``audit_label`` so pseudo-label precision can be
    measured later; training code never reads that field.
    """
    if not 0.0 < p <= 1.0:
        raise InvalidParameterError(f"labeled fraction must be in (0, 1], got {p}")
    num_classes = num_classes or infer_num_classes(train)
    groups = _by_class(train, num_classes)
    rng = rng_stream(seed, STREAM_MASK)
    keep = np.zeros(len(train), dtype=bool)
    for members in groups:
        if not members:
            continue
        n = len(members)
        k = min(n, max(1, math.floor(p * n + 0.5)))
        chosen = np.array(members)[rng.permutation(n)[:k]]
        keep[chosen] = True
    labeled, unlabeled = [], []
    for idx, ex in enumerate(train):
        if keep[idx]:
            labeled.append(replace(ex, origin=ORIGINAL, iteration=None))
        else:
            unlabeled.append(replace(ex, label=None, audit_label=ex.label, origin=ORIGINAL, iteration=None))
    return DatasetPools(labeled, unlabeled, num_classes)


def class_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Centers at distance ``separation`` from the origin along random directions.

    When the classes fit in the space the directions are orthonormal, so every
    pair of centers is ``separation * sqrt(2)`` apart.
    """
    C, d = spec.num_classes, spec.dim
    g = rng.standard_normal((d, max(C, 1)))
    if C <= d:
        q, r = np.linalg.qr(g)
        dirs = (q * np.sign(np.diag(r))).T[:C]
    else:
        dirs = (g / np.linalg.norm(g, axis=0)).T
    return spec.separation * dirs


def generate_synthetic(spec: SyntheticSpec, seed: int) -> list:
    """Imbalanced isotropic Gaussian blobs, class-major order, ids ``syn000000``..."""
    if spec.num_classes < 2:
        raise ConfigurationError("need at least two classes")
    if any(int(c) < 1 for c in spec.counts):
        raise ConfigurationError(f"every class count must be >= 1, got {spec.counts}")
    if spec.dim < 2:
        raise ConfigurationError(f"dimension must be >= 2, got {spec.dim}")
    if not spec.separation > 0 or not spec.noise >= 0:
        raise ConfigurationError("separation must be positive and noise non-negative")
    rng = rng_stream(seed, STREAM_SYNTHETIC)
    centers = class_centers(spec, rng)
    out = []
    for c, n in enumerate(spec.counts):
        pts = centers[c] + spec.noise * rng.standard_normal((int(n), spec.dim))
        for row in pts:
            out.append(Example(f"syn{len(out):06d}", row, label=c))
    return out


# -- file formats ---------------------------------------------------------------

_MAGIC = "# kdssl-dataset v1"


def _fmt_label(ex: Example) -> str:
    return "" if ex.label is None else str(int(ex.label))


def save_dataset(dataset: Sequence[Example], path, num_classes: Optional[int] = None) -> None:
    """Write a manifest (and PGM images for raster payloads) at ``path``."""
    if not dataset:
        raise ConfigurationError("refusing to write an empty dataset")
    path = Path(path)
    num_classes = num_classes or infer_num_classes(dataset)
    raster = dataset[0].is_raster
    if any(e.is_raster != raster for e in dataset):
        raise ConfigurationError("cannot mix vector and raster payloads in one dataset")
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if raster:
        img_dir = path.parent / (path.stem + "_images")
        img_dir.mkdir(exist_ok=True)
        buf.write(f"{_MAGIC} kind=raster num_classes={num_classes}\n")
        writer.writerow(["id", "label", "path"])
        for ex in dataset:
            rel = f"{img_dir.name}/{ex.id}.pgm"
            write_pgm(path.parent / rel, ex.payload)
            writer.writerow([ex.id, _fmt_label(ex), rel])
    else:
        dim = dataset[0].payload.size
        buf.write(f"{_MAGIC} kind=vector num_classes={num_classes} dim={dim}\n")
        writer.writerow(["id", "label"] + [f"f{j}" for j in range(dim)])
        for ex in dataset:
            if ex.payload.size != dim:
                raise ConfigurationError(f"example {ex.id} has dimension {ex.payload.size}, expected {dim}")
            writer.writerow([ex.id, _fmt_label(ex)] + [repr(float(v)) for v in ex.payload])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _parse_meta(line: str, path) -> dict:
    if not line.startswith(_MAGIC):
        raise ParseError(f"{path}:1: missing '{_MAGIC}' metadata line")
    meta = {}
    for tok in line[len(_MAGIC):].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise ParseError(f"{path}:1: bad metadata token {tok!r}")
        meta[key] = val
    if meta.get("kind") not in ("vector", "raster"):
        raise ParseError(f"{path}:1: kind must be 'vector' or 'raster'")
    try:
        meta["num_classes"] = int(meta["num_classes"])
    except (KeyError, ValueError):
        raise ParseError(f"{path}:1: num_classes missing or not an integer") from None
    if meta["num_classes"] < 2:
        raise DatasetValidationError(f"{path}:1: num_classes must be >= 2")
    return meta


def load_dataset(path) -> list:
    """Read a manifest written by :func:`save_dataset`."""
    ds, _ = load_dataset_with_meta(path)
    return ds


def load_dataset_with_meta(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}:1: empty dataset file")
    meta = _parse_meta(lines[0], path)
    C = meta["num_classes"]
    rows = list(csv.reader(lines[1:]))
    if not rows:
        raise ParseError(f"{path}:2: missing header row")
    header = rows[0]
    if meta["kind"] == "vector":
        dim = len(header) - 2
        expected = ["id", "label"] + [f"f{j}" for j in range(dim)]
        if dim < 1 or header != expected:
            raise ParseError(f"{path}:2: header must be id,label,f0..f{{d-1}}")
    elif header != ["id", "label", "path"]:
        raise ParseError(f"{path}:2: header must be id,label,path")
    out, seen = [], set()
    for offset, row in enumerate(rows[1:]):
        lineno = offset + 3
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        ident, lab = row[0], row[1].strip()
        if not ident or ident in seen:
            raise ParseError(f"{path}:{lineno}: missing or duplicate id {ident!r}")
        seen.add(ident)
        label = None
        if lab:
            try:
                label = int(lab)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: label {lab!r} is not an integer") from None
            if not 0 <= label < C:
                raise DatasetValidationError(f"{path}:{lineno}: label {label} outside declared num_classes={C}")
        if meta["kind"] == "vector":
            try:
                payload = np.array([float(v) for v in row[2:]], dtype=np.float64)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric feature value") from None
        else:
            payload = read_pgm(path.parent / row[2])
        try:
            out.append(Example(ident, payload, label=label))
        except ConfigurationError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not out:
        raise ParseError(f"{path}: no data rows")
    return out, meta


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM. 8-bit when every pixel is an exact multiple of 1/255, else 16-bit."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.min() < 0.0 or img.max() > 1.0:
        raise ConfigurationError("raster payload must be a 2-D grid with values in [0, 1]")
    q8 = np.round(img * 255.0)
    if np.array_equal(q8 / 255.0, img):
        maxval, raw = 255, q8.astype(np.uint8).tobytes()
    else:
        maxval, raw = 65535, np.round(img * 65535.0).astype(">u2").tobytes()
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + raw)


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"{path}: image file not found")
    data = path.read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header at byte {pos}")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ParseError(f"{path}: non-integer PGM header field") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ParseError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    need = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < need:
        raise ParseError(f"{path}: pixel data truncated at byte offset {len(data)}")
    pix = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return pix.astype(np.float64) / float(maxval)


def stack_payloads(examples: Sequence[Example]) -> np.ndarray:
    """Stack payloads into ``[N, ...]`` float64 (vectors or grids of equal shape)."""
    if not examples:
        raise ConfigurationError("cannot stack an empty example sequence")
    shape = examples[0].payload.shape
    if any(e.payload.shape != shape for e in examples):
        raise ConfigurationError("payload shapes differ; resize rasters before stacking")
    return np.stack([e.payload for e in examples])


def labels_of(examples: Sequence[Example]) -> np.ndarray:
    return np.array([e.label for e in examples], dtype=np.int64)
