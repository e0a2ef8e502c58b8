"""Dataset loading and preparation: IDX archives, label subsetting, synthetic
blobs, and the bundled desk-scale handwritten-digits set.

All images are float64 in [0, 1] with shape (N, 1, H, W); labels are int64 in
[0, num_classes)."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Fashion-MNIST source indices for the five-class subset
# (coat, trouser, sandal, sneaker, bag -> 0..4)
FASHION_MNIST5_KEEP = (4, 1, 5, 7, 8)
FASHION_MNIST5_NAMES = ("coat", "trouser", "sandal", "sneaker", "bag")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, 1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        if self.images.ndim != 4:
            raise ContractError(f"{self.name}: images must be (N, C, H, W)")
        if len(self.images) != len(self.labels):
            raise ContractError(f"{self.name}: image and label counts disagree")
        if self.num_classes < 1:
            raise ContractError(f"{self.name}: num_classes must be positive")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError(f"{self.name}: pixels outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"{self.name}: labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def of_class(self, label: int) -> np.ndarray:
        return self.images[self.labels == label]

    def take(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------


def _read_file(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        rest = fh.read()
    raw = head + rest
    if head == b"\x1f\x8b":  # gzip magic
        return gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path, magic: int, rank: int) -> np.ndarray:
    if len(raw) < 4 * (1 + rank):
        raise FormatError(f"{path}: truncated IDX header")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{rank}I", raw, 4)
    count = int(np.prod(dims)) if dims else 0
    payload = raw[4 * (1 + rank) :]
    if len(payload) != count:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, header implies {count}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, name: str | None = None, num_classes: int | None = None) -> LabeledDataset:
    """Load an IDX image/label archive pair (gzip transparently accepted).

    Pixels are scaled from [0, 255] bytes to [0, 1]; item counts in the two
    headers must agree."""
    imgs = _parse_idx(_read_file(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_file(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if imgs.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path}: holds {imgs.shape[0]} images but {labels_path} holds "
            f"{labels.shape[0]} labels"
        )
    n, h, w = imgs.shape
    images = imgs.astype(np.float64).reshape(n, 1, h, w) / 255.0
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(images, labels.astype(np.int64), num_classes, name or str(images_path))


def write_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Inverse of load_idx; byte-exact round trip for well-formed archives."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ContractError("IDX export supports single-channel images only")
    pixels = np.rint(ds.images * 255.0).clip(0, 255).astype(np.uint8).reshape(n, h, w)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def subset_labels(ds: LabeledDataset, keep) -> LabeledDataset:
    """Retain only the listed source labels, remapped to 0..len(keep)-1 in the
    given order; relative item order is preserved."""
    keep = list(keep)
    if not keep:
        raise ContractError("subset_labels: keep list is empty")
    present = set(np.unique(ds.labels).tolist())
    for lab in keep:
        if lab not in present:
            raise ContractError(f"subset_labels: label {lab} not present in {ds.name}")
    remap = {src: dst for dst, src in enumerate(keep)}
    mask = np.isin(ds.labels, keep)
    labels = np.array([remap[int(l)] for l in ds.labels[mask]], dtype=np.int64)
    return LabeledDataset(ds.images[mask], labels, len(keep), f"{ds.name}[{len(keep)} classes]")


def subsample_per_class(ds: LabeledDataset, per_class: int, rng) -> LabeledDataset:
    """At most per_class items of each label, chosen uniformly without
    replacement; output grouped by original order within each class draw."""
    if per_class < 1:
        raise ContractError("per_class must be positive")
    picks = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) > per_class:
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        picks.append(idx)
    order = np.concatenate(picks) if picks else np.array([], dtype=np.int64)
    return ds.take(order)


def split_train_test(ds: LabeledDataset, test_fraction: float, rng) -> tuple[LabeledDataset, LabeledDataset]:
    """Per-class shuffled split."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError("test_fraction must lie in (0, 1)")
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = rng.permutation(idx)
        n_test = max(1, int(round(len(idx) * test_fraction)))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return ds.take(np.concatenate(train_idx)), ds.take(np.concatenate(test_idx))


# ---------------------------------------------------------------------------
# synthetic and bundled datasets
# ---------------------------------------------------------------------------


def synth_blobs(
    num_classes: int,
    per_class: int,
    dims,
    seed: int,
    spread: float = 0.03,
    min_separation: float = 0.35,
) -> LabeledDataset:
    """Gaussian class blobs clipped to [0, 1]; deterministic for a seed.

    Class centers are rejection-sampled to pairwise distance >= min_separation,
    which with the default spread puts the analytic Bayes error below 1e-6."""
    if num_classes < 1 or per_class < 1:
        raise ContractError("num_classes and per_class must be positive")
    if isinstance(dims, int):
        shape = (1, 1, dims)
    else:
        shape = (1,) + tuple(int(v) for v in dims)
    d = int(np.prod(shape))
    if d < 1:
        raise ContractError("dims must be positive")
    rng = np.random.default_rng(seed)
    centers = []
    while len(centers) < num_classes:
        cand = rng.uniform(0.25, 0.75, size=d)
        if all(np.linalg.norm(cand - c) >= min_separation for c in centers):
            centers.append(cand)
    images = np.empty((num_classes * per_class,) + shape)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c, center in enumerate(centers):
        block = rng.normal(center, spread, size=(per_class, d))
        images[c * per_class : (c + 1) * per_class] = block.clip(0.0, 1.0).reshape((per_class,) + shape)
        labels[c * per_class : (c + 1) * per_class] = c
    return LabeledDataset(images, labels, num_classes, f"blobs{num_classes}x{per_class}")


def load_digits_desk(seed: int = 0, test_fraction: float = 0.2) -> tuple[LabeledDataset, LabeledDataset]:
    """The bundled 8x8 handwritten-digits set (10 classes, ~180 items each),
    split per class. Serves as the desk-scale stand-in when no IDX archives
    are configured."""
    from sklearn.datasets import load_digits  # local import: optional dependency

    raw = load_digits()
    images = (raw.images / 16.0).clip(0.0, 1.0)[:, None, :, :]
    ds = LabeledDataset(images, raw.target.astype(np.int64), 10, "digits8x8")
    return split_train_test(ds, test_fraction, np.random.default_rng(seed))
