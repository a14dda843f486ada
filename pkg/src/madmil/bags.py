"""Dataset construction: IDX image parsing, soft-bag sampling, feature-bag IO.

A soft-bag benchmark assigns each bag a fixed number of key-digit images:
positive bags get round(p_pos * bag_size), negative bags the smaller
round(p_neg * bag_size), so the two classes differ only in how often the
key digit appears.  Train and validation bags draw from the training
image pool, test bags from the test pool.  Sampling is without
replacement within a bag and fully deterministic per seed.

Feature bags are plain text: one CSV file of float rows per bag plus a
manifest with columns ``bag_id,path,label`` (paths relative to the
manifest).  Floats are written with shortest round-trip formatting, so a
write/read cycle is bit-exact.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 2051  # 0x00000803
LABELS_MAGIC = 2049  # 0x00000801


class IdxError(ValueError):
    """Malformed IDX byte stream."""


class BagFormatError(ValueError):
    """Malformed feature-bag file or manifest."""


@dataclass
class IdxFile:
    magic: int
    dims: tuple
    payload: np.ndarray  # flat uint8

    def shaped(self) -> np.ndarray:
        return self.payload.reshape(self.dims)


def parse_idx(data: bytes) -> IdxFile:
    """Decode an IDX byte stream (big-endian header, uint8 payload)."""
    if len(data) < 4:
        raise IdxError(f"truncated header: {len(data)} bytes")
    magic = int.from_bytes(data[:4], "big")
    if data[0] != 0 or data[1] != 0 or data[2] != 0x08:
        raise IdxError(f"unsupported magic {magic:#010x} (want uint8 IDX)")
    ndims = data[3]
    if ndims < 1:
        raise IdxError("zero-dimensional IDX file")
    header = 4 + 4 * ndims
    if len(data) < header:
        raise IdxError(f"truncated dimension header: {len(data)} bytes for {ndims} dims")
    dims = struct.unpack(f">{ndims}I", data[4:header])
    expected = math.prod(dims)
    payload = np.frombuffer(data[header:], dtype=np.uint8)
    if payload.size != expected:
        raise IdxError(
            f"payload holds {payload.size} bytes, dims {dims} require {expected}"
        )
    return IdxFile(magic=magic, dims=dims, payload=payload)


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into an (n, rows, cols) uint8 array."""
    parsed = parse_idx(Path(path).read_bytes())
    if parsed.magic != IMAGES_MAGIC:
        raise IdxError(f"{path}: magic {parsed.magic} is not an image file ({IMAGES_MAGIC})")
    return parsed.shaped()


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label file into a length-n uint8 vector."""
    parsed = parse_idx(Path(path).read_bytes())
    if parsed.magic != LABELS_MAGIC:
        raise IdxError(f"{path}: magic {parsed.magic} is not a label file ({LABELS_MAGIC})")
    return parsed.shaped()


def image_to_instance(image) -> np.ndarray:
    """Flatten one image row-major into a 1 x pixels row scaled to [0, 1]."""
    return np.asarray(image, dtype=np.float64).reshape(1, -1) / 255.0


@dataclass
class Bag:
    """One labeled set of instances."""

    bag_id: str
    x: np.ndarray  # N x input_dim float64
    label: int
    instance_ids: list

    @property
    def n_instances(self) -> int:
        return self.x.shape[0]


@dataclass
class BagSplits:
    train: list
    val: list
    test: list


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SoftBagConfig:
    """Soft-bag sampling parameters.

    ``p_pos`` and ``p_neg`` are the key-instance fractions of positive and
    negative bags; both classes may contain the key digit, positives just
    contain more of it.
    """

    p_pos: float
    p_neg: float
    bag_size: int = 20
    n_train: int = 50
    n_val: int = 100
    n_test: int = 900
    key_digit: int = 8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_neg < self.p_pos <= 1.0):
            raise ValueError(
                f"need 0 <= p_neg < p_pos <= 1, got p_pos={self.p_pos}, p_neg={self.p_neg}"
            )
        if self.bag_size < 1:
            raise ValueError("bag_size must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one bag")
        if not 0 <= self.key_digit <= 9:
            raise ValueError(f"key_digit must be a digit, got {self.key_digit}")
        if self.keys_per_positive <= self.keys_per_negative:
            raise ValueError(
                f"indistinguishable bags: round(p_pos*{self.bag_size}) = "
                f"{self.keys_per_positive} must exceed round(p_neg*{self.bag_size}) = "
                f"{self.keys_per_negative}"
            )

    @property
    def keys_per_positive(self) -> int:
        return _round_half_up(self.p_pos * self.bag_size)

    @property
    def keys_per_negative(self) -> int:
        return _round_half_up(self.p_neg * self.bag_size)


def make_soft_bags(
    config: SoftBagConfig,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
) -> BagSplits:
    """Sample train/val/test soft-bag splits, half positive half negative.

    Instance ids are row indices into the source arrays of the owning
    pool (train pool for train/val bags, test pool for test bags).
    """
    rng = np.random.default_rng(config.seed)

    def pools(labels, source):
        key = np.flatnonzero(labels == config.key_digit)
        other = np.flatnonzero(labels != config.key_digit)
        need_key = config.keys_per_positive
        need_other = config.bag_size - config.keys_per_negative
        if key.size < need_key:
            raise ValueError(
                f"{source} pool has {key.size} images of digit {config.key_digit}, "
                f"a positive bag needs {need_key} distinct ones"
            )
        if other.size < need_other:
            raise ValueError(
                f"{source} pool has {other.size} non-key images, "
                f"a negative bag needs {need_other} distinct ones"
            )
        return key, other

    def build_split(prefix, n_bags, images, labels, key_pool, other_pool):
        n_pos = (n_bags + 1) // 2
        bags = []
        for i in range(n_bags):
            positive = i < n_pos
            n_key = config.keys_per_positive if positive else config.keys_per_negative
            picks = np.concatenate(
                [
                    rng.choice(key_pool, size=n_key, replace=False),
                    rng.choice(other_pool, size=config.bag_size - n_key, replace=False),
                ]
            )
            rng.shuffle(picks)
            x = images[picks].reshape(config.bag_size, -1).astype(np.float64) / 255.0
            bags.append(
                Bag(
                    bag_id=f"{prefix}-{i:04d}",
                    x=x,
                    label=int(positive),
                    instance_ids=[int(p) for p in picks],
                )
            )
        return bags

    train_key, train_other = pools(train_labels, "training")
    test_key, test_other = pools(test_labels, "test")
    return BagSplits(
        train=build_split("train", config.n_train, train_images, train_labels,
                          train_key, train_other),
        val=build_split("val", config.n_val, train_images, train_labels,
                        train_key, train_other),
        test=build_split("test", config.n_test, test_images, test_labels,
                         test_key, test_other),
    )


# -- feature-bag files -----------------------------------------------------


def load_feature_bags(manifest_path) -> list:
    """Load one Bag per manifest row; widths must agree across the set."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise BagFormatError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    bags = []
    width = None
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["bag_id", "path", "label"]:
            raise BagFormatError(
                f"{manifest_path}: expected header bag_id,path,label, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise BagFormatError(f"{manifest_path}:{lineno}: expected 3 columns")
            bag_id, rel, label_text = row
            try:
                label = int(label_text)
            except ValueError:
                raise BagFormatError(
                    f"{manifest_path}:{lineno}: non-integer label {label_text!r}"
                ) from None
            bag_file = base / rel
            if not bag_file.is_file():
                raise BagFormatError(f"{manifest_path}:{lineno}: missing bag file {bag_file}")
            x = _read_bag_file(bag_file)
            if width is None:
                width = x.shape[1]
            elif x.shape[1] != width:
                raise BagFormatError(
                    f"{bag_file}: width {x.shape[1]} differs from the set's width {width}"
                )
            bags.append(Bag(bag_id=bag_id, x=x, label=label,
                            instance_ids=list(range(x.shape[0]))))
    return bags


def _read_bag_file(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise BagFormatError(
                    f"{path}:{lineno}: row has {len(cells)} columns, expected {width}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise BagFormatError(
                    f"{path}:{lineno}: non-numeric value {bad!r}"
                ) from None
    if not rows:
        raise BagFormatError(f"{path}: empty bag file")
    return np.array(rows, dtype=np.float64)


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def write_feature_bags(bags, out_dir, manifest_name: str) -> Path:
    """Write bag CSVs plus a manifest into ``out_dir``; returns the manifest path.

    Values use shortest round-trip float formatting, so reloading
    reproduces the arrays bit-exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", newline="") as mh:
        mh.write("bag_id,path,label\n")
        for bag in bags:
            rel = f"{bag.bag_id}.csv"
            with open(out_dir / rel, "w", newline="") as bh:
                for row in bag.x:
                    bh.write(",".join(repr(float(v)) for v in row))
                    bh.write("\n")
            mh.write(f"{bag.bag_id},{rel},{bag.label}\n")
    return manifest
