"""IDX-format dataset parsing, persistence, canonicality filtering, galleries.

Images live in [0,1] internally; quantization to bytes (round-half-up) only
happens at the I/O boundary so that norm budgets such as eps=0.3 stay on the
[0,1] intensity scale.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (DimensionMismatch, InvalidParams, MalformedHeader,
                     TooFewExamples, TruncatedPayload)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

DEFAULT_CANONICALITY_K = 10


def quantize(pixels: np.ndarray) -> np.ndarray:
    """[0,1] intensities -> uint8 bytes, round-half-up."""
    return np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def dequantize(raw: np.ndarray) -> np.ndarray:
    """uint8 bytes -> float32 intensities in [0,1]."""
    return (np.asarray(raw, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


class GrayImage:
    """Fixed-size single-channel raster with intensities in [0,1].

    Pixels are read-only, shape (height, width). float32 is the working
    precision; float64 is preserved for images whose pixel-exact arithmetic
    matters (max-norm budget saturation).
    """

    __slots__ = ("width", "height", "pixels")

    def __init__(self, pixels: np.ndarray):
        arr = np.asarray(pixels)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        if arr.ndim != 2:
            raise DimensionMismatch(f"expected 2-D raster, got shape {arr.shape}")
        if arr.size == 0:
            raise DimensionMismatch("empty raster")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise InvalidParams(f"intensities outside [0,1]: min={lo}, max={hi}")
        arr = arr.copy()
        arr.flags.writeable = False
        self.pixels = arr
        self.height, self.width = arr.shape

    @classmethod
    def from_flat(cls, width: int, height: int, flat) -> "GrayImage":
        arr = np.asarray(flat, dtype=np.float32)
        if arr.size != width * height:
            raise DimensionMismatch(
                f"{arr.size} pixels cannot fill a {width}x{height} raster")
        return cls(arr.reshape(height, width))

    @property
    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def to_bytes_list(self) -> list[int]:
        return quantize(self.flat).tolist()

    def __eq__(self, other) -> bool:
        return (isinstance(other, GrayImage)
                and self.pixels.shape == other.pixels.shape
                and bool(np.array_equal(self.pixels, other.pixels)))

    def __repr__(self) -> str:
        return f"GrayImage({self.width}x{self.height})"


@dataclass(frozen=True)
class LabeledExample:
    image: GrayImage
    label: int


class Dataset:
    """Ordered, immutable collection of same-shape labeled images."""

    def __init__(self, examples: list[LabeledExample], num_categories: int):
        if not examples:
            raise InvalidParams("dataset must be non-empty")
        w, h = examples[0].image.width, examples[0].image.height
        for ex in examples:
            if ex.image.width != w or ex.image.height != h:
                raise DimensionMismatch("all dataset images must share width/height")
            if not 0 <= ex.label < num_categories:
                raise InvalidParams(
                    f"label {ex.label} outside [0,{num_categories})")
        self.examples = list(examples)
        self.num_categories = int(num_categories)
        self.width, self.height = w, h
        self._matrix: np.ndarray | None = None
        self._labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> LabeledExample:
        return self.examples[i]

    def matrix(self) -> np.ndarray:
        """(n, width*height) float32 view of all images; cached, read-only."""
        if self._matrix is None:
            m = np.stack([ex.image.flat for ex in self.examples]).astype(np.float32)
            m.flags.writeable = False
            self._matrix = m
        return self._matrix

    def labels(self) -> np.ndarray:
        if self._labels is None:
            lab = np.array([ex.label for ex in self.examples], dtype=np.int64)
            lab.flags.writeable = False
            self._labels = lab
        return self._labels

    def take(self, indices) -> "Dataset":
        return Dataset([self.examples[i] for i in indices], self.num_categories)


# --- IDX parsing / writing ---

def _read_be32(data: bytes, offset: int, what: str) -> int:
    if len(data) < offset + 4:
        raise MalformedHeader(f"truncated header: missing {what}")
    return struct.unpack_from(">I", data, offset)[0]


def parse_idx_images(data: bytes) -> list[GrayImage]:
    """Decode an IDX3 image file (big-endian, magic 2051) into [0,1] images."""
    magic = _read_be32(data, 0, "magic")
    if magic != IMAGE_MAGIC:
        raise MalformedHeader(f"bad image magic {magic}, expected {IMAGE_MAGIC}")
    count = _read_be32(data, 4, "count")
    rows = _read_be32(data, 8, "rows")
    cols = _read_be32(data, 12, "cols")
    need = count * rows * cols
    payload = data[16:16 + need]
    if len(payload) < need:
        raise TruncatedPayload(
            f"payload has {len(payload)} bytes, header announces {need}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    return [GrayImage(dequantize(raw[i])) for i in range(count)]


def parse_idx_labels(data: bytes) -> list[int]:
    """Decode an IDX1 label file (big-endian, magic 2049)."""
    magic = _read_be32(data, 0, "magic")
    if magic != LABEL_MAGIC:
        raise MalformedHeader(f"bad label magic {magic}, expected {LABEL_MAGIC}")
    count = _read_be32(data, 4, "count")
    payload = data[8:8 + count]
    if len(payload) < count:
        raise TruncatedPayload(
            f"payload has {len(payload)} bytes, header announces {count}")
    return list(payload)


def write_idx_images(images: list[GrayImage]) -> bytes:
    """Encode images into IDX3 bytes; intensities quantized round-half-up."""
    if not images:
        return struct.pack(">IIII", IMAGE_MAGIC, 0, 0, 0)
    w, h = images[0].width, images[0].height
    out = bytearray(struct.pack(">IIII", IMAGE_MAGIC, len(images), h, w))
    for img in images:
        if img.width != w or img.height != h:
            raise DimensionMismatch("images of mixed sizes cannot share a file")
        out += quantize(img.pixels).tobytes()
    return bytes(out)


def write_idx_labels(labels: list[int]) -> bytes:
    for lab in labels:
        if not 0 <= int(lab) <= 255:
            raise InvalidParams(f"label {lab} does not fit in a byte")
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + bytes(int(x) for x in labels)


def load_dataset(image_bytes: bytes, label_bytes: bytes,
                 num_categories: int = 10) -> Dataset:
    images = parse_idx_images(image_bytes)
    labels = parse_idx_labels(label_bytes)
    if len(images) != len(labels):
        raise DimensionMismatch(
            f"{len(images)} images but {len(labels)} labels")
    return Dataset([LabeledExample(im, lab) for im, lab in zip(images, labels)],
                   num_categories)


def load_dataset_files(image_path, label_path, num_categories: int = 10) -> Dataset:
    with open(image_path, "rb") as f:
        ib = f.read()
    with open(label_path, "rb") as f:
        lb = f.read()
    return load_dataset(ib, lb, num_categories)


# --- canonicality ---

def canonicality_score(ds: Dataset, k: int = DEFAULT_CANONICALITY_K) -> np.ndarray:
    """Mean L2 distance to the k nearest same-label neighbors, self excluded.

    Lower scores mark more canonical examples. Raises TooFewExamples when some
    category has k or fewer members (no k neighbors to average).
    """
    if k < 1:
        raise InvalidParams("k must be >= 1")
    mat = ds.matrix().astype(np.float64)
    labels = ds.labels()
    scores = np.empty(len(ds), dtype=np.float64)
    for cat in np.unique(labels):
        idx = np.flatnonzero(labels == cat)
        if len(idx) <= k:
            raise TooFewExamples(
                f"category {cat} has {len(idx)} members, need > {k}")
        block = mat[idx]
        sq = np.einsum("ij,ij->i", block, block)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (block @ block.T)
        np.maximum(d2, 0.0, out=d2)
        np.fill_diagonal(d2, np.inf)
        nearest = np.partition(d2, k - 1, axis=1)[:, :k]
        scores[idx] = np.sqrt(nearest).mean(axis=1)
    return scores


def least_canonical_indices(ds: Dataset, fraction: float,
                            k: int = DEFAULT_CANONICALITY_K) -> list[int]:
    """Indices dropped by the canonicality cut: ceil(fraction*n_c) highest
    scores per category. Score ties drop the later dataset index first."""
    if not 0.0 <= fraction < 1.0:
        raise InvalidParams("fraction must be in [0,1)")
    if fraction == 0.0:
        return []
    scores = canonicality_score(ds, k)
    labels = ds.labels()
    dropped: list[int] = []
    for cat in np.unique(labels):
        idx = np.flatnonzero(labels == cat)
        m = math.ceil(fraction * len(idx))
        order = sorted(idx, key=lambda i: (-scores[i], -i))
        dropped.extend(int(i) for i in order[:m])
    return sorted(dropped)


def filter_least_canonical(ds: Dataset, fraction: float,
                           k: int = DEFAULT_CANONICALITY_K) -> Dataset:
    """Drop the least canonical fraction per category, preserving order."""
    dropped = set(least_canonical_indices(ds, fraction, k))
    survivors = [i for i in range(len(ds)) if i not in dropped]
    return ds.take(survivors)


def surviving_indices(ds: Dataset, fraction: float,
                      k: int = DEFAULT_CANONICALITY_K) -> list[int]:
    dropped = set(least_canonical_indices(ds, fraction, k))
    return [i for i in range(len(ds)) if i not in dropped]


# --- attack gallery JSON ---

@dataclass
class GalleryEntry:
    """One attack output in the external gallery schema."""
    source_index: int
    label: int
    norm: str
    epsilon: float
    adversarial: GrayImage

    def to_json_obj(self) -> dict:
        return {
            "source_index": int(self.source_index),
            "label": int(self.label),
            "norm": self.norm,
            "epsilon": float(self.epsilon),
            "width": self.adversarial.width,
            "height": self.adversarial.height,
            "pixels": self.adversarial.to_bytes_list(),
        }


def dump_gallery(entries: list[GalleryEntry]) -> str:
    return json.dumps([e.to_json_obj() for e in entries],
                      sort_keys=True, separators=(",", ":")) + "\n"


def load_gallery(text: str) -> list[GalleryEntry]:
    out = []
    for obj in json.loads(text):
        img = GrayImage(dequantize(
            np.array(obj["pixels"], dtype=np.uint8).reshape(
                obj["height"], obj["width"])))
        out.append(GalleryEntry(source_index=int(obj["source_index"]),
                                label=int(obj["label"]),
                                norm=str(obj["norm"]),
                                epsilon=float(obj["epsilon"]),
                                adversarial=img))
    return out
