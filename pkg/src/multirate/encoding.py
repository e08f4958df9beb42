"""Bilinear descriptors and their Tensor Sketch approximation.

The exact bilinear descriptor sums the outer product of each spatial cell's
channel vector, capturing second-order statistics at C^2 dimensions. The
Tensor Sketch approximation projects each cell with two independent count
sketches and circularly convolves them (via DFT), preserving the polynomial
kernel <x, y>^2 in expectation at a configurable dimension d.

Descriptor files: 16-byte header (magic "CBPD", uint32 version, uint32 d,
4 reserved zero bytes), then little-endian float32 values.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DESCRIPTOR_MAGIC = b"CBPD"
DESCRIPTOR_VERSION = 1


@dataclass(frozen=True)
class FeatureMap:
    """Spatial grid of channel vectors: (H, W, C) float32, finite."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"feature map must be (H, W, C), got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("feature map contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def cells(self) -> np.ndarray:
        """Flattened (H*W, C) float64 view of the cells."""
        return self.data.reshape(-1, self.data.shape[2]).astype(np.float64)


@dataclass(frozen=True)
class Descriptor:
    """Length-d (or C^2) float32 vector."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 1:
            raise ValueError("descriptor must be 1-D")
        if not np.isfinite(values).all():
            raise ValueError("descriptor contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SketchParams:
    """Hash/sign tables of the two count sketches plus output dimension d.

    d is restricted to powers of two so the circular convolution maps onto
    an unpadded DFT of length exactly d.
    """

    d: int
    h1: np.ndarray
    h2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if not _is_pow2(self.d):
            raise ValueError(f"sketch dimension must be a power of two, got {self.d}")
        tables = {}
        for name in ("h1", "h2", "s1", "s2"):
            t = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            if t.ndim != 1 or t.shape[0] != np.shape(self.h1)[0]:
                raise ValueError("hash/sign tables must be 1-D and equal length")
            tables[name] = t
        if ((tables["h1"] < 0).any() or (tables["h1"] >= self.d).any()
                or (tables["h2"] < 0).any() or (tables["h2"] >= self.d).any()):
            raise ValueError("hash entries must lie in [0, d)")
        if (np.abs(tables["s1"]) != 1).any() or (np.abs(tables["s2"]) != 1).any():
            raise ValueError("sign entries must be +1 or -1")
        for name, t in tables.items():
            t.setflags(write=False)
            object.__setattr__(self, name, t)

    @property
    def channels(self) -> int:
        return self.h1.shape[0]

    @classmethod
    def from_seed(cls, seed: int, channels: int, d: int) -> "SketchParams":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
        h1 = rng.integers(0, d, size=channels)
        h2 = rng.integers(0, d, size=channels)
        s1 = rng.integers(0, 2, size=channels) * 2 - 1
        s2 = rng.integers(0, 2, size=channels) * 2 - 1
        return cls(d=d, h1=h1, h2=h2, s1=s1, s2=s2, seed=int(seed))


def exact_bilinear(fmap: FeatureMap) -> Descriptor:
    """Sum over cells of the outer product x x^T, flattened row-major (C^2)."""
    cells = fmap.cells()
    outer = np.einsum("nc,nd->cd", cells, cells)
    return Descriptor(outer.reshape(-1).astype(np.float32))


def count_sketch(x, h, s, d: int) -> np.ndarray:
    """Signed-hash projection: out[k] = sum over c with h[c]==k of s[c]*x[c]."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    if x.shape[-1] != h.shape[0] or h.shape != s.shape:
        raise ValueError("table length must match the channel count")
    out = np.zeros(x.shape[:-1] + (d,), dtype=np.float64)
    # fixed channel order keeps colliding-bucket sums bit-stable
    for c in range(h.shape[0]):
        out[..., h[c]] += s[c] * x[..., c]
    return out


def _pool_sketches(cells: np.ndarray, params: SketchParams) -> np.ndarray:
    """Tensor-sketch pooling of one cell stack.

    cells: (..., N, C) float64. Returns (..., d): the sum over the N cells of
    the circular convolution of the two count sketches. By linearity of the
    inverse DFT, the per-cell spectra are multiplied and summed before a
    single inverse transform; real transforms are used since inputs are real.
    """
    if cells.shape[-1] != params.channels:
        raise ValueError(
            f"feature channels {cells.shape[-1]} != sketch tables {params.channels}")
    cs1 = count_sketch(cells, params.h1, params.s1, params.d)
    cs2 = count_sketch(cells, params.h2, params.s2, params.d)
    spec = np.fft.rfft(cs1, axis=-1) * np.fft.rfft(cs2, axis=-1)
    return np.fft.irfft(spec.sum(axis=-2), n=params.d, axis=-1)


def sketch_pool_batch(batch: np.ndarray, params: SketchParams) -> np.ndarray:
    """Pooled sketches of a batch of cell stacks: (B, N, C) -> (B, d).

    Processed in bounded-memory chunks along the batch axis, so each row is
    bit-identical to a separate _pool_sketches call.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3:
        raise ValueError("batch must be (B, N, C)")
    b, n, _ = batch.shape
    out = np.empty((b, params.d), dtype=np.float64)
    step = max(1, (1 << 21) // max(1, n * params.d))
    for i in range(0, b, step):
        out[i : i + step] = _pool_sketches(batch[i : i + step], params)
    return out


def tensor_sketch_cell(x, params: SketchParams) -> np.ndarray:
    """Sketch of one channel vector: circular convolution of its two count
    sketches, length d."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("tensor_sketch_cell takes a single channel vector")
    return _pool_sketches(x[None, :], params)


def tensor_sketch_pool(fmap: FeatureMap, params: SketchParams) -> Descriptor:
    """Sum of per-cell tensor sketches over all spatial cells."""
    return Descriptor(_pool_sketches(fmap.cells(), params).astype(np.float32))


def aggregate_segments(maps) -> FeatureMap:
    """Element-wise product of the segment feature maps."""
    maps = list(maps)
    if not maps:
        raise ValueError("need at least one segment feature map")
    shape = maps[0].data.shape
    for m in maps[1:]:
        if m.data.shape != shape:
            raise ValueError(f"segment map shape mismatch: {m.data.shape} vs {shape}")
    out = maps[0].data.astype(np.float64)
    for m in maps[1:]:
        out = out * m.data.astype(np.float64)
    return FeatureMap(out.astype(np.float32))


def normalize_descriptor(b: Descriptor) -> Descriptor:
    """Signed square root, then scaling to unit Euclidean norm (0 -> 0)."""
    v = b.values.astype(np.float64)
    rooted = np.sign(v) * np.sqrt(np.abs(v))
    norm = np.linalg.norm(rooted)
    if norm > 0.0:
        rooted /= norm
    return Descriptor(rooted.astype(np.float32))


def save_descriptor(desc: Descriptor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<II4x", DESCRIPTOR_VERSION, len(desc)))
        fh.write(desc.values.astype("<f4").tobytes())


def load_descriptor(path) -> Descriptor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != DESCRIPTOR_MAGIC:
        raise ValueError("not a descriptor file (bad magic)")
    version, d = struct.unpack("<II", raw[4:12])
    if version != DESCRIPTOR_VERSION:
        raise ValueError(f"unsupported descriptor version {version}")
    if len(raw) != 16 + 4 * d:
        raise ValueError("descriptor payload size mismatch")
    return Descriptor(np.frombuffer(raw, dtype="<f4", offset=16))
