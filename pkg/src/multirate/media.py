"""Core image/flow containers and bit-exact file I/O.

Frames are row-major float32 grids with values in [0, 1]; flow fields store
per-pixel displacements in pixels. All containers are immutable after
construction (backing arrays are marked read-only) and safe to share across
threads.

On-disk formats: binary PGM (P5) / PPM (P6) with maxval 255 for frames, and
the de-facto standard ".flo" layout for flow fields (float32 magic
202021.25, little-endian int32 width/height, interleaved u,v float32).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FLO_MAGIC = 202021.25


class MediaError(Exception):
    """Base class for file decoding failures."""


class MalformedHeaderError(MediaError):
    pass


class TruncatedPayloadError(MediaError):
    pass


class BadMagicError(MediaError):
    pass


def _freeze(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Frame:
    """One video image: (H, W, C) float32 in [0, 1], C = 1 or 3."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"frame must be (H, W, 1|3), got {data.shape}")
        if data.size == 0:
            raise ValueError("frame must be non-empty")
        if not np.isfinite(data).all():
            raise ValueError("frame contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(data)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FlowField:
    """Dense per-pixel displacement field; u horizontal, v vertical, pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u/v must be matching 2-D grids, got {u.shape} vs {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "u", _freeze(np.ascontiguousarray(u)))
        object.__setattr__(self, "v", _freeze(np.ascontiguousarray(v)))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel {0,1} mask annotating an image or flow of the same size."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.dtype != np.bool_:
            if not np.isin(bits, (0, 1)).all():
                raise ValueError("mask bits must be 0 or 1")
            bits = bits.astype(bool)
        if bits.ndim != 2:
            raise ValueError("mask must be 2-D")
        object.__setattr__(self, "bits", _freeze(np.ascontiguousarray(bits)))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def fraction_set(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 0.0


@dataclass(frozen=True)
class VideoClip:
    """Ordered frames plus the source indices they were sampled from."""

    frames: tuple
    source_indices: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("clip must contain at least one frame")
        h, w, c = frames[0].data.shape
        for f in frames[1:]:
            if f.data.shape != (h, w, c):
                raise ValueError("all clip frames must share dimensions")
        idx = np.asarray(self.source_indices, dtype=np.int64)
        if idx.shape != (len(frames),):
            raise ValueError("source_indices length must equal frame count")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "source_indices", _freeze(idx))

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# PGM / PPM


def _read_pnm_tokens(raw: bytes, count: int):
    """Yields `count` whitespace-separated header tokens, honoring # comments.

    Returns (tokens, offset of first payload byte).
    """
    tokens = []
    pos = 0
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if pos == start:
            raise MalformedHeaderError("incomplete PNM header")
        tokens.append(raw[start:pos])
    if pos >= n or not raw[pos : pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after PNM header")
    return tokens, pos + 1


def load_frame(path) -> Frame:
    """Loads a binary PGM (P5) or PPM (P6) file with maxval 255.

    8-bit codes map to [0, 1] by division by 255.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        tokens, payload_at = _read_pnm_tokens(raw, 4)
    except MalformedHeaderError:
        raise
    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise MalformedHeaderError(f"unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric PNM header field: {exc}") from exc
    if width <= 0 or height <= 0:
        raise MalformedHeaderError("non-positive PNM dimensions")
    if maxval != 255:
        raise MalformedHeaderError(f"only maxval 255 supported, got {maxval}")
    expected = height * width * channels
    payload = raw[payload_at : payload_at + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"expected {expected} payload bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Frame(pixels.astype(np.float32) / np.float32(255.0))


def save_frame(frame: Frame, path) -> None:
    """Writes a frame as binary PGM/PPM; values quantize by round-half-up."""
    magic = b"P5" if frame.channels == 1 else b"P6"
    codes = np.floor(frame.data.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, frame.width, frame.height)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(codes.tobytes())


# ---------------------------------------------------------------------------
# Middlebury-style .flo


def load_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise TruncatedPayloadError("flow file shorter than its header")
    magic, width, height = struct.unpack("<fii", raw[:12])
    if magic != FLO_MAGIC:
        raise BadMagicError(f"bad flow magic {magic!r}")
    if width <= 0 or height <= 0:
        raise MalformedHeaderError("non-positive flow dimensions")
    expected = 12 + 8 * width * height
    if len(raw) != expected:
        raise TruncatedPayloadError(
            f"flow payload size mismatch: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width, 2)
    return FlowField(data[:, :, 0], data[:, :, 1])


def save_flow(flow: FlowField, path) -> None:
    data = np.empty((flow.height, flow.width, 2), dtype="<f4")
    data[:, :, 0] = flow.u
    data[:, :, 1] = flow.v
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, flow.width, flow.height))
        fh.write(data.tobytes())
