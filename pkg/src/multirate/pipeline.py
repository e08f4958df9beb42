"""Desk-scale two-stream recognition pipeline and robustness experiment.

CNN streams are replaced by deterministic hand-crafted features: the
spatial map holds per-cell intensity mean/variance over the clip, the
temporal map per-cell histograms of inter-frame displacement magnitude plus
mean flow. Inter-frame motion comes from a block-matching estimator run
once per video on consecutive pairs; displacement between frames further
apart is obtained by composing those base flows, which stands in for
re-estimating flow at the resampled frame rate.

Everything downstream is deterministic given the seeds: clip sampling uses
RNG streams derived from (seed, epoch, video), training is full-batch
gradient descent on multinomial logistic regression, and evaluation follows
the fixed protocol of K evenly spaced anchors, ten crops per anchor, and
pre-softmax score averaging with weighted late fusion of the two streams.
"""
from __future__ import annotations

import concurrent.futures
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .encoding import (Descriptor, FeatureMap, SketchParams, aggregate_segments,
                       count_sketch, normalize_descriptor, tensor_sketch_pool)
from .flow import _grids
from .kernels import bilinear_sample, block_match
from .media import FlowField, Frame, VideoClip, load_frame
from .sampling import (SamplerConfig, derive_rng, eval_sample_indices,
                       partition_segments, sample_fixed_stride,
                       sample_segment_clips)
from .synth import MANIFEST_NAME, Perturbation, resample_indices

STREAMS = ("spatial", "temporal")

# Displacement-magnitude histogram bin edges (pixels per step). The top bin
# is open-ended so composed multi-frame displacements stay representable.
MAG_EDGES = (0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0, 7.0, 10.0, 14.0, 20.0)

SPATIAL_CHANNELS = 2                      # mean, variance
TEMPORAL_CHANNELS = len(MAG_EDGES) + 1 + 3  # histogram bins, mean u/v/|d|


@dataclass(frozen=True)
class StreamFeatures:
    """Per-clip feature maps for the two streams (same spatial grid)."""

    spatial: FeatureMap
    temporal: FeatureMap

    def __post_init__(self):
        if (self.spatial.height, self.spatial.width) != (
                self.temporal.height, self.temporal.width):
            raise ValueError("stream maps must share the cell grid")


def _parallel_map(fn, items, threads: int):
    """Order-preserving map, optionally threaded; results are independent of
    the thread count because every job owns its derived RNG stream."""
    if threads <= 1:
        return [fn(x) for x in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Pixel statistics and cell pooling


class _PixelStats:
    """Integral images of per-pixel clip statistics.

    Box sums over arbitrary windows let the ten-crop evaluation pool cell
    features for every crop from one pass over the pixels.
    """

    def __init__(self, frames_f32: np.ndarray, flow_uv: np.ndarray):
        # frames (L, H, W) float32; flow_uv (P, H, W, 2) float64, P = L - 1
        L, H, W = frames_f32.shape
        P = flow_uv.shape[0]
        planes = np.empty((SPATIAL_CHANNELS + TEMPORAL_CHANNELS, H, W), np.float64)
        f64 = frames_f32.astype(np.float64)
        planes[0] = f64.sum(axis=0)
        planes[1] = (f64 * f64).sum(axis=0)
        nbins = len(MAG_EDGES) + 1
        if P:
            u = flow_uv[..., 0]
            v = flow_uv[..., 1]
            mag = np.sqrt(u * u + v * v)
            bins = np.searchsorted(MAG_EDGES, mag.reshape(P, -1))
            flat = (bins * (H * W) + np.arange(H * W)[None, :]).ravel()
            counts = np.bincount(flat, minlength=nbins * H * W)
            planes[2 : 2 + nbins] = counts.reshape(nbins, H, W)
            planes[2 + nbins] = u.sum(axis=0)
            planes[3 + nbins] = v.sum(axis=0)
            planes[4 + nbins] = mag.sum(axis=0)
        else:
            planes[2:] = 0.0
        ii = np.zeros((planes.shape[0], H + 1, W + 1), np.float64)
        np.cumsum(planes, axis=1, out=ii[:, 1:, 1:])
        np.cumsum(ii[:, 1:, 1:], axis=2, out=ii[:, 1:, 1:])
        self.integral = ii
        self.n_frames = L
        self.n_pairs = P
        self.height = H
        self.width = W

    def box_sums(self, r0: int, c0: int, cell_h: int, cell_w: int,
                 grid_h: int, grid_w: int) -> np.ndarray:
        """(grid_h, grid_w, channels) sums over the window's cell grid."""
        r = r0 + cell_h * np.arange(grid_h + 1)
        c = c0 + cell_w * np.arange(grid_w + 1)
        ii = self.integral[:, r[:, None], c[None, :]]  # (CH, gh+1, gw+1)
        out = ii[:, 1:, 1:] - ii[:, :-1, 1:] - ii[:, 1:, :-1] + ii[:, :-1, :-1]
        return np.moveaxis(out, 0, -1)


def _pool_window(stats: _PixelStats, r0: int, c0: int, win_h: int, win_w: int,
                 grid) -> StreamFeatures:
    gh, gw = grid
    if win_h % gh or win_w % gw:
        raise ValueError(f"window {win_h}x{win_w} not divisible by grid {gh}x{gw}")
    cell_h, cell_w = win_h // gh, win_w // gw
    sums = stats.box_sums(r0, c0, cell_h, cell_w, gh, gw)
    npx = float(cell_h * cell_w)
    mean = sums[:, :, 0] / (stats.n_frames * npx)
    var = np.maximum(sums[:, :, 1] / (stats.n_frames * npx) - mean * mean, 0.0)
    spatial = np.stack([mean, var], axis=-1)
    denom = max(stats.n_pairs, 1) * npx
    temporal = sums[:, :, 2:] / denom
    return StreamFeatures(FeatureMap(spatial.astype(np.float32)),
                          FeatureMap(temporal.astype(np.float32)))


def hflip_features(sf: StreamFeatures) -> StreamFeatures:
    """Features of the horizontally flipped input, derived by symmetry:
    cells mirror and the mean-u channel changes sign."""
    sp = sf.spatial.data[:, ::-1, :]
    tm = sf.temporal.data[:, ::-1, :].copy()
    tm[:, :, len(MAG_EDGES) + 1] = -tm[:, :, len(MAG_EDGES) + 1]
    return StreamFeatures(FeatureMap(sp), FeatureMap(tm))


def _flows_to_array(flows, height: int, width: int) -> np.ndarray:
    arr = np.empty((len(flows), height, width, 2), np.float64)
    for i, fl in enumerate(flows):
        if (fl.height, fl.width) != (height, width):
            raise ValueError("flow dimensions do not match the clip frames")
        arr[i, :, :, 0] = fl.u
        arr[i, :, :, 1] = fl.v
    return arr


def extract_features(clip: VideoClip, flows, grid=(6, 6)) -> StreamFeatures:
    """Hand-crafted stand-in for the two CNN streams.

    spatial: per-cell mean and variance of intensity over the clip frames;
    temporal: per-cell histogram of flow magnitude (MAG_EDGES bins) plus mean
    u, v and |flow|, averaged over the clip's frame pairs. Multichannel
    frames are averaged to intensity first. flows must hold len(clip)-1
    fields (none for a single-frame clip).
    """
    if len(flows) != len(clip) - 1:
        raise ValueError("need exactly one flow per consecutive frame pair")
    h, w = clip.frames[0].height, clip.frames[0].width
    stack = np.stack([f.data.mean(axis=2, dtype=np.float32) for f in clip.frames])
    flow_uv = _flows_to_array(flows, h, w)
    stats = _PixelStats(stack, flow_uv)
    return _pool_window(stats, 0, 0, h, w, grid)


# ---------------------------------------------------------------------------
# Videos on disk, block-matching flow, composition


class LoadedVideo:
    """A dataset video held as uint8 frames, with lazy base flows."""

    def __init__(self, video_id: str, class_id: int, frames_u8: np.ndarray):
        if frames_u8.ndim != 3 or frames_u8.dtype != np.uint8:
            raise ValueError("frames must be (T, H, W) uint8")
        frames_u8.setflags(write=False)
        self.video_id = video_id
        self.class_id = int(class_id)
        self.frames_u8 = frames_u8
        self._base_cells = None

    @property
    def length(self) -> int:
        return self.frames_u8.shape[0]

    def frames_f32(self, indices) -> np.ndarray:
        return self.frames_u8[np.asarray(indices)] * np.float32(1.0 / 255.0)

    def frame(self, i: int) -> Frame:
        return Frame(self.frames_f32([i])[0][:, :, None])


def load_dataset(root) -> list:
    """Reads manifest.tsv and all PGM frames into memory."""
    manifest = os.path.join(root, MANIFEST_NAME)
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root!r}")
    videos = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            video_id, class_id, nframes, rel = line.split("\t")
            vdir = os.path.join(root, rel)
            frames = []
            for i in range(int(nframes)):
                fr = load_frame(os.path.join(vdir, "frame_%05d.pgm" % i))
                plane = np.floor(fr.data[:, :, 0].astype(np.float64) * 255.0 + 0.5)
                frames.append(plane.astype(np.uint8))
            videos.append(LoadedVideo(video_id, int(class_id), np.stack(frames)))
    return videos


def search_candidates(radius: int) -> np.ndarray:
    """(dv, du) candidates ordered by |d| (then dv, du), so SSD ties
    deterministically prefer the smallest displacement."""
    cand = [(dv, du) for dv in range(-radius, radius + 1)
            for du in range(-radius, radius + 1)]
    cand.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    return np.asarray(cand, dtype=np.int64)


def estimate_pair_displacement(a_u8: np.ndarray, b_u8: np.ndarray, radius: int,
                               cell: int) -> np.ndarray:
    """Integer per-cell displacement from frame a to frame b: exhaustive
    search over (dv, du) in [-radius, radius]^2 minimizing the mean squared
    difference per cell over the overlap. Returns (gh, gw, 2) int16."""
    return block_match(a_u8, b_u8, search_candidates(radius), cell)


class FlowBank:
    """Consecutive-pair flows of one video, plus composition across gaps.

    Base flows are block-matching estimates on the original frames, expanded
    to piecewise-constant pixel fields; the flow between frames i < j is
    their left-to-right composition, standing in for an estimator run on the
    resampled pair.
    """

    def __init__(self, video: LoadedVideo, radius: int = 5, cell: int = 8):
        t, h, w = video.frames_u8.shape
        self.height, self.width, self.cell = h, w, cell
        if video._base_cells is None:
            cand = search_candidates(radius)
            base = np.empty((t - 1, h // cell, w // cell, 2), np.int16)
            for i in range(t - 1):
                base[i] = block_match(video.frames_u8[i], video.frames_u8[i + 1],
                                      cand, cell)
            video._base_cells = base
        self.base = video._base_cells

    def _expanded(self, k: int) -> np.ndarray:
        """Base flow k as an (H, W, 2) float64 array, channels (u, v)."""
        cells = self.base[k][:, :, ::-1]  # (dv, du) -> (u, v)
        return np.repeat(np.repeat(cells, self.cell, axis=0),
                         self.cell, axis=1).astype(np.float64)

    def pair_flow_raw(self, i: int, j: int) -> np.ndarray:
        """Displacement from frame i to j (i <= j) as (H, W, 2) float64.

        Same arithmetic as chaining compose_flows over the base fields, on
        raw arrays (the training/evaluation hot path).
        """
        if j < i:
            raise ValueError("pair must be ordered")
        if j == i:
            return np.zeros((self.height, self.width, 2), np.float64)
        cols, rows = _grids(self.height, self.width)
        cur = self._expanded(i)
        for k in range(i + 1, j):
            sampled, _ = bilinear_sample(self._expanded(k),
                                         cols + cur[:, :, 0], rows + cur[:, :, 1])
            cur = cur + sampled
        return cur

    def base_flow(self, i: int) -> FlowField:
        raw = self._expanded(i)
        return FlowField(raw[:, :, 0], raw[:, :, 1])

    def pair_flow(self, i: int, j: int) -> FlowField:
        raw = self.pair_flow_raw(i, j)
        return FlowField(raw[:, :, 0], raw[:, :, 1])


# ---------------------------------------------------------------------------
# Descriptors


def make_descriptor(segments, params: SketchParams, stream: str) -> Descriptor:
    """Aggregates one stream's segment maps (element-wise product), pools the
    result with the tensor sketch, and normalizes (signed sqrt, unit norm)."""
    if stream not in STREAMS:
        raise ValueError(f"stream must be one of {STREAMS}")
    maps = [getattr(sf, stream) for sf in segments]
    return normalize_descriptor(tensor_sketch_pool(aggregate_segments(maps), params))


def _normalize_rows(pooled: np.ndarray) -> np.ndarray:
    """Row-wise signed sqrt + unit norm matching normalize_descriptor
    (including its float32 round trip)."""
    v = pooled.astype(np.float32).astype(np.float64)
    rooted = np.sign(v) * np.sqrt(np.abs(v))
    norms = np.sqrt((rooted * rooted).sum(axis=1))
    safe = np.where(norms > 0.0, norms, 1.0)
    return (rooted / safe[:, None]).astype(np.float32)


def stream_sketch_params(sketch_seed: int, stream: str, d: int) -> SketchParams:
    """Per-stream hash/sign tables derived from one master seed."""
    idx = STREAMS.index(stream)
    channels = SPATIAL_CHANNELS if stream == "spatial" else TEMPORAL_CHANNELS
    sub = int(np.random.SeedSequence([int(sketch_seed), idx]).generate_state(1)[0])
    return SketchParams.from_seed(sub, channels, d)


# ---------------------------------------------------------------------------
# Classifier


@dataclass(frozen=True)
class ClassifierModel:
    """Multinomial logistic regression over descriptors."""

    weights: np.ndarray  # (classes, d)
    bias: np.ndarray  # (classes,)
    classes: tuple
    meta: dict = field(default_factory=dict)

    def scores(self, descriptors: np.ndarray) -> np.ndarray:
        """Pre-softmax scores, (n, classes) for (n, d) input."""
        x = np.atleast_2d(np.asarray(descriptors, np.float64))
        return x @ self.weights.T + self.bias


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(model: ClassifierModel, x: np.ndarray, y: np.ndarray) -> float:
    p = _softmax(model.scores(x))
    return float(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)).mean())


@dataclass(frozen=True)
class TrainRegime:
    """Clip sampling policy during training: random temporal skipping with
    per-step strides in {0..max_stride}, or a fixed stride."""

    kind: str  # "rts" | "fixed"
    clip_len: int = 11
    max_stride: int = 6
    stride: int = 1
    segments: int = 3

    def __post_init__(self):
        if self.kind not in ("rts", "fixed"):
            raise ValueError("regime kind must be 'rts' or 'fixed'")

    def label(self) -> str:
        if self.kind == "rts":
            return f"rts{self.max_stride}"
        return f"fixed{self.stride}"

    def sample_clips(self, T: int, rng: np.random.Generator) -> list:
        """One clip per segment, confined to its segment."""
        if self.kind == "rts":
            cfg = SamplerConfig(self.clip_len, self.max_stride)
            return sample_segment_clips(T, self.segments, cfg, rng)
        clips = []
        for lo, hi in partition_segments(T, self.segments).boundaries:
            span = (self.clip_len - 1) * self.stride
            if hi - lo - 1 < span:
                raise ValueError("segment too short for the fixed-stride clip")
            start = lo + int(rng.integers(0, hi - lo - span))
            clips.append(sample_fixed_stride(hi, start, self.clip_len, self.stride))
        return clips


def _clip_stream_cells(video: LoadedVideo, bank: FlowBank, indices, grid,
                       flow_lookup=None):
    """Full-frame StreamFeatures of one clip given its source indices."""
    idx = np.asarray(indices)
    frames = video.frames_f32(idx)
    h, w = frames.shape[1], frames.shape[2]
    flow_uv = np.empty((len(idx) - 1, h, w, 2), np.float64)
    for k in range(len(idx) - 1):
        i, j = int(idx[k]), int(idx[k + 1])
        flow_uv[k] = flow_lookup(i, j) if flow_lookup is not None \
            else bank.pair_flow_raw(i, j)
    stats = _PixelStats(frames, flow_uv)
    return _pool_window(stats, 0, 0, h, w, grid), stats


def video_train_descriptors(video: LoadedVideo, bank: FlowBank,
                            regime: TrainRegime, rng, params_by_stream,
                            grid=(6, 6)):
    """One descriptor per stream from segment clips sampled per the regime."""
    clips = regime.sample_clips(video.length, rng)
    segs = [_clip_stream_cells(video, bank, c, grid)[0] for c in clips]
    return {s: make_descriptor(segs, params_by_stream[s], s) for s in STREAMS}


def train_two_stream(videos, regime: TrainRegime, epochs: int,
                     learning_rate: float, seed: int, sketch_seed: int = 0,
                     d: int = 512, grid=(6, 6), flow_radius: int = 5,
                     threads: int = 1, loss_traces: dict | None = None) -> dict:
    """Trains one classifier per stream with shared clip sampling.

    Each epoch resamples every video's clips under the regime (random
    skipping draws fresh strides per visit), builds both streams'
    descriptors from the same clips, and takes one full-batch descent step
    per stream. Weights start at zero, so epochs=0 scores uniformly.
    """
    videos = list(videos)
    classes = tuple(sorted({v.class_id for v in videos}))
    if len(classes) < 2:
        raise ValueError("training needs at least two classes")
    class_index = {c: k for k, c in enumerate(classes)}
    y = np.array([class_index[v.class_id] for v in videos])
    onehot = np.eye(len(classes))[y]
    params = {s: stream_sketch_params(sketch_seed, s, d) for s in STREAMS}
    banks = _parallel_map(lambda v: FlowBank(v, radius=flow_radius),
                          videos, threads)
    w = {s: np.zeros((len(classes), d), np.float64) for s in STREAMS}
    b = {s: np.zeros(len(classes), np.float64) for s in STREAMS}

    for epoch in range(epochs):
        def job(item):
            k, video = item
            rng = derive_rng(seed, epoch, k)
            descs = video_train_descriptors(video, banks[k], regime, rng,
                                            params, grid)
            return {s: descs[s].values.astype(np.float64) for s in STREAMS}

        batch = _parallel_map(job, list(enumerate(videos)), threads)
        for s in STREAMS:
            x = np.stack([row[s] for row in batch])
            p = _softmax(x @ w[s].T + b[s])
            if loss_traces is not None:
                loss_traces.setdefault(s, []).append(float(
                    -np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)).mean()))
            g = (p - onehot) / len(videos)
            w[s] -= learning_rate * (g.T @ x)
            b[s] -= learning_rate * g.sum(axis=0)

    return {s: ClassifierModel(
        weights=w[s], bias=b[s], classes=classes,
        meta={"seed": seed, "epochs": epochs, "regime": regime.label(),
              "stream": s, "learning_rate": learning_rate})
        for s in STREAMS}


def train_classifier(videos, regime: TrainRegime, epochs: int,
                     learning_rate: float, seed: int, stream: str = "temporal",
                     sketch_seed: int = 0, d: int = 512, grid=(6, 6),
                     flow_radius: int = 5, threads: int = 1,
                     loss_trace: list | None = None) -> ClassifierModel:
    """Single-stream view of train_two_stream (same descriptors, one head)."""
    if stream not in STREAMS:
        raise ValueError(f"stream must be one of {STREAMS}")
    traces = {} if loss_trace is not None else None
    models = train_two_stream(videos, regime, epochs, learning_rate, seed,
                              sketch_seed=sketch_seed, d=d, grid=grid,
                              flow_radius=flow_radius, threads=threads,
                              loss_traces=traces)
    if loss_trace is not None:
        loss_trace.extend(traces.get(stream, []))
    return models[stream]


# ---------------------------------------------------------------------------
# Evaluation protocol


def tencrop(frame: Frame, crop_h: int, crop_w: int) -> list:
    """Four corner crops, the center crop, then the horizontal flips of each
    in the same order (10 frames total)."""
    h, w = frame.height, frame.width
    if crop_h > h or crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} larger than frame {h}x{w}")
    offs = [(0, 0), (0, w - crop_w), (h - crop_h, 0), (h - crop_h, w - crop_w),
            ((h - crop_h) // 2, (w - crop_w) // 2)]
    crops = [Frame(frame.data[r : r + crop_h, c : c + crop_w]) for r, c in offs]
    crops += [Frame(np.ascontiguousarray(f.data[:, ::-1])) for f in crops]
    return crops


def crop_windows(h: int, w: int, crop_h: int, crop_w: int) -> list:
    """Offsets of the five unflipped crop windows, tencrop order."""
    return [(0, 0), (0, w - crop_w), (h - crop_h, 0), (h - crop_h, w - crop_w),
            ((h - crop_h) // 2, (w - crop_w) // 2)]


def default_crop(h: int, w: int, grid) -> tuple:
    """Largest crop whose corner and center windows stay aligned to the
    feature cell grid (one cell trimmed per side, if the frame allows)."""
    ch, cw = h // grid[0], w // grid[1]
    return (h - 2 * ch if h >= 4 * ch else h, w - 2 * cw if w >= 4 * cw else w)


def late_fuse(spatial_scores, temporal_scores, w_spatial: float,
              w_temporal: float) -> np.ndarray:
    """Weighted average of the two streams' per-class scores."""
    s = np.asarray(spatial_scores, np.float64)
    t = np.asarray(temporal_scores, np.float64)
    if s.shape != t.shape:
        raise ValueError("score vectors must have the same length")
    if w_spatial < 0 or w_temporal < 0 or w_spatial + w_temporal == 0:
        raise ValueError("weights must be >= 0 and not both zero")
    return (w_spatial * s + w_temporal * t) / (w_spatial + w_temporal)


def _cell_spectra(cells: np.ndarray, params: SketchParams) -> np.ndarray:
    """Per-cell product spectra of the two count sketches, (N, d//2+1).

    The pooled tensor sketch of any cell subset is the inverse transform of
    the subset sum of these rows, which lets the ten-crop evaluation reuse
    one spectrum pass for every crop and flip.
    """
    cs1 = count_sketch(cells, params.h1, params.s1, params.d)
    cs2 = count_sketch(cells, params.h2, params.s2, params.d)
    return np.fft.rfft(cs1, axis=-1) * np.fft.rfft(cs2, axis=-1)


def _window_cells(r0, c0, wh, ww, cell_h, cell_w, grid_w):
    """Flattened full-grid indices of a cell-aligned window, row-major."""
    gr = np.arange(r0 // cell_h, (r0 + wh) // cell_h)
    gc = np.arange(c0 // cell_w, (c0 + ww) // cell_w)
    return (gr[:, None] * grid_w + gc[None, :]).ravel()


def _eval_stream_descriptors(video: LoadedVideo, bank: FlowBank, indices,
                             K: int, clip_len: int, crop, grid,
                             params_by_stream):
    """Mean per-stream descriptor over the K x crops evaluation grid.

    Anchors come from eval_sample_indices over the (possibly resampled)
    index list; the clip at an anchor is consecutive in that list, clamped
    to fit. Composed flows are cached per consecutive pair, crops pool
    subsets of the full frame's per-cell sketch spectra, and flipped crops
    reuse them: flipping mirrors the cell set (a no-op for an unordered
    pool) and only negates the horizontal mean-flow channel.

    Returns {stream: mean descriptor (d,) float64}.
    """
    idx = np.asarray(indices, np.int64)
    T = idx.shape[0]
    if T < clip_len:
        raise ValueError(f"video too short to form a clip: {T} < {clip_len}")
    h, w = video.frames_u8.shape[1], video.frames_u8.shape[2]
    gh, gw = grid
    cell_h, cell_w = h // gh, w // gw
    anchors = eval_sample_indices(T, K)
    starts, counts = np.unique(np.minimum(anchors, T - clip_len),
                               return_counts=True)

    if crop is None:
        windows = [(0, 0, h, w)]
    else:
        ch, cw = crop
        windows = [(r, c, ch, cw) for r, c in crop_windows(h, w, ch, cw)]
    aligned = all(r % cell_h == 0 and c % cell_w == 0
                  and wh % cell_h == 0 and ww % cell_w == 0
                  for (r, c, wh, ww) in windows)
    u_col = len(MAG_EDGES) + 1

    composed = {}

    def flow_lookup(i, j):
        key = (i, j)
        if key not in composed:
            composed[key] = bank.pair_flow_raw(i, j)
        return composed[key]

    pool_specs = {s: [] for s in STREAMS}
    weights = {s: [] for s in STREAMS}
    for start, mult in zip(starts, counts):
        clip_idx = idx[start : start + clip_len]
        full, stats = _clip_stream_cells(video, bank, clip_idx, grid,
                                         flow_lookup=flow_lookup)
        if aligned:
            sels = [_window_cells(r, c, wh, ww, cell_h, cell_w, gw)
                    for (r, c, wh, ww) in windows]
            sp_spec = _cell_spectra(full.spatial.cells(),
                                    params_by_stream["spatial"])
            tm_cells = full.temporal.cells()
            tm_spec = _cell_spectra(tm_cells, params_by_stream["temporal"])
            for sel in sels:
                # spatial features are horizontal-flip invariant per cell,
                # so each flipped crop duplicates its unflipped pool
                pool_specs["spatial"].append(sp_spec[sel].sum(axis=0))
                weights["spatial"].append(mult * (1 if crop is None else 2))
                pool_specs["temporal"].append(tm_spec[sel].sum(axis=0))
                weights["temporal"].append(mult)
            if crop is not None:
                tm_neg = tm_cells.copy()
                tm_neg[:, u_col] = -tm_neg[:, u_col]
                neg_spec = _cell_spectra(tm_neg, params_by_stream["temporal"])
                for sel in sels:
                    pool_specs["temporal"].append(neg_spec[sel].sum(axis=0))
                    weights["temporal"].append(mult)
        else:
            pooled = [_pool_window(stats, r, c, wh, ww,
                                   (wh // cell_h, ww // cell_w))
                      for (r, c, wh, ww) in windows]
            if crop is not None:
                pooled += [hflip_features(sf) for sf in pooled]
            for sf in pooled:
                for s in STREAMS:
                    pool_specs[s].append(_cell_spectra(
                        getattr(sf, s).cells(), params_by_stream[s]).sum(axis=0))
                    weights[s].append(mult)

    mean_desc = {}
    for s in STREAMS:
        pooled = np.fft.irfft(np.stack(pool_specs[s]), n=params_by_stream[s].d,
                              axis=-1)
        wts = np.asarray(weights[s], np.float64)
        mean_desc[s] = (wts / wts.sum()) @ _normalize_rows(pooled).astype(np.float64)
    return mean_desc


def predict_video(spatial_model: ClassifierModel | None,
                  temporal_model: ClassifierModel | None,
                  video: LoadedVideo, indices=None, K: int = 25,
                  crop="default", clip_len: int = 11, grid=(6, 6),
                  sketch_seed: int = 0, d: int = 512,
                  w_spatial: float = 1.0, w_temporal: float = 1.0,
                  flow_radius: int = 5, bank: FlowBank | None = None) -> np.ndarray:
    """Per-class pre-softmax scores for one (possibly resampled) video.

    Scores are averaged over all K x crops evaluations; since scoring is
    affine in the descriptor and fusion is affine in the scores, the
    average is computed stream-wise over descriptors first. Pass crop=None
    to disable the ten-crop protocol; the default crop is the largest one
    whose windows stay aligned to the feature cell grid.
    """
    if spatial_model is None and temporal_model is None:
        raise ValueError("need at least one stream model")
    if indices is None:
        indices = np.arange(video.length)
    if bank is None:
        bank = FlowBank(video, radius=flow_radius)
    if crop == "default":
        crop = default_crop(video.frames_u8.shape[1], video.frames_u8.shape[2], grid)
    params = {s: stream_sketch_params(sketch_seed, s, d) for s in STREAMS}
    mean_desc = _eval_stream_descriptors(
        video, bank, indices, K, clip_len, crop, grid, params)

    if spatial_model is None:
        return temporal_model.scores(mean_desc["temporal"])[0]
    if temporal_model is None:
        return spatial_model.scores(mean_desc["spatial"])[0]
    return late_fuse(spatial_model.scores(mean_desc["spatial"])[0],
                     temporal_model.scores(mean_desc["temporal"])[0],
                     w_spatial, w_temporal)


# ---------------------------------------------------------------------------
# Robustness experiment


@dataclass(frozen=True)
class ExperimentConfig:
    clip_len: int = 11
    segments: int = 3
    rts_max_stride: int = 6
    fixed_stride: int = 1
    epochs: int = 30
    learning_rate: float = 8.0
    d: int = 512
    grid: tuple = (6, 6)
    K: int = 25
    use_crops: bool = True
    test_fraction: float = 0.25
    w_spatial: float = 1.0
    w_temporal: float = 1.0
    flow_radius: int = 5
    sketch_seed: int = 0
    threads: int = 1


@dataclass(frozen=True)
class ExperimentReport:
    """Per-(regime, perturbation, seed) accuracies plus aggregate grid."""

    rows: tuple  # (regime_label, perturbation_label, seed, accuracy)
    regimes: tuple
    perturbations: tuple
    seeds: tuple
    runtime_seconds: float

    def accuracy(self, regime: str, perturbation: str, seed: int) -> float:
        for r, p, s, a in self.rows:
            if (r, p, s) == (regime, perturbation, seed):
                return a
        raise KeyError((regime, perturbation, seed))

    def mean_accuracy(self, regime: str, perturbation: str) -> float:
        vals = [a for r, p, _, a in self.rows if (r, p) == (regime, perturbation)]
        if not vals:
            raise KeyError((regime, perturbation))
        return float(np.mean(vals))

    def to_tsv(self) -> str:
        lines = ["regime\tperturbation\tseed\taccuracy"]
        for r, p, s, a in self.rows:
            lines.append(f"{r}\t{p}\t{s}\t{a:.6f}")
        return "\n".join(lines) + "\n"

    def grid_tsv(self) -> str:
        lines = ["perturbation\t" + "\t".join(self.regimes)]
        for p in self.perturbations:
            cells = [f"{self.mean_accuracy(r, p):.6f}" for r in self.regimes]
            lines.append(p + "\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"


def split_dataset(videos, test_fraction: float):
    """Deterministic stratified split: within each class (videos sorted by
    id) the last round(n * test_fraction) go to the test set."""
    by_class = {}
    for v in sorted(videos, key=lambda v: (v.class_id, v.video_id)):
        by_class.setdefault(v.class_id, []).append(v)
    train, test = [], []
    for _, vs in sorted(by_class.items()):
        n_test = max(1, int(round(len(vs) * test_fraction))) if len(vs) > 1 else 0
        train.extend(vs[: len(vs) - n_test])
        test.extend(vs[len(vs) - n_test :])
    if not test:
        raise ValueError("dataset too small to hold out a test split")
    return train, test


_PERTURB_SALT = 0x7E57


def _evaluate_models(models_by_regime, test_videos, banks, pert: Perturbation,
                     seed: int, cfg: ExperimentConfig):
    """Accuracy of each regime's model pair on the perturbed test split.

    Descriptors are model-independent, so they are computed once per video
    and scored under every regime's models.
    """
    params = {s: stream_sketch_params(cfg.sketch_seed, s, cfg.d) for s in STREAMS}
    h_w = test_videos[0].frames_u8.shape[1:]
    crop = default_crop(h_w[0], h_w[1], cfg.grid) if cfg.use_crops else None

    def job(item):
        k, video = item
        rng = derive_rng(seed, _PERTURB_SALT, k)
        idx = resample_indices(video.length, pert, rng)
        return _eval_stream_descriptors(video, banks[k], idx, cfg.K,
                                        cfg.clip_len, crop, cfg.grid, params)

    descs = _parallel_map(job, list(enumerate(test_videos)), cfg.threads)
    accuracies = {}
    for label, (ms, mt) in models_by_regime.items():
        correct = 0
        for video, mean_desc in zip(test_videos, descs):
            fused = late_fuse(ms.scores(mean_desc["spatial"])[0],
                              mt.scores(mean_desc["temporal"])[0],
                              cfg.w_spatial, cfg.w_temporal)
            pred = ms.classes[int(np.argmax(fused))]
            correct += int(pred == video.class_id)
        accuracies[label] = correct / len(test_videos)
    return accuracies


def robustness_experiment(videos, regimes, perturbations, seeds,
                          cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentReport:
    """Trains each regime on the unperturbed train split and evaluates on
    every perturbed test split; perturbations apply to test videos only."""
    t0 = time.time()
    train_videos, test_videos = split_dataset(videos, cfg.test_fraction)
    test_banks = _parallel_map(lambda v: FlowBank(v, radius=cfg.flow_radius),
                               test_videos, cfg.threads)
    rows = []
    for seed in seeds:
        models = {}
        for regime in regimes:
            trained = train_two_stream(
                train_videos, regime, cfg.epochs, cfg.learning_rate, seed,
                sketch_seed=cfg.sketch_seed, d=cfg.d, grid=cfg.grid,
                flow_radius=cfg.flow_radius, threads=cfg.threads)
            models[regime.label()] = (trained["spatial"], trained["temporal"])
        for pert in perturbations:
            acc = _evaluate_models(models, test_videos, test_banks, pert,
                                   seed, cfg)
            for regime in regimes:
                rows.append((regime.label(), pert.label(), seed,
                             acc[regime.label()]))
    order = {r.label(): i for i, r in enumerate(regimes)}
    porder = {p.label(): i for i, p in enumerate(perturbations)}
    rows.sort(key=lambda r: (order[r[0]], porder[r[1]], r[2]))
    return ExperimentReport(
        rows=tuple(rows),
        regimes=tuple(r.label() for r in regimes),
        perturbations=tuple(p.label() for p in perturbations),
        seeds=tuple(seeds),
        runtime_seconds=time.time() - t0,
    )


def default_regimes(cfg: ExperimentConfig) -> list:
    """The two training regimes of the robustness grid: random temporal
    skipping versus a fixed stride."""
    return [
        TrainRegime("rts", clip_len=cfg.clip_len, max_stride=cfg.rts_max_stride,
                    segments=cfg.segments),
        TrainRegime("fixed", clip_len=cfg.clip_len, stride=cfg.fixed_stride,
                    segments=cfg.segments),
    ]


def default_perturbations(max_gap: int = 5) -> list:
    """Test perturbations of the robustness grid: none, fixed skips of
    1/3/5 frames, and random gaps up to max_gap."""
    return [Perturbation("none"), Perturbation("fixed", 1),
            Perturbation("fixed", 3), Perturbation("fixed", 5),
            Perturbation("random", max_gap)]


def context_sweep(videos, max_strides, seeds, cfg: ExperimentConfig,
                  pert: Perturbation = Perturbation("random", 5)):
    """Accuracy as a function of the training max stride under a random
    test-rate perturbation; returns rows (max_stride, seed, accuracy)."""
    rows = []
    for m in max_strides:
        regime = TrainRegime("rts", clip_len=cfg.clip_len, max_stride=m,
                             segments=cfg.segments)
        report = robustness_experiment(videos, [regime], [pert], seeds, cfg)
        for _, _, seed, acc in report.rows:
            rows.append((m, seed, acc))
    return rows


def sweep_tsv(rows) -> str:
    lines = ["max_stride\tseed\taccuracy"]
    for m, seed, acc in rows:
        lines.append(f"{m}\t{seed}\t{acc:.6f}")
    by_m = {}
    for m, _, acc in rows:
        by_m.setdefault(m, []).append(acc)
    lines.append("")
    lines.append("max_stride\tmean_accuracy")
    for m in sorted(by_m):
        lines.append(f"{m}\t{float(np.mean(by_m[m])):.6f}")
    return "\n".join(lines) + "\n"
