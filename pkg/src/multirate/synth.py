"""Synthetic multirate videos with exact ground-truth flow and occlusion.

Scenes are textured-noise backgrounds with rigid rectangular sprites whose
per-frame displacements are rounded to integers before rendering, so the
ground-truth warp is exact: feeding the ground-truth flow to the inverse
warp reproduces the previous frame bit-for-bit on non-occluded pixels.

Motion classes differ only in their speed profile (constant slow/fast,
accelerating, oscillating); appearance statistics are identical across
classes, so recognizing a class requires temporal analysis.

Dataset layout on disk: <root>/<class_id>/<video_id>/frame_%05d.pgm plus a
manifest.tsv with tab-separated (video_id, class_id, num_frames,
relative_path) records.
"""
from __future__ import annotations

import concurrent.futures
import os
from dataclasses import dataclass

import numpy as np

from .media import BinaryMask, FlowField, Frame, save_frame
from .sampling import derive_rng

MANIFEST_NAME = "manifest.tsv"
FRAME_PATTERN = "frame_%05d.pgm"

MOTION_FAMILIES = ("constant_slow", "constant_fast", "accelerating", "oscillating")


@dataclass(frozen=True)
class Sprite:
    """Rigid textured rectangle: top-left start position (row, col) in float
    pixels and one (drow, dcol) velocity per frame step."""

    texture: np.ndarray
    start: tuple
    velocity: np.ndarray

    def __post_init__(self):
        tex = np.ascontiguousarray(self.texture, dtype=np.float32)
        vel = np.ascontiguousarray(self.velocity, dtype=np.float64)
        if tex.ndim != 2 or tex.size == 0:
            raise ValueError("sprite texture must be a non-empty 2-D grid")
        if vel.ndim != 2 or vel.shape[1] != 2:
            raise ValueError("velocity must be (steps, 2)")
        tex.setflags(write=False)
        vel.setflags(write=False)
        object.__setattr__(self, "texture", tex)
        object.__setattr__(self, "velocity", vel)
        object.__setattr__(self, "start", (float(self.start[0]), float(self.start[1])))


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    background: np.ndarray
    sprites: tuple

    def __post_init__(self):
        bg = np.ascontiguousarray(self.background, dtype=np.float32)
        if bg.shape != (self.height, self.width):
            raise ValueError("background must match the canvas size")
        bg.setflags(write=False)
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "sprites", tuple(self.sprites))


@dataclass(frozen=True)
class MotionClass:
    """A family of speed profiles; classes are distinguishable only by how
    fast (and how variably) their sprites move."""

    class_id: int
    family: str
    slow: float = 0.75
    fast: float = 3.5

    def __post_init__(self):
        if self.family not in MOTION_FAMILIES:
            raise ValueError(f"unknown motion family {self.family!r}")

    def speeds(self, steps: int, rng: np.random.Generator) -> np.ndarray:
        """Per-step scalar speeds in pixels/frame."""
        jitter = rng.uniform(0.85, 1.15)
        if self.family == "constant_slow":
            return np.full(steps, self.slow * jitter)
        if self.family == "constant_fast":
            return np.full(steps, self.fast * jitter)
        if self.family == "accelerating":
            lo = self.slow * rng.uniform(0.4, 0.8)
            hi = self.fast * jitter
            return np.linspace(lo, hi, steps)
        period = rng.uniform(12.0, 20.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        mid = 0.5 * (self.slow + self.fast)
        amp = 0.5 * (self.fast - self.slow) * jitter
        t = np.arange(steps, dtype=np.float64)
        return np.clip(mid + amp * np.sin(2.0 * np.pi * t / period + phase), 0.1, None)


@dataclass(frozen=True)
class GroundTruth:
    """Per-frame-pair flows and occlusion masks (T-1 entries each)."""

    flows_fwd: tuple
    flows_bwd: tuple
    occlusion_fwd: tuple
    occlusion_bwd: tuple


def default_motion_classes(n_classes: int) -> list:
    """n distinct classes cycling the four speed-profile families; repeats
    of a family (n > 4) get scaled speed ranges to stay distinguishable."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    classes = []
    for cid in range(n_classes):
        family = MOTION_FAMILIES[cid % len(MOTION_FAMILIES)]
        scale = 1.0 + 0.5 * (cid // len(MOTION_FAMILIES))
        classes.append(MotionClass(cid, family, slow=0.75 * scale, fast=3.5 * scale))
    return classes


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def _bounce_positions(start, velocity, lo, hi):
    """Integrates a velocity profile inside [lo, hi] per axis, reflecting at
    the walls; returns float positions (steps+1, 2)."""
    steps = velocity.shape[0]
    pos = np.empty((steps + 1, 2), dtype=np.float64)
    pos[0] = start
    vel = velocity.copy()
    for t in range(steps):
        nxt = pos[t] + vel[t]
        for ax in range(2):
            span = hi[ax] - lo[ax]
            if span <= 0:
                nxt[ax] = lo[ax]
                continue
            # reflect (possibly repeatedly) into the box, flipping direction
            while nxt[ax] < lo[ax] or nxt[ax] > hi[ax]:
                if nxt[ax] < lo[ax]:
                    nxt[ax] = 2.0 * lo[ax] - nxt[ax]
                else:
                    nxt[ax] = 2.0 * hi[ax] - nxt[ax]
                vel[t:, ax] = -vel[t:, ax]
        pos[t + 1] = nxt
    return pos


def build_scene(canvas, T: int, motion: MotionClass, rng: np.random.Generator,
                sprite_size=(12, 12), margin: int = 2,
                n_sprites: int = 1, size_jitter: int = 0) -> SceneSpec:
    """Background noise plus bouncing sprites following the class's speed
    profile (independent starts, directions and profile draws per sprite).
    Sprites stay fully on canvas minus `margin`; several sprites keep motion
    spatially dense, which the multiplicative segment aggregation needs."""
    height, width = canvas
    background = rng.random((height, width), dtype=np.float64).astype(np.float32)
    sprites = []
    for _ in range(n_sprites):
        sh, sw = sprite_size
        if size_jitter:
            sh = int(rng.integers(sh - size_jitter, sh + size_jitter + 1))
            sw = int(rng.integers(sw - size_jitter, sw + size_jitter + 1))
        if sh + 2 * margin > height or sw + 2 * margin > width:
            raise ValueError("sprite plus margin exceeds canvas")
        texture = rng.random((sh, sw), dtype=np.float64).astype(np.float32)
        lo = np.array([margin, margin], dtype=np.float64)
        hi = np.array([height - sh - margin, width - sw - margin], dtype=np.float64)
        start = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])])
        speeds = motion.speeds(T - 1, rng)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        direction = np.array([np.sin(angle), np.cos(angle)])
        velocity = speeds[:, None] * direction[None, :]
        positions = _bounce_positions(start, velocity, lo, hi)
        realized = np.diff(positions, axis=0)
        sprites.append(Sprite(texture=texture, start=tuple(start),
                              velocity=realized))
    return SceneSpec(height=height, width=width, background=background,
                     sprites=tuple(sprites))


def _cover_map(spec: SceneSpec, tops: np.ndarray) -> np.ndarray:
    """Index of the topmost sprite covering each pixel (-1 for background)."""
    cover = np.full((spec.height, spec.width), -1, dtype=np.int64)
    for s, sprite in enumerate(spec.sprites):
        sh, sw = sprite.texture.shape
        r0, c0 = int(tops[s, 0]), int(tops[s, 1])
        r1, c1 = r0 + sh, c0 + sw
        rr0, cc0 = max(r0, 0), max(c0, 0)
        rr1, cc1 = min(r1, spec.height), min(c1, spec.width)
        if rr0 >= rr1 or cc0 >= cc1:
            raise ValueError(f"sprite {s} fully off-canvas")
        cover[rr0:rr1, cc0:cc1] = s
    return cover


def _render_frame(spec: SceneSpec, tops: np.ndarray) -> np.ndarray:
    canvas = spec.background.copy()
    for s, sprite in enumerate(spec.sprites):
        sh, sw = sprite.texture.shape
        r0, c0 = int(tops[s, 0]), int(tops[s, 1])
        rr0, cc0 = max(r0, 0), max(c0, 0)
        rr1, cc1 = min(r0 + sh, spec.height), min(c0 + sw, spec.width)
        if rr0 >= rr1 or cc0 >= cc1:
            raise ValueError(f"sprite {s} fully off-canvas")
        canvas[rr0:rr1, cc0:cc1] = sprite.texture[rr0 - r0 : rr1 - r0,
                                                  cc0 - c0 : cc1 - c0]
    return canvas


def render_sequence(spec: SceneSpec, T: int, seed: int | None = None):
    """Renders T frames and the exact per-pair ground truth.

    Sprite positions are rounded to integers before drawing; the flow at a
    pixel is the realized integer displacement of its topmost sprite (zero on
    the static background). A pixel is occluded when its displaced position
    leaves the canvas or lands on a pixel owned by something else (a sprite
    arriving over background, or another sprite).

    `seed` regenerates background/textures when the spec carries none; specs
    built by build_scene already embed them, so it is unused here.
    """
    del seed
    if T < 2:
        raise ValueError("need at least 2 frames")
    for sprite in spec.sprites:
        if sprite.velocity.shape[0] < T - 1:
            raise ValueError("sprite velocity profile shorter than T-1 steps")

    n_sprites = len(spec.sprites)
    starts = np.array([s.start for s in spec.sprites], dtype=np.float64)
    # float trajectories, rounded per frame for rendering
    tops = np.empty((T, max(n_sprites, 1), 2), dtype=np.int64)
    for s, sprite in enumerate(spec.sprites):
        path = np.vstack([starts[s], starts[s] + np.cumsum(
            sprite.velocity[: T - 1], axis=0)])
        tops[:, s, :] = _round_half_up(path)

    frames = []
    covers = []
    for t in range(T):
        frames.append(Frame(_render_frame(spec, tops[t])[:, :, None]))
        covers.append(_cover_map(spec, tops[t]))

    rows, cols = np.meshgrid(np.arange(spec.height), np.arange(spec.width),
                             indexing="ij")
    flows_f, flows_b, occ_f, occ_b = [], [], [], []
    for t in range(T - 1):
        disp = tops[t + 1] - tops[t]  # (S, 2) integer (drow, dcol)
        table = np.vstack([np.zeros((1, 2), np.int64), disp])  # row 0 = background

        def direction(cover_src, cover_dst, sign):
            d = sign * table[cover_src + 1]
            u = d[:, :, 1].astype(np.float64)
            v = d[:, :, 0].astype(np.float64)
            tr = rows + d[:, :, 0]
            tc = cols + d[:, :, 1]
            off = (tr < 0) | (tr >= spec.height) | (tc < 0) | (tc >= spec.width)
            landed = cover_dst[tr.clip(0, spec.height - 1),
                               tc.clip(0, spec.width - 1)]
            occluded = off | (landed != cover_src)
            return FlowField(u, v), BinaryMask(occluded)

        ff, of = direction(covers[t], covers[t + 1], 1)
        fb, ob = direction(covers[t + 1], covers[t], -1)
        flows_f.append(ff)
        flows_b.append(fb)
        occ_f.append(of)
        occ_b.append(ob)

    gt = GroundTruth(tuple(flows_f), tuple(flows_b), tuple(occ_f), tuple(occ_b))
    return frames, gt


def gen_dataset(n_classes: int, videos_per_class: int, T: int, canvas,
                seed: int, out_dir, sprite_size=(12, 12), n_sprites: int = 7,
                threads: int = 1) -> str:
    """Writes a class-per-directory PGM dataset and returns the manifest path.

    Deterministic: each video's RNG stream derives from (seed, class, index),
    so identical seeds produce byte-identical trees at any thread count.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if videos_per_class < 1 or T < 2:
        raise ValueError("need at least 1 video per class and 2 frames")
    classes = default_motion_classes(n_classes)
    os.makedirs(out_dir, exist_ok=True)

    jobs = [(cls, vid) for cls in classes for vid in range(videos_per_class)]

    def write_video(job):
        cls, vid = job
        rng = derive_rng(seed, cls.class_id, vid)
        spec = build_scene(canvas, T, cls, rng, sprite_size=sprite_size,
                           n_sprites=n_sprites, size_jitter=2)
        frames, _ = render_sequence(spec, T)
        video_id = f"c{cls.class_id}_v{vid:03d}"
        rel = os.path.join(str(cls.class_id), video_id)
        vdir = os.path.join(out_dir, rel)
        os.makedirs(vdir, exist_ok=True)
        for i, frame in enumerate(frames):
            save_frame(frame, os.path.join(vdir, FRAME_PATTERN % i))
        return (video_id, cls.class_id, T, rel)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            records = list(ex.map(write_video, jobs))
    else:
        records = [write_video(j) for j in jobs]

    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as fh:
        for video_id, class_id, nframes, rel in records:
            fh.write(f"{video_id}\t{class_id}\t{nframes}\t{rel}\n")
    return manifest


# ---------------------------------------------------------------------------
# Frame-rate perturbations


@dataclass(frozen=True)
class Perturbation:
    """Test-time frame-rate change: 'none', 'fixed' (keep frames k apart,
    i.e. every (k+1)-th; with as_stride=True instead keep every k-th), or
    'random' (successive gaps uniform on {1, ..., k+1})."""

    kind: str
    k: int = 0
    as_stride: bool = False

    def __post_init__(self):
        if self.kind not in ("none", "fixed", "random"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.k < 0:
            raise ValueError("perturbation parameter must be >= 0")
        if self.kind == "random" and self.k < 1:
            raise ValueError("random perturbation needs a max gap >= 1")
        if self.as_stride and self.kind != "fixed":
            raise ValueError("as_stride applies to fixed perturbations only")
        if self.as_stride and self.k < 1:
            raise ValueError("stride reading requires k >= 1")

    @classmethod
    def parse(cls, text: str) -> "Perturbation":
        """Parses 'none', 'fixed:K', 'fixedstride:K' or 'random:K'."""
        name, _, arg = text.partition(":")
        if name == "none":
            return cls("none")
        if name in ("fixed", "fixedstride"):
            return cls("fixed", int(arg), as_stride=(name == "fixedstride"))
        if name == "random":
            return cls("random", int(arg))
        raise ValueError(f"cannot parse perturbation {text!r}")

    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "fixed":
            return f"{'fixedstride' if self.as_stride else 'fixed'}:{self.k}"
        return f"random:{self.k}"


def resample_indices(T: int, mode: Perturbation,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Frame indices kept by a perturbation; at least 2 must survive."""
    if mode.kind == "none":
        idx = np.arange(T, dtype=np.int64)
    elif mode.kind == "fixed":
        step = mode.k if mode.as_stride else mode.k + 1
        idx = np.arange(0, T, step, dtype=np.int64)
    else:
        if rng is None:
            raise ValueError("random perturbation needs an RNG")
        out = [0]
        while True:
            nxt = out[-1] + int(rng.integers(1, mode.k + 2))
            if nxt >= T:
                break
            out.append(nxt)
        idx = np.asarray(out, dtype=np.int64)
    if idx.shape[0] < 2:
        raise ValueError(f"video of {T} frames too short for perturbation {mode.label()}")
    return idx


def resample_video(frames, mode: Perturbation,
                   rng: np.random.Generator | None = None) -> list:
    """Applies a frame-rate perturbation to a frame list."""
    return [frames[i] for i in resample_indices(len(frames), mode, rng)]
