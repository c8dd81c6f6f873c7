"""Procedural sprite-video corpus: rendering, structural condition proxies,
corpus construction for the three data regimes, and manifest round-tripping.

Every video is a single anti-aliased sprite (circle / square / triangle in one
of six hues) translating at constant velocity over a dark background, with a
white "nose" marker on its leading edge so that even a single still frame
carries the motion intent of its caption.

Coordinate convention: x = column (east is +x), y = row, north is -y (up on
screen). All pixel values live in [-1, 1].
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .conditioning import (
    CaptionSpec,
    COLORS,
    DIRECTIONS,
    DIRECTION_ANGLES,
    SHAPES,
    SPEEDS,
)

COLOR_RGB = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
}

# Speed buckets in px/frame; the classifier threshold sits at their midpoint.
SPEED_PX = {"slow": 0.3, "fast": 0.85}
SPEED_THRESHOLD = 0.5 * (SPEED_PX["slow"] + SPEED_PX["fast"])

NOSE_COLOR = (1.0, 1.0, 1.0)
SUPERSAMPLE = 4

MANIFEST_VERSION = 1
VIDEO_MAGIC = "SVT1"
MAP_MAGIC = "SVM1"


@dataclass(frozen=True)
class VideoTensor:
    """(F, C, H, W) float array in [-1, 1]; frame_rate is metadata only."""

    data: np.ndarray
    frame_rate: float = 4.0

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"expected (F, C, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("video contains non-finite values")


@dataclass(frozen=True)
class SpriteVideoSpec:
    """Generative ground truth for one synthetic video."""

    shape: str
    color: str
    size_px: float
    start_position: tuple[float, float]  # (x, y)
    velocity_px_per_frame: tuple[float, float]  # (vx, vy), y pointing down
    orientation_rad: float  # nose direction, derived from the velocity
    background_seed: int

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "color": self.color,
            "size_px": self.size_px,
            "start_position": list(self.start_position),
            "velocity_px_per_frame": list(self.velocity_px_per_frame),
            "orientation_rad": self.orientation_rad,
            "background_seed": self.background_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpriteVideoSpec":
        return cls(
            shape=d["shape"],
            color=d["color"],
            size_px=float(d["size_px"]),
            start_position=tuple(float(v) for v in d["start_position"]),
            velocity_px_per_frame=tuple(float(v) for v in d["velocity_px_per_frame"]),
            orientation_rad=float(d["orientation_rad"]),
            background_seed=int(d["background_seed"]),
        )


def sprite_extent(size_px: float) -> float:
    """Outer radius of sprite body plus nose marker, in pixels."""
    r = size_px / 2.0
    return r * 1.15 + max(1.0, 0.35 * r) + 0.5


def background_level(background_seed: int) -> float:
    u = np.random.default_rng(background_seed).random()
    return -0.9 + 0.1 * u


def _shape_alpha(shape: str, cx: float, cy: float, r: float, H: int, W: int) -> np.ndarray:
    """Anti-aliased coverage mask via supersampling."""
    s = SUPERSAMPLE
    ys = (np.arange(H * s) + 0.5) / s - 0.5
    xs = (np.arange(W * s) + 0.5) / s - 0.5
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    dx, dy = X - cx, Y - cy
    if shape == "circle":
        inside = dx * dx + dy * dy <= r * r
    elif shape == "square":
        h = r * 0.9
        inside = np.maximum(np.abs(dx), np.abs(dy)) <= h
    elif shape == "triangle":
        # point-up triangle, circumradius 1.15 r (visual size parity)
        R = 1.15 * r
        angles = np.array([np.pi / 2, np.pi * 7 / 6, np.pi * 11 / 6])
        vx = R * np.cos(angles)
        vy = -R * np.sin(angles)  # screen y points down
        inside = np.ones_like(dx, dtype=bool)
        for i in range(3):
            ax, ay = vx[i], vy[i]
            bx, by = vx[(i + 1) % 3], vy[(i + 1) % 3]
            # screen y points down, so this vertex order winds clockwise
            cross = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
            inside &= cross <= 0
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.astype(np.float64).reshape(H, s, W, s).mean(axis=(1, 3))


def _disk_alpha(cx: float, cy: float, r: float, H: int, W: int) -> np.ndarray:
    return _shape_alpha("circle", cx, cy, r, H, W)


def render_frame(spec: SpriteVideoSpec, frame_index: int, H: int, W: int) -> np.ndarray:
    """Render one (C, H, W) frame: sprite at start + j * velocity plus nose."""
    x = spec.start_position[0] + frame_index * spec.velocity_px_per_frame[0]
    y = spec.start_position[1] + frame_index * spec.velocity_px_per_frame[1]
    r = spec.size_px / 2.0
    bg = background_level(spec.background_seed)
    frame = np.full((3, H, W), bg, dtype=np.float64)
    body = _shape_alpha(spec.shape, x, y, r, H, W)
    rgb = COLOR_RGB[spec.color]
    for c in range(3):
        frame[c] = frame[c] * (1.0 - body) + rgb[c] * body
    nose_r = max(1.0, 0.35 * r)
    nx = x + np.cos(spec.orientation_rad) * r * 1.15
    ny = y - np.sin(spec.orientation_rad) * r * 1.15
    nose = _disk_alpha(nx, ny, nose_r, H, W)
    for c in range(3):
        frame[c] = frame[c] * (1.0 - nose) + NOSE_COLOR[c] * nose
    return frame.astype(np.float32)


def render_video(spec: SpriteVideoSpec, F: int, H: int, W: int, frame_rate: float = 4.0) -> VideoTensor:
    """Deterministic render of all F frames; rejects out-of-bounds trajectories."""
    ext = sprite_extent(spec.size_px)
    for j in (0, F - 1):
        x = spec.start_position[0] + j * spec.velocity_px_per_frame[0]
        y = spec.start_position[1] + j * spec.velocity_px_per_frame[1]
        if not (ext <= x <= W - 1 - ext and ext <= y <= H - 1 - ext):
            raise ValueError(
                f"trajectory leaves canvas at frame {j}: center ({x:.2f}, {y:.2f}), "
                f"extent {ext:.2f}, canvas {W}x{H}"
            )
    frames = np.stack([render_frame(spec, j, H, W) for j in range(F)])
    return VideoTensor(frames, frame_rate)


def random_caption(rng: np.random.Generator) -> CaptionSpec:
    return CaptionSpec(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS[rng.integers(len(COLORS))],
        direction=DIRECTIONS[rng.integers(len(DIRECTIONS))],
        speed=SPEEDS[rng.integers(len(SPEEDS))],
    )


def spec_from_caption(
    caption: CaptionSpec, rng: np.random.Generator, F: int, H: int, W: int
) -> SpriteVideoSpec:
    """Sample a sprite whose motion matches the caption and whose trajectory
    stays inside the canvas for all F frames."""
    mag = SPEED_PX[caption.speed]
    angle = DIRECTION_ANGLES[caption.direction]
    vx = mag * np.cos(angle)
    vy = -mag * np.sin(angle)
    for size in rng.uniform(6.0, 11.0, size=8):
        ext = sprite_extent(size)
        lo_x = ext + max(0.0, -vx * (F - 1))
        hi_x = W - 1 - ext - max(0.0, vx * (F - 1))
        lo_y = ext + max(0.0, -vy * (F - 1))
        hi_y = H - 1 - ext - max(0.0, vy * (F - 1))
        if hi_x < lo_x or hi_y < lo_y:
            continue
        return SpriteVideoSpec(
            shape=caption.shape,
            color=caption.color,
            size_px=float(size),
            start_position=(float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))),
            velocity_px_per_frame=(float(vx), float(vy)),
            orientation_rad=float(angle),
            background_seed=int(rng.integers(2**31)),
        )
    raise ValueError(
        f"no in-bounds trajectory for caption {caption} on a {W}x{H} canvas with F={F}"
    )


# --- structural condition proxies -------------------------------------------


def detect_mask(frame: np.ndarray, threshold: float = 0.25) -> np.ndarray:
    """Sprite mask: pixels deviating from the border-median background."""
    border = np.concatenate(
        [frame[:, 0, :], frame[:, -1, :], frame[:, :, 0], frame[:, :, -1]], axis=1
    )
    bg = np.median(border, axis=1)
    dev = np.abs(frame - bg[:, None, None]).max(axis=0)
    return dev > threshold


def depth_proxy(frame: np.ndarray) -> np.ndarray:
    """Normalized sprite size inside the detected mask, 0 on background."""
    H = frame.shape[1]
    mask = detect_mask(frame)
    area = float(mask.sum())
    if area == 0.0:
        return np.zeros(frame.shape[1:], dtype=np.float32)
    value = min(1.0, np.sqrt(area) / H)
    return (value * mask).astype(np.float32)


def sketch_proxy(frame: np.ndarray, threshold: float = 0.2) -> np.ndarray:
    """Thresholded gradient magnitude of the grayscale frame."""
    gray = frame.mean(axis=0)
    gy, gx = np.gradient(gray)
    mag = np.sqrt(gx * gx + gy * gy)
    return (mag > threshold).astype(np.float32)


def motion_vector_maps(spec: SpriteVideoSpec, F: int, H: int, W: int) -> np.ndarray:
    """(F, 2, H, W) exact ground-truth flow: velocity inside the sprite mask,
    zero outside."""
    video = render_video(spec, F, H, W)
    vx, vy = spec.velocity_px_per_frame
    maps = np.zeros((F, 2, H, W), dtype=np.float32)
    for j in range(F):
        mask = detect_mask(video.data[j])
        maps[j, 0] = vx * mask
        maps[j, 1] = vy * mask
    return maps


def structural_maps_for(
    video: VideoTensor, spec: SpriteVideoSpec
) -> np.ndarray:
    """(F, 4, H, W) stack: depth, sketch, and the two flow channels."""
    F, _, H, W = video.data.shape
    mv = motion_vector_maps(spec, F, H, W)
    out = np.zeros((F, 4, H, W), dtype=np.float32)
    for j in range(F):
        out[j, 0] = depth_proxy(video.data[j])
        out[j, 1] = sketch_proxy(video.data[j])
    out[:, 2:] = mv
    return out


# --- corpora -----------------------------------------------------------------


@dataclass(frozen=True)
class CorpusItem:
    video: VideoTensor
    sprite: SpriteVideoSpec
    caption: Optional[CaptionSpec]
    caption_available: bool


@dataclass(frozen=True)
class Corpus:
    kind: str  # image_text | text_free_video | video_text
    items: tuple
    seed: int
    F: int
    H: int
    W: int
    frame_rate: float = 4.0

    @property
    def C(self) -> int:
        return 3


def _make_corpus(kind: str, n: int, seed: int, F: int, H: int, W: int, frame_rate: float) -> Corpus:
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    items = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        caption = random_caption(rng)
        sprite = spec_from_caption(caption, rng, F, H, W)
        video = render_video(sprite, F, H, W, frame_rate)
        items.append(
            CorpusItem(
                video=video,
                sprite=sprite,
                caption=caption,
                caption_available=(kind != "text_free_video"),
            )
        )
    return Corpus(kind, tuple(items), seed, F, H, W, frame_rate)


def make_image_text_pairs(n: int, seed: int, H: int = 32, W: int = 32) -> Corpus:
    """Captioned stills; each image is a single-frame video with a motion cue."""
    return _make_corpus("image_text", n, seed, 1, H, W, 4.0)


def make_text_free_videos(
    n: int, seed: int, F: int = 16, H: int = 32, W: int = 32, frame_rate: float = 4.0
) -> Corpus:
    """Videos whose captions are retained for evaluation only: the batch view
    never exposes them to training."""
    return _make_corpus("text_free_video", n, seed, F, H, W, frame_rate)


def make_video_text_pairs(
    n: int, seed: int, F: int = 16, H: int = 32, W: int = 32, frame_rate: float = 4.0
) -> Corpus:
    """Captioned videos for the semi- and fully-supervised regimes."""
    return _make_corpus("video_text", n, seed, F, H, W, frame_rate)


_MAKERS = {
    "image_text": lambda n, seed, F, H, W, fr: make_image_text_pairs(n, seed, H, W),
    "text_free_video": make_text_free_videos,
    "video_text": make_video_text_pairs,
}


def regenerate_corpus(kind: str, n: int, seed: int, F: int, H: int, W: int, frame_rate: float = 4.0) -> Corpus:
    if kind not in _MAKERS:
        raise ValueError(f"unknown corpus kind {kind!r}")
    if kind == "image_text":
        return make_image_text_pairs(n, seed, H, W)
    return _MAKERS[kind](n, seed, F, H, W, frame_rate)


# --- on-disk container format -------------------------------------------------


def write_array_file(path: str, arr: np.ndarray, magic: str, frame_rate: float = 4.0):
    """Raw little-endian float32 container with a one-line text header:
    MAGIC F C H W frame_rate float32."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 4:
        raise ValueError(f"container arrays are (F, C, H, W), got {arr.shape}")
    header = f"{magic} {arr.shape[0]} {arr.shape[1]} {arr.shape[2]} {arr.shape[3]} {frame_rate} float32\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes())


def read_array_file(path: str, magic: str) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 7 or header[0] != magic or header[6] != "float32":
            raise ValueError(f"{path}: bad container header {header}")
        shape = tuple(int(v) for v in header[1:5])
        frame_rate = float(header[5])
        data = np.frombuffer(fh.read(), dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: payload has {data.size} floats, expected {expected}")
    return data.reshape(shape).copy(), frame_rate


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(corpus: Corpus, out_dir: str, with_conditions: bool = False):
    """Persist a corpus: `manifest` (line-delimited JSON) + items/NNNNN.vid,
    plus conds/NNNNN.{depth,sketch,mv} when requested."""
    os.makedirs(os.path.join(out_dir, "items"), exist_ok=True)
    if with_conditions:
        os.makedirs(os.path.join(out_dir, "conds"), exist_ok=True)
    records = []
    for i, item in enumerate(corpus.items):
        rel = os.path.join("items", f"{i:05d}.vid")
        path = os.path.join(out_dir, rel)
        write_array_file(path, item.video.data, VIDEO_MAGIC, item.video.frame_rate)
        rec = {
            "index": i,
            "path": rel,
            "sha256": _sha256(path),
            "sprite": item.sprite.to_dict(),
            "caption": item.caption.to_dict() if item.caption else None,
            "caption_available": item.caption_available,
        }
        if with_conditions:
            maps = structural_maps_for(item.video, item.sprite)
            cond_paths = {}
            for name, sl in (("depth", maps[:, 0:1]), ("sketch", maps[:, 1:2]), ("mv", maps[:, 2:4])):
                crel = os.path.join("conds", f"{i:05d}.{name}")
                write_array_file(os.path.join(out_dir, crel), sl, MAP_MAGIC, corpus.frame_rate)
                cond_paths[name] = {"path": crel, "sha256": _sha256(os.path.join(out_dir, crel))}
            rec["conds"] = cond_paths
        records.append(rec)
    header = {
        "version": MANIFEST_VERSION,
        "kind": corpus.kind,
        "seed": corpus.seed,
        "count": len(corpus.items),
        "F": corpus.F,
        "H": corpus.H,
        "W": corpus.W,
        "C": corpus.C,
        "frame_rate": corpus.frame_rate,
    }
    with open(os.path.join(out_dir, "manifest"), "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


class ManifestError(Exception):
    pass


def read_manifest(out_dir: str, verify: bool = True) -> Corpus:
    """Load a corpus directory; fails loudly on a missing file, a version
    mismatch, or a checksum failure."""
    manifest = os.path.join(out_dir, "manifest")
    if not os.path.exists(manifest):
        raise ManifestError(f"no manifest at {manifest}")
    with open(manifest) as fh:
        header = json.loads(fh.readline())
        if header.get("version") != MANIFEST_VERSION:
            raise ManifestError(
                f"manifest version {header.get('version')} != {MANIFEST_VERSION}"
            )
        items = []
        for line in fh:
            rec = json.loads(line)
            path = os.path.join(out_dir, rec["path"])
            if not os.path.exists(path):
                raise ManifestError(f"missing item file {path}")
            if verify and _sha256(path) != rec["sha256"]:
                raise ManifestError(f"checksum mismatch for {path}")
            data, frame_rate = read_array_file(path, VIDEO_MAGIC)
            items.append(
                CorpusItem(
                    video=VideoTensor(data, frame_rate),
                    sprite=SpriteVideoSpec.from_dict(rec["sprite"]),
                    caption=CaptionSpec.from_dict(rec["caption"]) if rec["caption"] else None,
                    caption_available=bool(rec["caption_available"]),
                )
            )
    return Corpus(
        kind=header["kind"],
        items=tuple(items),
        seed=header["seed"],
        F=header["F"],
        H=header["H"],
        W=header["W"],
        frame_rate=header["frame_rate"],
    )


def read_condition_maps(out_dir: str, index: int, name: str) -> np.ndarray:
    path = os.path.join(out_dir, "conds", f"{index:05d}.{name}")
    if not os.path.exists(path):
        raise ManifestError(f"missing condition file {path}")
    data, _ = read_array_file(path, MAP_MAGIC)
    return data
