"""Synthetic ultrasound-like stills and videos with exact lesion boxes.

Backgrounds are layered tissue bands plus speckle (uniform noise smoothed by
a box kernel). Lesions are soft-edged axis-aligned ellipses, darker or
brighter than their surroundings. Videos pan the background and random-walk
the lesion in integer steps, and inject blurred or background-matched frames
at configured rates.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import RngStream, derive_seed

EDGE_SOFTNESS = 0.15


class DatasetError(Exception):
    """Base class for dataset read failures."""


class ManifestError(DatasetError):
    """Manifest or annotation file is missing fields or not valid JSON."""


class MissingFrameError(DatasetError):
    """A frame file referenced by a manifest does not exist."""


class FrameFileError(DatasetError):
    """A frame file exists but is truncated or not a valid 8-bit P5 image."""


class ChecksumMismatchError(DatasetError):
    """A frame file's bytes do not match the checksum recorded for it."""


@dataclass(frozen=True)
class GroundTruthBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self.as_list()}")

    def as_list(self) -> list:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def center(self) -> tuple:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    def inside(self, width: int, height: int) -> bool:
        return 0 <= self.x0 and 0 <= self.y0 and self.x1 <= width and self.y1 <= height


@dataclass
class Frame:
    pixels: np.ndarray  # uint8 [height, width]
    boxes: list | None = None
    frame_index: int = 0
    corruption: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 2:
            raise ValueError("frame pixels must be a 2-D uint8 array")
        if self.boxes is not None:
            for b in self.boxes:
                if not b.inside(self.width, self.height):
                    raise ValueError(f"box {b.as_list()} outside {self.width}x{self.height} frame")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def normalized(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0


@dataclass
class VideoSequence:
    seq_id: str
    frames: list
    labeled: bool = True

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError(f"sequence {self.seq_id} needs at least 2 frames")
        if not self.labeled and any(f.boxes is not None for f in self.frames):
            raise ValueError(f"unlabeled sequence {self.seq_id} carries boxes")

    def __len__(self):
        return len(self.frames)

    def unlabeled(self) -> "VideoSequence":
        frames = [replace(f, boxes=None) for f in self.frames]
        return VideoSequence(self.seq_id, frames, labeled=False)


@dataclass
class GenConfig:
    image_size: int = 64
    lesion_count: tuple = (1, 1)
    lesion_radius: tuple = (5, 12)  # px, per ellipse axis
    contrast: tuple = (30, 60)  # gray levels
    background_mean: float = 110.0
    band_amplitude: float = 8.0  # gray levels of tissue layering
    speckle_amplitude: float = 90.0  # width of the raw uniform noise
    speckle_kernel: int = 3
    speckle_refresh: float = 0.35  # fraction of speckle redrawn per video frame
    max_step: int = 2  # px/frame
    step_sigma: float = 1.0
    pan_step: int = 1  # px/frame of background drift
    p_blur: float = 0.15
    p_contrast_match: float = 0.15
    blur_sigma: float = 2.5
    contrast_match_lambda: float = 0.85
    seq_length: tuple = (40, 80)
    seed: int = 0

    def validate(self):
        for name in ("lesion_count", "lesion_radius", "contrast", "seq_length"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")
        if self.lesion_count[0] < 1:
            raise ValueError("lesion_count must be at least 1")
        if self.lesion_radius[0] < 1:
            raise ValueError("lesion_radius must be at least 1 px")
        if 2 * self.lesion_radius[1] + 2 >= self.image_size:
            raise ValueError(f"lesion_radius {self.lesion_radius[1]} too large for {self.image_size}px frames")
        for name in ("p_blur", "p_contrast_match", "speckle_refresh", "contrast_match_lambda"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.p_blur + self.p_contrast_match > 1.0:
            raise ValueError("p_blur + p_contrast_match must not exceed 1")
        if self.seq_length[0] < 2:
            raise ValueError("sequences need at least 2 frames")
        if self.speckle_kernel < 1 or self.max_step < 0 or self.pan_step < 0:
            raise ValueError("speckle_kernel >= 1, max_step >= 0 and pan_step >= 0 required")
        return self


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _speckle(rng, shape, cfg: GenConfig) -> np.ndarray:
    noise = rng.uniform(-cfg.speckle_amplitude / 2, cfg.speckle_amplitude / 2, size=shape)
    return ndimage.uniform_filter(noise, size=cfg.speckle_kernel, mode="wrap")


def _bands(rng, height: int, cfg: GenConfig) -> np.ndarray:
    period = rng.uniform(48, 96)
    phase = rng.uniform(0, 2 * np.pi)
    y = np.arange(height)
    return cfg.band_amplitude * np.sin(2 * np.pi * y / period + phase)


def lesion_alpha(shape, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    """Soft ellipse opacity in [0, 1]; zero outside the ellipse."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    d = np.sqrt(((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2)
    return np.clip((1.0 - d) / EDGE_SOFTNESS, 0.0, 1.0)


def support_box(alpha: np.ndarray) -> GroundTruthBox:
    rows = np.flatnonzero(alpha.any(axis=1))
    cols = np.flatnonzero(alpha.any(axis=0))
    return GroundTruthBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


@dataclass
class _Lesion:
    cx: float
    cy: float
    rx: float
    ry: float
    amplitude: float  # signed contrast

    def alpha(self, size: int) -> np.ndarray:
        return lesion_alpha((size, size), self.cx, self.cy, self.rx, self.ry)


def _draw_lesion(rng, cfg: GenConfig) -> _Lesion:
    size = cfg.image_size
    rx = int(rng.integers(cfg.lesion_radius[0], cfg.lesion_radius[1] + 1))
    ry = int(rng.integers(cfg.lesion_radius[0], cfg.lesion_radius[1] + 1))
    # integer centres keep the rendered support shift-exact under integer motion
    cx = int(rng.integers(rx + 1, size - rx))
    cy = int(rng.integers(ry + 1, size - ry))
    sign = 1.0 if rng.uniform() < 0.3 else -1.0
    amp = sign * rng.uniform(cfg.contrast[0], cfg.contrast[1])
    return _Lesion(float(cx), float(cy), float(rx), float(ry), float(amp))


def _compose(background: np.ndarray, lesions, cfg: GenConfig):
    img = background.copy()
    boxes = []
    for les in lesions:
        a = les.alpha(cfg.image_size)
        img += les.amplitude * a
        boxes.append(support_box(a))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), boxes


def _check_cfg(cfg: GenConfig):
    cfg.validate()


def _render_still(cfg: GenConfig, seed: int, index: int) -> Frame:
    rng = RngStream(seed).gen
    size = cfg.image_size
    bg = cfg.background_mean + _bands(rng, size, cfg)[:, None] + _speckle(rng, (size, size), cfg)
    n = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    lesions = [_draw_lesion(rng, cfg) for _ in range(n)]
    pixels, boxes = _compose(bg, lesions, cfg)
    return Frame(pixels, boxes, frame_index=index)


def gen_stills(cfg: GenConfig, n: int, purpose: str = "stills") -> list:
    """``n`` independent labeled stills; item ``i`` depends only on (seed, purpose, i)."""
    _check_cfg(cfg)
    if n < 1:
        raise ValueError("need at least one still")
    return [_render_still(cfg, derive_seed(cfg.seed, f"{purpose}/{i}"), i) for i in range(n)]


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------


def _annulus_mask(box: GroundTruthBox, shape, margin: int = 4) -> np.ndarray:
    h, w = shape
    outer = np.zeros(shape, dtype=bool)
    outer[max(0, box.y0 - margin) : min(h, box.y1 + margin), max(0, box.x0 - margin) : min(w, box.x1 + margin)] = True
    outer[box.y0 : box.y1, box.x0 : box.x1] = False
    return outer


def box_alpha(box: GroundTruthBox, shape) -> np.ndarray:
    """Soft ellipse inscribed in ``box``; matches the renderer for axis-aligned lesions."""
    cx, cy = box.center
    return lesion_alpha(shape, cx, cy, (box.x1 - box.x0) / 2, (box.y1 - box.y0) / 2)


def corrupt_frame(frame: Frame, mode: str, param: float) -> Frame:
    """Return a corrupted copy; boxes are unchanged.

    ``blur``: Gaussian smoothing with standard deviation ``param`` px.
    ``contrast_match``: shift each lesion towards the mean of a surrounding
    annulus, weighted by the lesion's soft opacity, so its interior mean moves
    by ``param`` times the interior/background gap.
    """
    if mode == "blur":
        if param < 0:
            raise ValueError(f"blur sigma must be >= 0, got {param}")
        if param == 0:
            return replace(frame, pixels=frame.pixels.copy())
        out = ndimage.gaussian_filter(frame.pixels.astype(np.float64), sigma=param, mode="reflect")
    elif mode == "contrast_match":
        if not 0.0 <= param <= 1.0:
            raise ValueError(f"contrast_match lambda must lie in [0, 1], got {param}")
        if not frame.boxes:
            raise ValueError("contrast_match needs the lesion boxes")
        out = frame.pixels.astype(np.float64)
        for box in frame.boxes:
            a = box_alpha(box, out.shape)
            support = a > 0
            bg_mean = out[_annulus_mask(box, out.shape)].mean()
            gap = bg_mean - out[support].mean()
            out = out + param * gap * a / a[support].mean()
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    pixels = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return replace(frame, pixels=pixels, corruption=mode)


# ---------------------------------------------------------------------------
# videos
# ---------------------------------------------------------------------------


def _walk(rng, pos: float, lo: float, hi: float, cfg: GenConfig) -> float:
    step = int(np.clip(np.rint(rng.normal(0, cfg.step_sigma)), -cfg.max_step, cfg.max_step))
    return float(np.clip(pos + step, lo, hi))


def gen_sequence(cfg: GenConfig, seq_id: str | None = None) -> VideoSequence:
    """One labeled sequence; strip boxes with ``.unlabeled()`` for unlabeled sets."""
    _check_cfg(cfg)
    rng = RngStream(cfg.seed).gen
    size = cfg.image_size
    length = int(rng.integers(cfg.seq_length[0], cfg.seq_length[1] + 1))
    pad = cfg.pan_step * length + 2
    field_size = size + 2 * pad
    bands = _bands(rng, field_size, cfg)[:, None]
    speckle = _speckle(rng, (field_size, field_size), cfg)
    n = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    lesions = [_draw_lesion(rng, cfg) for _ in range(n)]
    ox, oy = pad, pad
    frames = []
    for t in range(length):
        if t > 0:
            for les in lesions:
                les.cx = _walk(rng, les.cx, les.rx + 1, size - les.rx - 1, cfg)
                les.cy = _walk(rng, les.cy, les.ry + 1, size - les.ry - 1, cfg)
            ox = int(np.clip(ox + rng.integers(-cfg.pan_step, cfg.pan_step + 1), 0, 2 * pad))
            oy = int(np.clip(oy + rng.integers(-cfg.pan_step, cfg.pan_step + 1), 0, 2 * pad))
            fresh = _speckle(rng, (field_size, field_size), cfg)
            speckle = np.sqrt(1 - cfg.speckle_refresh) * speckle + np.sqrt(cfg.speckle_refresh) * fresh
        bg = cfg.background_mean + bands[oy : oy + size] + speckle[oy : oy + size, ox : ox + size]
        pixels, boxes = _compose(bg, lesions, cfg)
        frame = Frame(pixels, boxes, frame_index=t)
        u = rng.uniform()
        if u < cfg.p_blur:
            frame = corrupt_frame(frame, "blur", cfg.blur_sigma)
        elif u < cfg.p_blur + cfg.p_contrast_match:
            frame = corrupt_frame(frame, "contrast_match", cfg.contrast_match_lambda)
        frames.append(frame)
    return VideoSequence(seq_id or f"seq{cfg.seed:016x}", frames, labeled=True)


def gen_videos(cfg: GenConfig, n: int, purpose: str, labeled: bool = True) -> list:
    """``n`` sequences, each from its own sub-seed of (cfg.seed, purpose)."""
    out = []
    for i in range(n):
        sub = replace(cfg, seed=derive_seed(cfg.seed, f"{purpose}/{i}"))
        seq = gen_sequence(sub, seq_id=f"{purpose}_{i:03d}")
        out.append(seq if labeled else seq.unlabeled())
    return out


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _load_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ManifestError(f"{path}: missing") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from e


def encode_pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def decode_pgm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    parts = data.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FrameFileError(f"{name}: not a binary P5 image")
    try:
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError as e:
        raise FrameFileError(f"{name}: bad P5 header") from e
    if maxval != 255:
        raise FrameFileError(f"{name}: only 8-bit images are supported (maxval {maxval})")
    header_len = len(data) - len(parts[4]) if len(parts) == 5 else len(data)
    payload = data[header_len:]
    if len(payload) != w * h:
        raise FrameFileError(f"{name}: truncated pixel data ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _read_frame_file(path: Path, checksum: str | None) -> np.ndarray:
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise MissingFrameError(f"{path}: frame file missing") from e
    pixels = decode_pgm(data, str(path))
    if checksum is not None and _sha256(data) != checksum:
        raise ChecksumMismatchError(f"{path}: checksum mismatch")
    return pixels


def _boxes_to_json(boxes):
    return None if boxes is None else [b.as_list() for b in boxes]


def _boxes_from_json(raw, where: str):
    if raw is None:
        return None
    try:
        return [GroundTruthBox(*[int(v) for v in b]) for b in raw]
    except (TypeError, ValueError) as e:
        raise ManifestError(f"{where}: malformed box list {raw!r}") from e


def write_sequence(path, seq: VideoSequence):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    annotations, corruptions, checksums = [], [], []
    for i, fr in enumerate(seq.frames):
        data = encode_pgm(fr.pixels)
        (root / f"frame_{i:05d}.pgm").write_bytes(data)
        annotations.append(_boxes_to_json(fr.boxes) if seq.labeled else None)
        corruptions.append(fr.corruption)
        checksums.append(_sha256(data))
    manifest = {
        "seq_id": seq.seq_id,
        "num_frames": len(seq.frames),
        "labeled": seq.labeled,
        "annotations": annotations,
        "corruptions": corruptions,
        "checksums": checksums,
    }
    _dump_json(manifest, root / "manifest.json")


def read_sequence(path) -> VideoSequence:
    root = Path(path)
    man = _load_json(root / "manifest.json")
    try:
        n = int(man["num_frames"])
        labeled = bool(man["labeled"])
        seq_id = str(man["seq_id"])
        annotations = man["annotations"]
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{root / 'manifest.json'}: missing or bad field {e}") from e
    if not isinstance(annotations, list) or len(annotations) != n:
        raise ManifestError(f"{root / 'manifest.json'}: annotations must list {n} entries")
    corruptions = man.get("corruptions") or [None] * n
    checksums = man.get("checksums") or [None] * n
    frames = []
    for i in range(n):
        pixels = _read_frame_file(root / f"frame_{i:05d}.pgm", checksums[i])
        boxes = _boxes_from_json(annotations[i], f"{root} frame {i}")
        if not labeled and boxes is not None:
            raise ManifestError(f"{root}: unlabeled sequence has annotations on frame {i}")
        frames.append(Frame(pixels, boxes, frame_index=i, corruption=corruptions[i]))
    return VideoSequence(seq_id, frames, labeled=labeled)


def write_stills(path, stills: list):
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    annotations, checksums = {}, {}
    for i, fr in enumerate(stills):
        name = f"still_{i:05d}.pgm"
        data = encode_pgm(fr.pixels)
        (root / "images" / name).write_bytes(data)
        annotations[name] = _boxes_to_json(fr.boxes) or []
        checksums[name] = _sha256(data)
    _dump_json(annotations, root / "annotations.json")
    _dump_json(checksums, root / "checksums.json")


def read_stills(path) -> list:
    root = Path(path)
    annotations = _load_json(root / "annotations.json")
    if not isinstance(annotations, dict):
        raise ManifestError(f"{root / 'annotations.json'}: expected a filename -> boxes mapping")
    checksums = _load_json(root / "checksums.json") if (root / "checksums.json").exists() else {}
    out = []
    for i, name in enumerate(sorted(annotations)):
        pixels = _read_frame_file(root / "images" / name, checksums.get(name))
        out.append(Frame(pixels, _boxes_from_json(annotations[name], name), frame_index=i))
    return out


def write_dataset(path, items):
    """Write stills (a list of Frame) or videos (a list of VideoSequence, one directory each)."""
    root = Path(path)
    items = list(items)
    if items and isinstance(items[0], VideoSequence):
        root.mkdir(parents=True, exist_ok=True)
        for seq in items:
            write_sequence(root / seq.seq_id, seq)
    else:
        write_stills(root, items)


def read_dataset(path):
    root = Path(path)
    if (root / "annotations.json").exists():
        return read_stills(root)
    if (root / "manifest.json").exists():
        return [read_sequence(root)]
    subdirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists()) if root.is_dir() else []
    if not subdirs:
        raise ManifestError(f"{root}: no annotations.json or sequence manifests found")
    return [read_sequence(p) for p in subdirs]


def frame_digest(frame: Frame) -> str:
    return hashlib.sha256(frame.pixels.tobytes()).hexdigest()


GENCONFIG_FIELDS = [f.name for f in fields(GenConfig)]
