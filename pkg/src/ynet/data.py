"""Frames, masks, augmentation and the synthetic colonoscopy generator.

On-disk layout::

    root/{train,val,test}/<video_id>/frames/00000.png   RGB, 8 bit
    root/{train,val,test}/<video_id>/masks/00000.png    gray, >127 = polyp
    root/manifest.json
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import cv2
import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
BORDER_THRESHOLD = 10 / 255

ROTATION_RANGE = (10.0, 350.0)
ZOOM_RANGE = (1.0, 1.3)
TRANSLATION_RANGE = (-10.0, 10.0)
SHEAR_RANGE = (-25.0, 25.0)


class DatasetError(Exception):
    """Raised for malformed dataset directories."""


@dataclass
class Sample:
    """One video frame with its binary polyp mask.

    ``frame`` is ``H x W x 3``, either uint8 or float32 in [0, 1];
    ``mask`` is ``H x W`` uint8 with values in {0, 1}.
    """

    frame: np.ndarray
    mask: np.ndarray
    video_id: str = ""
    frame_index: int = 0
    flagged: bool = False
    crop_box: Optional[tuple[int, int, int, int]] = None

    def __post_init__(self):
        if self.frame.ndim != 3 or self.frame.shape[2] != 3:
            raise ValueError(f"frame must be HxWx3, got {self.frame.shape}")
        if self.mask.shape != self.frame.shape[:2]:
            raise ValueError(f"mask {self.mask.shape} does not match frame {self.frame.shape[:2]}")
        if self.mask.dtype != np.uint8:
            self.mask = self.mask.astype(np.uint8)
        if self.mask.size and self.mask.max() > 1:
            raise ValueError("mask values must be 0 or 1")

    @property
    def has_polyp(self) -> bool:
        return bool(self.mask.any())

    @property
    def size(self) -> tuple[int, int]:
        return self.frame.shape[0], self.frame.shape[1]


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def to_unit_float(frame: np.ndarray) -> np.ndarray:
    if frame.dtype == np.uint8:
        return frame.astype(np.float32) / 255.0
    return frame.astype(np.float32, copy=False)


def _border_crop(intensity: np.ndarray, threshold: float) -> Optional[tuple[int, int, int, int]]:
    rows = np.flatnonzero(intensity.mean(axis=1) >= threshold)
    if rows.size == 0:
        return None
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    cols = np.flatnonzero(intensity[y0:y1].mean(axis=0) >= threshold)
    if cols.size == 0:
        return None
    return y0, int(cols[0]), y1, int(cols[-1]) + 1


def resize_pair(frame: np.ndarray, mask: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear for the frame, nearest for the mask; no-op when already sized."""
    if frame.shape[:2] == (height, width):
        return frame, mask
    frame = cv2.resize(frame, (width, height), interpolation=cv2.INTER_LINEAR)
    mask = cv2.resize(mask, (width, height), interpolation=cv2.INTER_NEAREST_EXACT)
    return frame, mask


def preprocess(sample: Sample, target_size: int = 224, threshold: float = BORDER_THRESHOLD) -> Sample:
    """Crop black margins, resize to ``target_size`` and scale to [0, 1]."""
    if target_size % 32:
        raise ValueError(f"target_size must be divisible by 32, got {target_size}")
    frame = to_unit_float(sample.frame)
    box = _border_crop(frame.mean(axis=2), threshold)
    if box is None:
        logger.warning("frame %s/%s is entirely black", sample.video_id, sample.frame_index)
        mask = cv2.resize(sample.mask, (target_size, target_size), interpolation=cv2.INTER_NEAREST_EXACT)
        return replace(
            sample,
            frame=np.zeros((target_size, target_size, 3), np.float32),
            mask=mask,
            flagged=True,
            crop_box=(0, 0) + sample.size,
        )
    y0, x0, y1, x1 = box
    frame, mask = resize_pair(
        np.ascontiguousarray(frame[y0:y1, x0:x1]), np.ascontiguousarray(sample.mask[y0:y1, x0:x1]), target_size, target_size
    )
    return replace(sample, frame=np.clip(frame, 0.0, 1.0), mask=mask, crop_box=box)


def to_batch(samples: Iterable[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into ``[N, 3, S, S]`` images and ``[N, 1, S, S]`` masks."""
    samples = list(samples)
    x = np.stack([to_unit_float(s.frame).transpose(2, 0, 1) for s in samples]).astype(np.float32)
    y = np.stack([s.mask[None] for s in samples]).astype(np.float32)
    return x, y


# ---------------------------------------------------------------------------
# Offline augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0
    zoom: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    shear: float = 0.0


def draw_affine_params(rng: np.random.Generator) -> AffineParams:
    return AffineParams(
        rotation=float(rng.uniform(*ROTATION_RANGE)),
        zoom=float(rng.uniform(*ZOOM_RANGE)),
        tx=float(rng.uniform(*TRANSLATION_RANGE)),
        ty=float(rng.uniform(*TRANSLATION_RANGE)),
        shear=float(rng.uniform(*SHEAR_RANGE)),
    )


def affine_matrix(params: AffineParams, height: int, width: int) -> np.ndarray:
    """3x3 map about the image centre: translate . rotate . shear . zoom."""
    cx, cy = (width - 1) / 2, (height - 1) / 2
    th = math.radians(params.rotation)
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    zoom = np.diag([params.zoom, params.zoom, 1.0])
    shear = np.array([[1, math.tan(math.radians(params.shear)), 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    rot = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cx + params.tx], [0, 1, cy + params.ty], [0, 0, 1]], dtype=np.float64)
    return back @ rot @ shear @ zoom @ to_origin


def _warp_affine(img: np.ndarray, m: np.ndarray, interp: int) -> np.ndarray:
    h, w = img.shape[:2]
    return cv2.warpAffine(img, m[:2], (w, h), flags=interp, borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def _centered_valid_crop(valid: np.ndarray) -> Optional[tuple[int, int, int, int]]:
    """Largest centred, aspect-preserving window lying fully inside ``valid``."""
    h, w = valid.shape
    for k in range(0, min(h, w) // 2):
        kx = round(k * w / h)
        window = valid[k:h - k, kx:w - kx]
        if window.size and window.all():
            return k, kx, h - k, w - kx
    return None


def warp_and_center(sample: Sample, params: AffineParams) -> Optional[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Apply the affine map, then shift so the mask centroid sits at the image centre.

    Returns (frame, mask, valid) at the input size, where ``valid`` marks
    pixels that came from inside the source image; None if the polyp is lost.
    """
    h, w = sample.size
    m = affine_matrix(params, h, w)
    mask = _warp_affine(sample.mask, m, cv2.INTER_NEAREST)
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    shift = np.array(
        [[1, 0, round((w - 1) / 2 - xs.mean())], [0, 1, round((h - 1) / 2 - ys.mean())], [0, 0, 1]], dtype=np.float64
    )
    m = shift @ m
    frame = _warp_affine(sample.frame, m, cv2.INTER_LINEAR)
    mask = _warp_affine(sample.mask, m, cv2.INTER_NEAREST)
    valid = _warp_affine(np.ones((h, w), np.uint8), m, cv2.INTER_NEAREST).astype(bool)
    return frame, mask, valid


def apply_offline(sample: Sample, params: AffineParams, min_keep: float = 0.25) -> Optional[Sample]:
    """Warp, centre the polyp, crop out padded borders and resize back.

    Returns None when the transform loses the polyp or leaves too little
    valid image.
    """
    warped = warp_and_center(sample, params)
    if warped is None:
        return None
    frame, mask, valid = warped
    h, w = sample.size
    box = _centered_valid_crop(valid)
    if box is None or (box[2] - box[0]) < min_keep * h:
        return None
    y0, x0, y1, x1 = box
    frame, mask = resize_pair(
        np.ascontiguousarray(frame[y0:y1, x0:x1]), np.ascontiguousarray(mask[y0:y1, x0:x1]), h, w
    )
    if not mask.any():
        return None
    return replace(sample, frame=frame, mask=mask)


def augment_offline(sample: Sample, rng: np.random.Generator, max_retries: int = 10) -> Optional[Sample]:
    """One random affine copy of a polyp frame, or None after ``max_retries`` failures."""
    if not sample.has_polyp:
        raise ValueError("offline augmentation needs a frame with a polyp")
    for _ in range(max_retries):
        out = apply_offline(sample, draw_affine_params(rng))
        if out is not None:
            return out
    logger.info("offline augmentation skipped %s/%s after %d retries", sample.video_id, sample.frame_index, max_retries)
    return None


def double_polyp_frames(samples: list[Sample], rng: np.random.Generator) -> list[Sample]:
    """Append one augmented copy of every polyp frame."""
    extra = []
    for s in samples:
        if s.has_polyp:
            aug = augment_offline(s, rng)
            if aug is not None:
                extra.append(aug)
    return list(samples) + extra


# ---------------------------------------------------------------------------
# Online augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OnlineProbs:
    crop: float = 0.3
    perspective: float = 0.4
    hflip: float = 0.5
    vflip: float = 0.5
    jitter: float = 0.1


NO_AUGMENT = OnlineProbs(0.0, 0.0, 0.0, 0.0)


def crop_non_polyp(sample: Sample, rng: np.random.Generator, min_frac: float = 0.25) -> Optional[Sample]:
    """Crop a random square lying outside the polyp bounding box, resized to full size.

    Returns None when no margin around the polyp is large enough.
    """
    h, w = sample.size
    ys, xs = np.nonzero(sample.mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    min_side = max(2, int(round(min_frac * min(h, w))))
    # (top, left, height, width) of the four strips around the box
    strips = [(0, 0, y0, w), (y1, 0, h - y1, w), (0, 0, h, x0), (0, x1, h, w - x1)]
    strips = [s for s in strips if min(s[2], s[3]) >= min_side]
    if not strips:
        return None
    top, left, sh, sw = strips[int(rng.integers(len(strips)))]
    side = int(rng.integers(min_side, min(sh, sw) + 1))
    cy = top + int(rng.integers(0, sh - side + 1))
    cx = left + int(rng.integers(0, sw - side + 1))
    frame = cv2.resize(np.ascontiguousarray(sample.frame[cy:cy + side, cx:cx + side]), (w, h), interpolation=cv2.INTER_LINEAR)
    return replace(sample, frame=frame, mask=np.zeros((h, w), np.uint8))


def perspective_warp(sample: Sample, rng: np.random.Generator, jitter: float = 0.1) -> Sample:
    h, w = sample.size
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float32)
    offsets = rng.uniform(-jitter, jitter, size=(4, 2)) * np.array([w, h])
    dst = (src + offsets).astype(np.float32)
    m = cv2.getPerspectiveTransform(src, dst)
    frame = cv2.warpPerspective(sample.frame, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    mask = cv2.warpPerspective(sample.mask, m, (w, h), flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT)
    return replace(sample, frame=frame, mask=mask)


def hflip(sample: Sample) -> Sample:
    return replace(sample, frame=np.ascontiguousarray(sample.frame[:, ::-1]), mask=np.ascontiguousarray(sample.mask[:, ::-1]))


def vflip(sample: Sample) -> Sample:
    return replace(sample, frame=np.ascontiguousarray(sample.frame[::-1]), mask=np.ascontiguousarray(sample.mask[::-1]))


def augment_online(sample: Sample, rng: np.random.Generator, probs: OnlineProbs = OnlineProbs()) -> Sample:
    """Per-iteration augmentation.

    Polyp frames may get a non-polyp crop (p=0.3); every frame may get a
    perspective warp (p=0.4) and is flipped horizontally and vertically
    with p=0.5 each. The four coin flips are always drawn so the stream stays aligned.
    """
    do_crop, do_persp, do_h, do_v = rng.random(4) < [probs.crop, probs.perspective, probs.hflip, probs.vflip]
    out = sample
    if do_crop and out.has_polyp:
        cropped = crop_non_polyp(out, rng)
        if cropped is not None:
            out = cropped
    if do_persp:
        out = perspective_warp(out, rng, probs.jitter)
    if do_h:
        out = hflip(out)
    if do_v:
        out = vflip(out)
    return out


# ---------------------------------------------------------------------------
# Manifest and disk I/O
# ---------------------------------------------------------------------------


@dataclass
class VideoEntry:
    video_id: str
    split: str
    frames: list[str]
    masks: list[str]
    has_polyp: bool

    @property
    def frame_indices(self) -> list[int]:
        return [int(Path(p).stem) for p in self.frames]


@dataclass
class DatasetManifest:
    root: str
    videos: list[VideoEntry] = field(default_factory=list)

    def split(self, name: str) -> list[VideoEntry]:
        return [v for v in self.videos if v.split == name]

    def to_dict(self) -> dict:
        return {
            "videos": [
                {"video_id": v.video_id, "split": v.split, "has_polyp": v.has_polyp, "frames": v.frames, "masks": v.masks}
                for v in self.videos
            ]
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, root: Union[str, Path]) -> "DatasetManifest":
        raw = json.loads(text)
        videos = [VideoEntry(v["video_id"], v["split"], v["frames"], v["masks"], v["has_polyp"]) for v in raw["videos"]]
        return cls(str(root), videos)

    def iter_samples(self, split: str) -> Iterable[Sample]:
        root = Path(self.root)
        for video in self.split(split):
            for idx, fp, mp in zip(video.frame_indices, video.frames, video.masks):
                yield read_sample(root / fp, root / mp, video.video_id, idx)

    def load_split(self, split: str, target_size: Optional[int] = None) -> list[Sample]:
        out = []
        for s in self.iter_samples(split):
            out.append(preprocess(s, target_size) if target_size else s)
        return out

    def num_frames(self, split: Optional[str] = None) -> int:
        return sum(len(v.frames) for v in self.videos if split is None or v.split == split)


def read_frame(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_mask(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def read_sample(frame_path, mask_path, video_id: str = "", frame_index: int = 0) -> Sample:
    return Sample(read_frame(frame_path), read_mask(mask_path), video_id, frame_index)


def write_png(path: Union[str, Path], arr: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_manifest(root: Union[str, Path]) -> DatasetManifest:
    """Scan ``root`` and validate frame/mask pairing."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    videos: list[VideoEntry] = []
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            continue
        for vdir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            frame_files = sorted((vdir / "frames").glob("*.png"))
            mask_dir = vdir / "masks"
            if not mask_dir.is_dir():
                raise DatasetError(f"{vdir}: missing masks directory for {len(frame_files)} frames")
            mask_files = sorted(mask_dir.glob("*.png"))
            frame_names = {p.name for p in frame_files}
            mask_names = {p.name for p in mask_files}
            orphans = sorted(frame_names - mask_names)
            if orphans:
                paths = [str(vdir / "frames" / n) for n in orphans]
                raise DatasetError(f"frames without masks: {paths}")
            stray = sorted(mask_names - frame_names)
            if stray:
                paths = [str(mask_dir / n) for n in stray]
                raise DatasetError(f"masks without frames: {paths}")
            try:
                indices = [int(p.stem) for p in frame_files]
            except ValueError as exc:
                raise DatasetError(f"{vdir}: frame names must be numeric ({exc})") from None
            if any(b <= a for a, b in zip(indices, indices[1:])):
                raise DatasetError(f"{vdir}: frame indices are not strictly increasing")
            has_polyp = any(read_mask(p).any() for p in mask_files)
            videos.append(
                VideoEntry(
                    vdir.name,
                    split,
                    [p.relative_to(root).as_posix() for p in frame_files],
                    [p.relative_to(root).as_posix() for p in mask_files],
                    has_polyp,
                )
            )
    if not videos:
        logger.warning("dataset root %s contains no videos", root)
    return DatasetManifest(str(root), videos)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def pink_noise(rng: np.random.Generator, size: int, exponent: float = 1.5) -> np.ndarray:
    """Smooth 1/f^exponent texture normalised to [0, 1]."""
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx ** 2 + fy ** 2)
    f[0, 0] = 1.0
    spectrum = np.fft.rfft2(white) / f ** exponent
    spectrum[0, 0] = 0
    tex = np.fft.irfft2(spectrum, s=(size, size))
    tex -= tex.min()
    return tex / max(tex.max(), 1e-12)


@dataclass
class _PolypTrack:
    cy: float
    cx: float
    vy: float
    vx: float
    radius: float
    ratio: float
    angle: float
    tint: np.ndarray


def _new_track(rng: np.random.Generator, size: int) -> _PolypTrack:
    diameter = rng.uniform(0.05, 0.30) * size
    radius = diameter / 2
    margin = radius + 1
    return _PolypTrack(
        cy=float(rng.uniform(margin, size - margin)),
        cx=float(rng.uniform(margin, size - margin)),
        vy=float(rng.uniform(-0.6, 0.6)),
        vx=float(rng.uniform(-0.6, 0.6)),
        radius=float(radius),
        ratio=float(rng.uniform(0.6, 1.0)),
        angle=float(rng.uniform(0, np.pi)),
        tint=np.array([rng.uniform(0.85, 1.0), rng.uniform(0.55, 0.75), rng.uniform(0.35, 0.5)]),
    )


def _advance(track: _PolypTrack, size: int) -> None:
    track.cy += track.vy
    track.cx += track.vx
    r = track.radius + 1
    if not r <= track.cy <= size - r:
        track.vy = -track.vy
        track.cy = float(np.clip(track.cy, r, size - r))
    if not r <= track.cx <= size - r:
        track.vx = -track.vx
        track.cx = float(np.clip(track.cx, r, size - r))


def render_frame(
    rng: np.random.Generator, texture: np.ndarray, offset: tuple[int, int], size: int, track: Optional[_PolypTrack]
) -> tuple[np.ndarray, np.ndarray]:
    """Mucosa background with an optional dome-shaded polyp and its mask."""
    oy, ox = offset
    tex = texture[oy:oy + size, ox:ox + size]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    r2 = ((yy - c) ** 2 + (xx - c) ** 2) / (2 * c * c)
    vignette = 1.0 - 0.55 * r2
    base = np.stack([0.62 + 0.3 * tex, 0.22 + 0.22 * tex, 0.2 + 0.15 * tex], axis=-1)
    img = base * vignette[..., None]
    mask = np.zeros((size, size), np.uint8)
    if track is not None:
        cos, sin = np.cos(track.angle), np.sin(track.angle)
        dy, dx = yy - track.cy, xx - track.cx
        u = (dx * cos + dy * sin) / track.radius
        v = (-dx * sin + dy * cos) / (track.radius * track.ratio)
        rho2 = u * u + v * v
        inside = rho2 <= 1.0
        if not inside.any():
            iy, ix = int(round(track.cy)), int(round(track.cx))
            inside[np.clip(iy, 0, size - 1), np.clip(ix, 0, size - 1)] = True
        dome = np.sqrt(np.clip(1 - rho2, 0, 1))
        light = 0.55 + 0.45 * dome - 0.15 * (u + v) * dome
        polyp = track.tint[None, None, :] * light[..., None] * (0.85 + 0.15 * tex[..., None])
        highlight = np.exp(-((u + 0.35) ** 2 + (v + 0.35) ** 2) / 0.02)
        polyp = polyp + 0.6 * highlight[..., None]
        img = np.where(inside[..., None], polyp * (0.8 + 0.2 * vignette[..., None]), img)
        mask = inside.astype(np.uint8)
    img = img + rng.normal(0, 0.015, img.shape)
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8), mask


def _video_plan(rng: np.random.Generator, count: int, n_pos: int, frames_per_video: int) -> list[tuple[int, int]]:
    """List of (lead-in negative frames, polyp frames) per video; totals are exact."""
    plan = []
    pos_left, neg_left = n_pos, count - n_pos
    want_polyp = True
    while pos_left + neg_left > 0:
        length = min(frames_per_video, pos_left + neg_left)
        if pos_left > 0 and (want_polyp or neg_left == 0):
            lead = min(int(rng.integers(0, length // 3 + 1)), neg_left)
            pos = min(length - lead, pos_left)
            plan.append((lead, pos))
            neg_left -= lead
            pos_left -= pos
        else:
            neg = min(length, neg_left)
            plan.append((neg, 0))
            neg_left -= neg
        want_polyp = not want_polyp
    return plan


def generate_split(
    root: Union[str, Path],
    split: str,
    count: int,
    size: int,
    rng: np.random.Generator,
    polyp_fraction: float,
    frames_per_video: int = 10,
) -> list[VideoEntry]:
    root = Path(root)
    n_pos = int(round(polyp_fraction * count))
    videos = []
    for vid, (lead, n_poly) in enumerate(_video_plan(rng, count, n_pos, frames_per_video)):
        video_id = f"vid{vid:03d}"
        vdir = root / split / video_id
        pad = 8
        texture = pink_noise(rng, size + 2 * pad)
        drift = rng.uniform(-0.5, 0.5, size=2)
        track = _new_track(rng, size) if n_poly else None
        frames, masks = [], []
        for t in range(lead + n_poly):
            oy = int(np.clip(round(pad + drift[0] * t), 0, 2 * pad))
            ox = int(np.clip(round(pad + drift[1] * t), 0, 2 * pad))
            active = track if t >= lead else None
            frame, mask = render_frame(rng, texture, (oy, ox), size, active)
            if active is not None:
                _advance(track, size)
            fp = vdir / "frames" / f"{t:05d}.png"
            mp = vdir / "masks" / f"{t:05d}.png"
            write_png(fp, frame)
            write_png(mp, mask * 255)
            frames.append(fp.relative_to(root).as_posix())
            masks.append(mp.relative_to(root).as_posix())
        videos.append(VideoEntry(video_id, split, frames, masks, n_poly > 0))
    return videos


def generate_synthetic(
    root: Union[str, Path],
    count: int,
    size: int = 64,
    rng_seed: int = 0,
    polyp_fraction: float = 0.5,
    split_counts: Optional[Mapping[str, int]] = None,
    frames_per_video: int = 10,
) -> DatasetManifest:
    """Write a synthetic dataset and its manifest.

    ``count`` frames go to the train split; ``split_counts`` may add val and
    test frames. Each split draws from its own child of ``rng_seed``.
    """
    if not 0.0 <= polyp_fraction <= 1.0:
        raise ValueError(f"polyp_fraction must lie in [0, 1], got {polyp_fraction}")
    root = Path(root)
    counts = {"train": count}
    counts.update(split_counts or {})
    children = np.random.SeedSequence(rng_seed).spawn(len(SPLITS))
    videos: list[VideoEntry] = []
    for split, child in zip(SPLITS, children):
        n = counts.get(split, 0)
        if n:
            videos += generate_split(root, split, n, size, np.random.default_rng(child), polyp_fraction, frames_per_video)
    manifest = DatasetManifest(str(root), videos)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest
