"""Video ingestion, BT.709 colour conversion, GOP schedules and synthetic sequences."""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PAD_MULTIPLE

# BT.709 luma coefficients
KR = 0.2126
KB = 0.0722
KG = 1.0 - KR - KB

IMAGE_SUFFIXES = (".png", ".bmp", ".ppm", ".jpg", ".jpeg", ".tif", ".tiff")


class DataFormatError(ValueError):
    pass


class DataIOError(IOError):
    pass


class ColorSpace(enum.Enum):
    RGB444 = "RGB444"
    YUV420 = "YUV420"


@dataclass
class Frame:
    """One RGB frame, ``pixels`` is float32 with shape (3, H, W) in [0, 1]."""

    pixels: np.ndarray
    color_space: ColorSpace = ColorSpace.RGB444

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DataFormatError(f"frame pixels must be 3xHxW, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class FrameSequence:
    frames: list[Frame]
    source_id: str = "anonymous"
    fps: float = 30.0

    def __post_init__(self):
        if self.frames:
            h, w = self.frames[0].height, self.frames[0].width
            for i, f in enumerate(self.frames):
                if (f.height, f.width) != (h, w):
                    raise DataFormatError(f"frame {i} is {f.height}x{f.width}, expected {h}x{w}")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, idx):
        return self.frames[idx]

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def stack(self) -> np.ndarray:
        """All frames as a (T, 3, H, W) float32 array."""
        return np.stack([f.pixels for f in self.frames])

    @classmethod
    def from_array(cls, arr: np.ndarray, source_id: str = "array", fps: float = 30.0) -> "FrameSequence":
        return cls([Frame(a) for a in arr], source_id=source_id, fps=fps)


@dataclass
class SequenceDescriptor:
    path: str
    pixel_format: str  # "yuv420p8" or "png_dir"
    width: int = 0
    height: int = 0
    frame_count: int = 1
    fps: float = 30.0

    def __post_init__(self):
        if self.pixel_format not in ("yuv420p8", "png_dir"):
            raise DataFormatError(f"unsupported pixel format {self.pixel_format!r}")
        if self.frame_count < 1:
            raise DataFormatError("frame_count must be >= 1")

    @property
    def frame_bytes(self) -> int:
        return self.width * self.height * 3 // 2


class FrameRole(enum.Enum):
    INTRA = "I"
    INTER = "P"


@dataclass
class GopSchedule:
    roles: list[FrameRole] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.roles)

    def intra_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r is FrameRole.INTRA]


# --------------------------------------------------------------------------- colour


def _upsample_chroma(plane: np.ndarray) -> np.ndarray:
    """2x bilinear upsampling with centre-aligned samples (half-pixel offsets), edge clamped."""
    h, w = plane.shape
    plane = plane.astype(np.float64)

    def axis_weights(n_in):
        pos = (np.arange(2 * n_in) + 0.5) / 2.0 - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    ylo, yhi, fy = axis_weights(h)
    xlo, xhi, fx = axis_weights(w)
    rows = plane[ylo] * (1 - fy)[:, None] + plane[yhi] * fy[:, None]
    return rows[:, xlo] * (1 - fx)[None, :] + rows[:, xhi] * fx[None, :]


def yuv420_to_rgb444(y_plane: np.ndarray, u_plane: np.ndarray, v_plane: np.ndarray) -> Frame:
    """8-bit limited-range BT.709 YUV 4:2:0 to RGB in [0, 1]."""
    y_plane, u_plane, v_plane = (np.asarray(p) for p in (y_plane, u_plane, v_plane))
    h, w = y_plane.shape
    if h % 2 or w % 2:
        raise DataFormatError(f"YUV420 luma must have even dimensions, got {h}x{w}")
    for name, p in (("U", u_plane), ("V", v_plane)):
        if p.shape != (h // 2, w // 2):
            raise DataFormatError(f"{name} plane is {p.shape}, expected {(h // 2, w // 2)}")

    luma = (y_plane.astype(np.float64) - 16.0) / 219.0
    pb = (_upsample_chroma(u_plane) - 128.0) / 224.0
    pr = (_upsample_chroma(v_plane) - 128.0) / 224.0

    r = luma + 2.0 * (1.0 - KR) * pr
    b = luma + 2.0 * (1.0 - KB) * pb
    g = luma - (2.0 * (1.0 - KB) * KB / KG) * pb - (2.0 * (1.0 - KR) * KR / KG) * pr
    rgb = np.clip(np.stack([r, g, b]), 0.0, 1.0)
    return Frame(rgb.astype(np.float32), ColorSpace.YUV420)


def rgb444_to_yuv420(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`yuv420_to_rgb444`; chroma is 2x2 box-averaged. Returns uint8 planes."""
    rgb = np.asarray(rgb, dtype=np.float64)
    _, h, w = rgb.shape
    if h % 2 or w % 2:
        raise DataFormatError(f"YUV420 needs even dimensions, got {h}x{w}")
    r, g, b = rgb
    luma = KR * r + KG * g + KB * b
    pb = (b - luma) / (2.0 * (1.0 - KB))
    pr = (r - luma) / (2.0 * (1.0 - KR))

    def down(p):
        return p.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    y = np.clip(np.round(16.0 + 219.0 * luma), 0, 255).astype(np.uint8)
    u = np.clip(np.round(128.0 + 224.0 * down(pb)), 0, 255).astype(np.uint8)
    v = np.clip(np.round(128.0 + 224.0 * down(pr)), 0, 255).astype(np.uint8)
    return y, u, v


def from_8bit(codes: np.ndarray) -> np.ndarray:
    """Canonical uint8 -> float32 mapping; every 8-bit path goes through here so values match bitwise."""
    return (np.asarray(codes, dtype=np.float64) / 255.0).astype(np.float32)


def to_8bit(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize_8bit(pixels: np.ndarray) -> np.ndarray:
    return from_8bit(to_8bit(pixels))


# --------------------------------------------------------------------------- I/O


def read_descriptor(path: str | os.PathLike) -> SequenceDescriptor:
    """Load a sidecar JSON descriptor. ``path`` inside it is resolved relative to the sidecar."""
    path = Path(path)
    with open(path) as fh:
        meta = json.load(fh)
    target = Path(meta.get("path", path.with_suffix(".yuv").name))
    if not target.is_absolute():
        target = path.parent / target
    fmt = meta.get("pixel_format", "png_dir" if target.is_dir() else "yuv420p8")
    return SequenceDescriptor(
        path=str(target),
        pixel_format=fmt,
        width=int(meta.get("width", 0)),
        height=int(meta.get("height", 0)),
        frame_count=int(meta.get("frame_count", 1)),
        fps=float(meta.get("fps", 30.0)),
    )


def write_yuv420(path: str | os.PathLike, seq: FrameSequence) -> SequenceDescriptor:
    """Write ``seq`` as planar 8-bit YUV420 plus a ``.json`` sidecar next to it."""
    path = Path(path)
    with open(path, "wb") as fh:
        for f in seq.frames:
            for plane in rgb444_to_yuv420(f.pixels):
                fh.write(plane.tobytes())
    desc = SequenceDescriptor(str(path), "yuv420p8", seq.width, seq.height, len(seq), seq.fps)
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump({"path": path.name, "pixel_format": "yuv420p8", "width": seq.width,
                   "height": seq.height, "frame_count": len(seq), "fps": seq.fps}, fh, indent=2)
    return desc


def write_png_dir(directory: str | os.PathLike, seq: FrameSequence) -> SequenceDescriptor:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digits = max(5, len(str(len(seq))))
    for i, f in enumerate(seq.frames):
        arr = to_8bit(f.pixels).transpose(1, 2, 0)
        Image.fromarray(arr).save(directory / f"{i:0{digits}d}.png")
    return SequenceDescriptor(str(directory), "png_dir", seq.width, seq.height, len(seq), seq.fps)


def load_sequence(desc: SequenceDescriptor, max_frames: int) -> FrameSequence:
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    path = Path(desc.path)
    if not path.exists():
        raise DataIOError(f"{path}: no such file or directory (byte offset 0)")

    if desc.pixel_format == "png_dir":
        from PIL import Image

        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataIOError(f"{path}: no image files")
        frames = []
        for p in files[:max_frames]:
            with Image.open(p) as im:
                arr = from_8bit(np.asarray(im.convert("RGB")))
            frames.append(Frame(arr.transpose(2, 0, 1)))
        return FrameSequence(frames, source_id=path.name, fps=desc.fps)

    w, h = desc.width, desc.height
    if w <= 0 or h <= 0 or w % 2 or h % 2:
        raise DataFormatError(f"YUV420 needs positive even dimensions, got {w}x{h}")
    n = min(max_frames, desc.frame_count)
    frame_bytes = desc.frame_bytes
    size = path.stat().st_size
    if size < n * frame_bytes:
        missing = (size // frame_bytes) * frame_bytes
        raise DataIOError(
            f"{path}: truncated at byte offset {size}; frame {size // frame_bytes} needs bytes "
            f"{missing}..{missing + frame_bytes - 1}"
        )
    raw = np.fromfile(path, dtype=np.uint8, count=n * frame_bytes).reshape(n, frame_bytes)
    frames = []
    for row in raw:
        y = row[: w * h].reshape(h, w)
        u = row[w * h: w * h + w * h // 4].reshape(h // 2, w // 2)
        v = row[w * h + w * h // 4:].reshape(h // 2, w // 2)
        frames.append(yuv420_to_rgb444(y, u, v))
    return FrameSequence(frames, source_id=path.stem, fps=desc.fps)


# --------------------------------------------------------------------------- sampling


def crop_random_patch(seq: FrameSequence, size: int, seed: int) -> FrameSequence:
    """Crop the same ``size`` x ``size`` window out of every frame."""
    h, w = seq.height, seq.width
    if size > min(h, w) or size < 1:
        raise ValueError(f"patch size {size} does not fit a {h}x{w} sequence")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    frames = [Frame(f.pixels[:, top:top + size, left:left + size].copy(), f.color_space) for f in seq.frames]
    return FrameSequence(frames, source_id=f"{seq.source_id}@{top},{left}", fps=seq.fps)


def make_gop_schedule(num_frames: int, gop_size: int) -> GopSchedule:
    if num_frames < 1 or gop_size < 1:
        raise ValueError("num_frames and gop_size must be >= 1")
    return GopSchedule([FrameRole.INTRA if i % gop_size == 0 else FrameRole.INTER for i in range(num_frames)])


def pad_amounts(height: int, width: int, multiple: int = PAD_MULTIPLE) -> tuple[int, int]:
    return (-height) % multiple, (-width) % multiple


# --------------------------------------------------------------------------- synthesis

PATTERNS = ("sinusoid", "noise_texture", "checker", "sprite")


@dataclass(frozen=True)
class SynthSpec:
    pattern: str = "noise_texture"
    motion: tuple[float, float] = (1.0, 0.0)
    noise_sigma: float = 0.0
    frames: int = 8
    height: int = 64
    width: int = 64
    seed: int = 0


def _periodic_texture(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "sinusoid":
        out = np.zeros((3, h, w))
        for c in range(3):
            for _ in range(3):
                fy, fx = rng.integers(1, 5), rng.integers(1, 5)
                phase = rng.uniform(0, 2 * np.pi)
                out[c] += np.cos(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
        return 0.5 + 0.15 * out
    if kind == "checker":
        period = max(2, min(h, w) // 8)
        while h % period or w % period:
            period -= 1
        base = ((yy // period + xx // period) % 2)
        tint = rng.uniform(0.2, 0.8, size=(3, 2))
        return np.stack([tint[c, 0] + (tint[c, 1] - tint[c, 0]) * base for c in range(3)])
    if kind in ("noise_texture", "sprite"):
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.fftfreq(w)[None, :]
        envelope = np.exp(-(fy ** 2 + fx ** 2) / (2 * 0.08 ** 2))
        out = []
        mix = rng.normal(size=(3, 3)) * 0.5 + np.eye(3)
        fields = []
        for _ in range(3):
            spec = np.fft.fft2(rng.normal(size=(h, w))) * envelope
            f = np.real(np.fft.ifft2(spec))
            fields.append(f / (f.std() + 1e-12))
        fields = np.stack(fields)
        for c in range(3):
            out.append(np.tensordot(mix[c], fields, axes=1))
        out = np.stack(out)
        return 0.5 + 0.12 * out / (np.abs(out).max() / 3 + 1e-12)
    raise ValueError(f"unknown pattern {kind!r}; expected one of {PATTERNS}")


def _shift_periodic(tex: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Circular translation by (dy, dx): integer shifts are exact rolls, fractional ones Fourier shifts."""
    if float(dy).is_integer() and float(dx).is_integer():
        return np.roll(tex, (int(dy), int(dx)), axis=(-2, -1))
    h, w = tex.shape[-2:]
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    phase = np.exp(-2j * np.pi * (ky * dy + kx * dx))
    return np.real(np.fft.ifft2(np.fft.fft2(tex, axes=(-2, -1)) * phase, axes=(-2, -1)))


def synth_sequence(spec: SynthSpec) -> FrameSequence:
    """Deterministic translating texture; frame k is frame 0 moved by k*motion (dx right, dy down)."""
    if spec.height < 64 or spec.width < 64:
        raise ValueError("synthetic sequences need H, W >= 64")
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    dx, dy = spec.motion
    background = _periodic_texture(spec.pattern, h, w, rng)
    sprite = None
    if spec.pattern == "sprite":
        sprite = _periodic_texture("sinusoid", h, w, rng)
        side = min(h, w) // 3
        top, left = int(rng.integers(0, h - side)), int(rng.integers(0, w - side))
    frames = []
    for k in range(spec.frames):
        img = _shift_periodic(background, k * dy, k * dx)
        if sprite is not None:
            # foreground block moving against the background creates dis-occlusions
            oy = int(round(top - 2 * k * dy)) % (h - side)
            ox = int(round(left - 2 * k * dx)) % (w - side)
            img[:, oy:oy + side, ox:ox + side] = sprite[:, oy:oy + side, ox:ox + side]
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        frames.append(Frame(quantize_8bit(img)))
    return FrameSequence(frames, source_id=f"synth-{spec.pattern}-{spec.seed}", fps=30.0)


def synth_clips(num: int, frames: int, size: int, source_size: int, max_motion: float,
                noise_sigma: float, seed: int, patterns: Sequence[str] = PATTERNS) -> np.ndarray:
    """A (num, frames, 3, size, size) float32 array of cropped synthetic clips."""
    rng = np.random.default_rng(seed)
    out = np.empty((num, frames, 3, size, size), dtype=np.float32)
    for i in range(num):
        motion = tuple(float(np.round(v, 1)) for v in rng.uniform(-max_motion, max_motion, size=2))
        spec = SynthSpec(
            pattern=str(patterns[i % len(patterns)]),
            motion=motion,
            noise_sigma=noise_sigma,
            frames=frames,
            height=source_size,
            width=source_size,
            seed=int(rng.integers(0, 2 ** 31)),
        )
        seq = crop_random_patch(synth_sequence(spec), size, seed=int(rng.integers(0, 2 ** 31)))
        out[i] = seq.stack()
    return out
