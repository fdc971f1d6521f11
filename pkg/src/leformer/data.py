"""Image/mask file I/O, dataset loading and a synthetic lake-image generator.

Dataset layout::

    root/images/<id>.png|ppm     RGB, 8 bit
    root/masks/<id>.png|pgm      single channel, 8 bit

On disk a mask stores 0 for background, 254 for "ignore" and any other value
for lake. In memory masks hold class ids {0, 1} plus 255 for ignore.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .metrics import IGNORE_INDEX

IMAGE_EXTS = (".png", ".ppm")
MASK_EXTS = (".png", ".pgm")
DISK_IGNORE = 254
DISK_LAKE = 255


class DataError(Exception):
    pass


class UnsupportedFormatError(DataError):
    pass


class CorruptFileError(DataError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1, 255}
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} differ")


# ----------------------------------------------------------------------------
# raw 8-bit codecs
# ----------------------------------------------------------------------------

def _pil():
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - exercised only without Pillow
        raise UnsupportedFormatError("PNG support needs Pillow; use .ppm/.pgm instead") from exc
    return Image


_PNM_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    m = _PNM_HEADER.match(raw)
    if not m:
        raise CorruptFileError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: only 8-bit PNM supported (maxval {maxval})")
    ch = 3 if magic == b"P6" else 1
    body = raw[m.end():]
    if len(body) < w * h * ch:
        raise CorruptFileError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body[: w * h * ch], dtype=np.uint8)
    return arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)


def _write_pnm(path: Path, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    magic = b"P6" if arr.ndim == 3 else b"P5"
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def read_raw(path) -> np.ndarray:
    """Read an 8-bit image as (H, W) or (H, W, 3) uint8."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext in (".ppm", ".pgm"):
        return _read_pnm(path)
    if ext == ".png":
        Image = _pil()
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                return np.asarray(im, dtype=np.uint8)
        except OSError as exc:
            raise CorruptFileError(f"{path}: {exc}") from exc
    raise UnsupportedFormatError(f"{path}: unsupported image format {ext!r}")


def write_raw(path, arr: np.ndarray) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if arr.dtype != np.uint8:
        raise TypeError("raw images must be uint8")
    if ext == ".ppm" and arr.ndim == 3 or ext == ".pgm" and arr.ndim == 2:
        _write_pnm(path, arr)
    elif ext == ".png":
        _pil().fromarray(arr).save(path, format="PNG", optimize=False)
    else:
        raise UnsupportedFormatError(f"{path}: cannot write {arr.ndim}-D array as {ext!r}")


# ----------------------------------------------------------------------------
# images and masks
# ----------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """RGB file -> (3, H, W) float32 in [0, 1]."""
    raw = read_raw(path)
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    return raw.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """(3, H, W) float in [0, 1] -> 8-bit RGB file."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    write_raw(path, arr.transpose(1, 2, 0))


def decode_mask(raw: np.ndarray) -> np.ndarray:
    if raw.ndim == 3:
        raw = raw[..., 0]
    out = np.where(raw == 0, 0, 1).astype(np.uint8)
    out[raw == DISK_IGNORE] = IGNORE_INDEX
    return out


def encode_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    bad = ~np.isin(mask, (0, 1, IGNORE_INDEX))
    if bad.any():
        raise DataError(f"mask values must be in {{0, 1, {IGNORE_INDEX}}}")
    out = np.zeros(mask.shape, dtype=np.uint8)
    out[mask == 1] = DISK_LAKE
    out[mask == IGNORE_INDEX] = DISK_IGNORE
    return out


def read_mask(path) -> np.ndarray:
    return decode_mask(read_raw(path))


def write_mask(path, mask: np.ndarray) -> None:
    write_raw(path, encode_mask(mask))


def overlay(image: np.ndarray, pred: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Tint predicted lake pixels; returns (3, H, W) uint8.

    Pixels are blended toward red, or toward cyan where the red blend would
    leave the quantised pixel unchanged, so every lake pixel visibly differs.
    """
    base = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    lake = np.asarray(pred) == 1
    red = np.array([255.0, 0.0, 0.0])[:, None, None]
    cyan = np.array([0.0, 255.0, 255.0])[:, None, None]
    toward_red = np.rint((1 - alpha) * base + alpha * red)
    toward_cyan = np.rint((1 - alpha) * base + alpha * cyan)
    same = np.all(toward_red == base, axis=0)
    tinted = np.where(same[None], toward_cyan, toward_red)
    return np.where(lake[None], tinted, base).astype(np.uint8)


def write_mask_overlay(image: np.ndarray, pred: np.ndarray, path) -> None:
    write_raw(path, overlay(image, pred).transpose(1, 2, 0))


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------

def _find(folder: Path, exts) -> dict:
    out = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in exts and p.is_file():
            if p.stem in out:
                raise DataError(f"{folder}: more than one file for id {p.stem!r}")
            out[p.stem] = p
    return out


def split_indices(n: int, split_ratio=(4, 1)) -> tuple:
    """Index-modulus split: within each period of ``a + b`` items the first ``b`` go to test.

    The train side gets ``floor(n * a / (a + b))`` items.
    """
    if isinstance(split_ratio, (Fraction, float, int)) and not isinstance(split_ratio, tuple):
        fr = Fraction(split_ratio).limit_denominator(1000)
        a, b = fr.numerator, fr.denominator
    else:
        a, b = (int(v) for v in split_ratio)
    if a < 0 or b < 0 or a + b == 0:
        raise ValueError(f"invalid split ratio {split_ratio}")
    period = a + b
    test = [i for i in range(n) if i % period < b]
    train = [i for i in range(n) if i % period >= b]
    return train, test


def list_pairs(root) -> list:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root}: expected images/ and masks/ subdirectories")
    images = _find(img_dir, IMAGE_EXTS)
    masks = _find(mask_dir, MASK_EXTS)
    missing = sorted(set(images) ^ set(masks))
    if missing:
        raise DataError(f"{root}: no matching image/mask pair for {missing[0]!r}")
    return [(stem, images[stem], masks[stem]) for stem in sorted(images)]


def load_sample(stem: str, image_path, mask_path) -> Sample:
    image = read_image(image_path)
    mask = read_mask(mask_path)
    if image.shape[1:] != mask.shape:
        raise DataError(f"{stem}: image size {image.shape[1:]} does not match mask size {mask.shape}")
    return Sample(image, mask, stem)


def load_dataset(root, split: str = "train", split_ratio=(4, 1)) -> list:
    """Load the ``train`` or ``test`` (or ``all``) portion of a dataset directory."""
    pairs = list_pairs(root)
    train, test = split_indices(len(pairs), split_ratio)
    if split == "train":
        chosen = train
    elif split == "test":
        chosen = test
    elif split == "all":
        chosen = range(len(pairs))
    else:
        raise ValueError(f"unknown split {split!r}")
    return [load_sample(*pairs[i]) for i in chosen]


# ----------------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    count: int = 100
    size: int = 64
    blobs: tuple = (1, 4)
    radius: tuple = (0.08, 0.22)  # fraction of image size
    noise: float = 0.06
    speckle: float = 0.01
    seed: int = 0
    fmt: str = "png"

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(int(v) for v in self.blobs))
        object.__setattr__(self, "radius", tuple(float(v) for v in self.radius))
        if self.count < 1 or self.size < 1:
            raise ValueError("count and size must be positive")
        if not 0 <= self.blobs[0] <= self.blobs[1]:
            raise ValueError(f"invalid blob count range {self.blobs}")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValueError(f"invalid radius range {self.radius}")
        if self.fmt not in ("png", "pnm"):
            raise ValueError("fmt must be 'png' or 'pnm'")


def synth_id(index: int) -> str:
    return f"synth_{index:05d}"


def _blob_field(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    field = np.zeros((s, s))
    for _ in range(int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))):
        cy, cx = rng.uniform(0, s, size=2)
        r = rng.uniform(*spec.radius) * s
        # elliptical bump, value 0.5 on its nominal boundary
        stretch = rng.uniform(0.6, 1.6)
        d2 = ((yy - cy) * stretch) ** 2 + ((xx - cx) / stretch) ** 2
        field += np.exp(-np.log(2.0) * d2 / (r * r))
    return field


def synth_mask(spec: SynthSpec, index: int) -> np.ndarray:
    """Recompute the mask of synthetic sample ``index`` without touching files."""
    return synth_sample(spec, index).mask


def synth_sample(spec: SynthSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    s = spec.size
    field = _blob_field(spec, rng)
    mask = (field > 0.5).astype(np.uint8)

    yy, xx = np.mgrid[0:s, 0:s] / max(s - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * yy + np.sin(angle) * xx
    land = rng.uniform([0.35, 0.38, 0.22], [0.6, 0.6, 0.4])[:, None, None]
    background = land + 0.15 * (ramp - 0.5)[None]
    water = rng.uniform([0.05, 0.12, 0.3], [0.15, 0.25, 0.5])[:, None, None]
    # soft shoreline: smoothstep of the blob field around the 0.5 threshold
    t = np.clip((field - 0.3) / 0.4, 0.0, 1.0)
    soft = t * t * (3 - 2 * t)
    image = background * (1 - soft[None]) + water * soft[None]
    image = image + rng.normal(0.0, spec.noise, size=image.shape)
    speck = rng.random((s, s)) < spec.speckle
    image = np.clip(image, 0.0, 1.0)
    image[:, speck] = 1.0 - image[:, speck]
    return Sample(image.astype(np.float32), mask, synth_id(index))


def generate_synthetic(spec: SynthSpec, out) -> dict:
    """Write ``spec.count`` image/mask pairs under ``out``; returns a summary."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    img_ext, mask_ext = (".png", ".png") if spec.fmt == "png" else (".ppm", ".pgm")
    fg = 0
    for i in range(spec.count):
        smp = synth_sample(spec, i)
        write_image(out / "images" / f"{smp.id}{img_ext}", smp.image)
        write_mask(out / "masks" / f"{smp.id}{mask_ext}", smp.mask)
        fg += int(smp.mask.sum())
    return {"count": spec.count, "size": spec.size, "fg_fraction": fg / (spec.count * spec.size * spec.size)}


def spec_to_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
