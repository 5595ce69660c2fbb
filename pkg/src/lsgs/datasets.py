"""Image samples, on-disk datasets and the synthetic desk-scale family.

On-disk layout::

    <root>/train/normal/*.png
    <root>/test/images/*.png
    <root>/test/masks/*.png      # same stem as the image, {0, 255}

Test images without a mask file are treated as normal (all-zero mask).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from lsgs.errors import ConfigError, DataError, ShapeError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
INDEX_VERSION = 1
ANOMALY_KINDS = ("structure_swap", "texture_patch")


@dataclass
class ImageSample:
    """One image in [0, 1] stored as an (H, W, C) float32 array."""

    id: str
    pixels: np.ndarray
    mask: np.ndarray | None = None
    kind: str = "normal"

    def __post_init__(self) -> None:
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[..., None]
        if self.pixels.ndim != 3:
            raise DataError(f"{self.id}: pixels must be HxWxC, got shape {self.pixels.shape}")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise DataError(
                f"{self.id}: mask shape {self.mask.shape} != image shape {self.pixels.shape[:2]}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    @property
    def is_anomalous(self) -> bool:
        return self.mask is not None and bool(self.mask.any())

    def mask_or_zeros(self) -> np.ndarray:
        if self.mask is None:
            return np.zeros(self.pixels.shape[:2], dtype=np.uint8)
        return self.mask


@dataclass
class DatasetManifest:
    split: str
    samples: list[ImageSample] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {self.split!r}")
        if not self.samples:
            return
        shape = self.samples[0].shape
        for s in self.samples:
            if s.shape != shape:
                raise DataError(f"{s.id}: shape {s.shape} differs from {shape}")
            if self.split == "train" and s.is_anomalous:
                raise DataError(f"{s.id}: training samples must be anomaly-free")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.samples[0].shape[:2] if self.samples else (0, 0)

    @property
    def channels(self) -> int:
        return self.samples[0].shape[2] if self.samples else 0

    def pixels(self) -> np.ndarray:
        """Stack into an (N, H, W, C) array."""
        return np.stack([s.pixels for s in self.samples])

    def masks(self) -> np.ndarray:
        return np.stack([s.mask_or_zeros() for s in self.samples])


def check_divisible(shape: Sequence[int], rate: int, name: str = "image") -> None:
    if shape[0] % rate or shape[1] % rate:
        raise ShapeError(f"{name}: spatial shape {tuple(shape[:2])} not divisible by {rate}")


# ---------------------------------------------------------------------------
# disk IO


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _read_image(path: Path, resolution: tuple[int, int], channels: int | None) -> np.ndarray:
    with Image.open(path) as im:
        if channels == 1 or (channels is None and im.mode in ("L", "I", "I;16", "1", "LA")):
            im = im.convert("L")
        else:
            im = im.convert("RGB")
        h, w = resolution
        if im.size != (w, h):
            im = im.resize((w, h), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return np.clip(arr, 0.0, 1.0)


def _read_mask(path: Path, resolution: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        h, w = resolution
        if im.size != (w, h):
            im = im.resize((w, h), Image.NEAREST)
        return (np.asarray(im) > 127).astype(np.uint8)


def load_dataset(
    root: str | Path,
    split: str,
    resolution: tuple[int, int] = (64, 64),
    channels: int | None = None,
) -> DatasetManifest:
    """Load one split of an on-disk dataset in lexicographic file order.

    Pixels are bilinearly resized and scaled to [0, 1]; masks are resized with
    nearest-neighbour and re-binarised.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root not found: {root}")
    if split == "train":
        img_dir = root / "train" / "normal"
        if not img_dir.is_dir():
            raise ConfigError(f"missing directory: {img_dir}")
        samples = [
            ImageSample(p.stem, _read_image(p, resolution, channels)) for p in _list_images(img_dir)
        ]
    elif split == "test":
        img_dir, mask_dir = root / "test" / "images", root / "test" / "masks"
        if not img_dir.is_dir():
            raise ConfigError(f"missing directory: {img_dir}")
        masks = {p.stem: p for p in _list_images(mask_dir)} if mask_dir.is_dir() else {}
        samples = []
        for p in _list_images(img_dir):
            pixels = _read_image(p, resolution, channels)
            mask = _read_mask(masks[p.stem], resolution) if p.stem in masks else None
            if mask is not None and mask.shape != pixels.shape[:2]:
                raise DataError(f"{p.stem}: mask/image shape mismatch after resize")
            if mask is None:
                mask = np.zeros(pixels.shape[:2], dtype=np.uint8)
            samples.append(ImageSample(p.stem, pixels, mask, "anomaly" if mask.any() else "normal"))
    else:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    if len({s.shape[2] for s in samples}) > 1:
        raise DataError(f"{root}/{split}: mixed channel counts; pass channels explicitly")
    return DatasetManifest(split, samples)


def _to_uint8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(pixels: np.ndarray, path: Path) -> None:
    arr = _to_uint8(pixels)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def save_dataset(manifest: DatasetManifest, root: str | Path) -> Path:
    """Write a manifest in the on-disk layout plus a plain-text index.

    Returns the index path. Pixels pass through 8-bit PNG.
    """
    root = Path(root)
    if manifest.split == "train":
        img_dir, mask_dir = root / "train" / "normal", None
    else:
        img_dir, mask_dir = root / "test" / "images", root / "test" / "masks"
        mask_dir.mkdir(parents=True, exist_ok=True)
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s in manifest:
        rel = img_dir.relative_to(root) / f"{s.id}.png"
        save_image(s.pixels, root / rel)
        mask_rel = "-"
        if mask_dir is not None and s.mask is not None:
            mrel = mask_dir.relative_to(root) / f"{s.id}.png"
            Image.fromarray((s.mask > 0).astype(np.uint8) * 255).save(root / mrel)
            mask_rel = mrel.as_posix()
        records.append((s.id, rel.as_posix(), mask_rel))
    index = root / f"{manifest.split}_index.txt"
    write_index(records, index)
    return index


def write_index(records: Iterable[tuple[str, str, str]], path: Path) -> None:
    lines = [f"# lsgs-index v{INDEX_VERSION}"]
    lines += ["\t".join(r) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_index(path: str | Path) -> list[tuple[str, str, str]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != f"# lsgs-index v{INDEX_VERSION}":
        raise DataError(f"{path}: unsupported index header")
    out = []
    for line in text[1:]:
        if line.strip():
            sid, rel, mask = line.split("\t")
            out.append((sid, rel, mask))
    return out


def volume_to_slices(
    volume: np.ndarray,
    out_root: str | Path,
    prefix: str,
    segmentation: np.ndarray | None = None,
    resolution: tuple[int, int] = (128, 128),
) -> tuple[int, int]:
    """Slice an (H, W, D) volume along its last axis into PNG images.

    Slices whose segmentation is empty go to the training split, the rest to
    the test split with their masks. Intensities are min-max scaled per
    volume. Returns (n_train, n_test).
    """
    if volume.ndim != 3:
        raise DataError(f"{prefix}: expected an (H, W, D) volume, got shape {volume.shape}")
    if segmentation is not None and segmentation.shape != volume.shape:
        raise DataError(f"{prefix}: segmentation shape {segmentation.shape} != {volume.shape}")
    out_root = Path(out_root)
    train_dir = out_root / "train" / "normal"
    img_dir, mask_dir = out_root / "test" / "images", out_root / "test" / "masks"
    for d in (train_dir, img_dir, mask_dir):
        d.mkdir(parents=True, exist_ok=True)
    vol = volume.astype(np.float64)
    lo, hi = vol.min(), vol.max()
    vol = (vol - lo) / (hi - lo) if hi > lo else np.zeros_like(vol)
    h, w = resolution
    n_train = n_test = 0
    for z in range(vol.shape[2]):
        name = f"{prefix}_{z:03d}.png"
        img = Image.fromarray(_to_uint8(vol[:, :, z])).resize((w, h), Image.BILINEAR)
        seg = None if segmentation is None else segmentation[:, :, z] > 0
        if seg is None or not seg.any():
            img.save(train_dir / name)
            n_train += 1
        else:
            img.save(img_dir / name)
            m = Image.fromarray(seg.astype(np.uint8) * 255).resize((w, h), Image.NEAREST)
            m.save(mask_dir / name)
            n_test += 1
    return n_train, n_test


# ---------------------------------------------------------------------------
# synthetic family
#
# 64x64 canvas: an 8-pixel black frame around a 3x3 grid of 16x16 cells. The
# texture of each cell is fixed by its position (a Latin square over three
# textures), so the layout is globally consistent. Texture intensity ranges
# are disjoint, so swapping two cells of different texture changes every
# pixel in both cells. Per image the wave phases (4 x 4) and a brightness
# offset (3 levels) vary.

SYN_SIZE = 64
SYN_BORDER = 8
SYN_CELL = 16
SYN_GRID = 3
_TEXTURE_LEVELS = ((0.10, 0.25), (0.40, 0.55), (0.70, 0.85))
_PERIOD = 8
_BRIGHTNESS = (0.0, 0.04, 0.08)


def _cell_type(row: int, col: int) -> int:
    return (row + col) % 3


def _texture(kind: int, phase_y: int, phase_x: int, shift: float) -> np.ndarray:
    yy, xx = np.mgrid[0:SYN_CELL, 0:SYN_CELL].astype(np.float64)
    py, px = 2 * phase_y, 2 * phase_x
    if kind == 0:
        wave = np.sin(2 * np.pi * (yy + py) / _PERIOD)
    elif kind == 1:
        wave = np.sin(2 * np.pi * (xx + px) / _PERIOD)
    else:
        wave = np.sin(2 * np.pi * (yy + py) / _PERIOD) * np.sin(2 * np.pi * (xx + px) / _PERIOD)
    lo, hi = _TEXTURE_LEVELS[kind]
    return (lo + (hi - lo) * (0.5 + 0.5 * wave) + shift).astype(np.float32)


def cell_slice(row: int, col: int) -> tuple[slice, slice]:
    y0 = SYN_BORDER + row * SYN_CELL
    x0 = SYN_BORDER + col * SYN_CELL
    return slice(y0, y0 + SYN_CELL), slice(x0, x0 + SYN_CELL)


def render_normal(phase_y: int, phase_x: int, brightness: int) -> np.ndarray:
    """Render one member of the normal family as a (64, 64) float32 array."""
    img = np.zeros((SYN_SIZE, SYN_SIZE), dtype=np.float32)
    shift = _BRIGHTNESS[brightness]
    for r in range(SYN_GRID):
        for c in range(SYN_GRID):
            img[cell_slice(r, c)] = _texture(_cell_type(r, c), phase_y, phase_x, shift)
    return img


def _random_normal(rng: np.random.Generator) -> np.ndarray:
    return render_normal(
        int(rng.integers(4)), int(rng.integers(4)), int(rng.integers(len(_BRIGHTNESS)))
    )


def apply_structure_swap(img: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    cells = [(r, c) for r in range(SYN_GRID) for c in range(SYN_GRID)]
    while True:
        a, b = rng.choice(len(cells), size=2, replace=False)
        (ra, ca), (rb, cb) = cells[a], cells[b]
        if _cell_type(ra, ca) != _cell_type(rb, cb):
            break
    out = img.copy()
    sa, sb = cell_slice(ra, ca), cell_slice(rb, cb)
    out[sa], out[sb] = img[sb], img[sa]
    return out, (out != img).astype(np.uint8)


def apply_texture_patch(img: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = SYN_BORDER, SYN_SIZE - SYN_BORDER
    ph, pw = (int(v) for v in rng.integers(8, 15, size=2))
    y = int(rng.integers(lo, hi - ph + 1))
    x = int(rng.integers(lo, hi - pw + 1))
    out = img.copy()
    out[y : y + ph, x : x + pw] = rng.random((ph, pw)).astype(np.float32)
    return out, (out != img).astype(np.uint8)


def synthesize_dataset(
    seed: int,
    n_train: int,
    n_test: int,
    anomaly_kinds: Iterable[str] = ANOMALY_KINDS,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Generate (train, test) manifests from the synthetic family.

    Test samples cycle through normal, then each requested anomaly kind in
    sorted order. Output is a pure function of the arguments.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1")
    kinds = sorted(set(anomaly_kinds))
    bad = set(kinds) - set(ANOMALY_KINDS)
    if bad:
        raise ConfigError(f"unknown anomaly kinds: {sorted(bad)}")
    rng = np.random.default_rng(seed)
    train = [ImageSample(f"train_{i:04d}", _random_normal(rng)) for i in range(n_train)]
    cycle = ["normal", *kinds]
    test = []
    for i in range(n_test):
        kind = cycle[i % len(cycle)]
        base = _random_normal(rng)
        if kind == "structure_swap":
            img, mask = apply_structure_swap(base, rng)
        elif kind == "texture_patch":
            img, mask = apply_texture_patch(base, rng)
        else:
            img, mask = base, np.zeros(base.shape, dtype=np.uint8)
        test.append(ImageSample(f"test_{i:04d}", img, mask, kind))
    return DatasetManifest("train", train), DatasetManifest("test", test)
