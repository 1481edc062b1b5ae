"""Dataset manifests, image codecs, and the synthetic shape dataset.

Manifest format: one entry per line, tab-separated `image<TAB>gt[<TAB>mask]`,
paths relative to the manifest file.  Ground truth decodes as single-channel
and binarizes at 128/255.  Difference masks are 1-bit PBM files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import bilinear_resize_array

GT_THRESHOLD = 128


class ManifestError(ValueError):
    """Malformed or inconsistent dataset manifest."""


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    gt_path: Path
    mask_path: Path | None = None

    @property
    def name(self) -> str:
        return self.image_path.stem


@dataclass
class DatasetManifest:
    name: str
    root: Path
    entries: list

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    seen = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3) or not all(p.strip() for p in parts):
            raise ManifestError(f"{path}: line {lineno}: expected 'image<TAB>gt[<TAB>mask]'")
        image_path = (root / parts[0]).resolve()
        gt_path = (root / parts[1]).resolve()
        mask_path = (root / parts[2]).resolve() if len(parts) == 3 else None
        if image_path in seen:
            raise ManifestError(f"{path}: line {lineno}: duplicate image path {parts[0]}")
        seen.add(image_path)
        for p in (image_path, gt_path, mask_path):
            if p is not None and not p.is_file():
                raise ManifestError(f"{path}: line {lineno}: missing file {p}")
        entries.append(ManifestEntry(image_path, gt_path, mask_path))
    return DatasetManifest(name=path.stem, root=root, entries=entries)


def write_manifest(path, rows) -> None:
    """rows: iterables of 2 or 3 path strings relative to the manifest directory."""
    path = Path(path)
    lines = ["\t".join(str(p) for p in row) for row in rows]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# image codecs: PNG via Pillow, PGM/PPM/PBM natively
# ---------------------------------------------------------------------------


def _read_pnm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    fields: list[bytes] = []
    pos = 0

    def next_field():
        nonlocal pos
        while pos < len(blob):
            if blob[pos:pos + 1].isspace():
                pos += 1
            elif blob[pos:pos + 1] == b"#":
                while pos < len(blob) and blob[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        return blob[start:pos]

    magic = next_field()
    if magic == b"P4":
        w, h = int(next_field()), int(next_field())
        pos += 1
        row_bytes = (w + 7) // 8
        bits = np.unpackbits(
            np.frombuffer(blob, dtype=np.uint8, count=h * row_bytes, offset=pos))
        arr = bits.reshape(h, row_bytes * 8)[:, :w]
        return (arr * 255).astype(np.uint8)  # bit 1 (the PBM mark) maps to 255
    if magic in (b"P5", b"P6"):
        w, h = int(next_field()), int(next_field())
        maxval = int(next_field())
        pos += 1
        channels = 1 if magic == b"P5" else 3
        arr = np.frombuffer(blob, dtype=np.uint8, count=h * w * channels, offset=pos)
        arr = arr.reshape((h, w) if channels == 1 else (h, w, 3))
        if maxval != 255:
            arr = (arr.astype(np.float64) * (255.0 / maxval)).round().astype(np.uint8)
        return arr.copy()
    raise ValueError(f"unsupported PNM magic {magic!r} in {path}")


def read_image_u8(path) -> np.ndarray:
    """Decode to uint8, HxW (gray) or HxWx3 (color)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pbm", ".pnm"):
        return _read_pnm(path)
    with Image.open(path) as im:
        if im.mode in ("1", "L", "I;16", "I"):
            return np.asarray(im.convert("L"), dtype=np.uint8)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image_u8(path, arr: np.ndarray) -> None:
    """Encode uint8 gray (HxW) or RGB (HxWx3); format chosen by extension."""
    path = Path(path)
    arr = np.asarray(arr, dtype=np.uint8)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        if arr.ndim != 2:
            raise ValueError("PGM requires a grayscale array")
        path.write_bytes(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]) + arr.tobytes())
        return
    if suffix == ".ppm":
        if arr.ndim != 3:
            raise ValueError("PPM requires an RGB array")
        path.write_bytes(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]) + arr.tobytes())
        return
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


def write_mask_pbm(path, mask: np.ndarray) -> None:
    """Persist a boolean mask as 1-bit-per-pixel PBM (P4; 1 = in the set)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    row_bytes = (w + 7) // 8
    padded = np.zeros((h, row_bytes * 8), dtype=np.uint8)
    padded[:, :w] = mask
    packed = np.packbits(padded, axis=1)
    Path(path).write_bytes(b"P4\n%d %d\n" % (w, h) + packed.tobytes())


def read_mask(path) -> np.ndarray:
    """Boolean mask from a PBM (or any grayscale image at >= 128)."""
    return read_image_u8(path) >= GT_THRESHOLD


def load_image_rgb01(path) -> np.ndarray:
    """Float RGB in [0,1], shape 3xHxW."""
    arr = read_image_u8(path)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0


def load_gt_binary(path) -> np.ndarray:
    """Binary {0,1} float ground truth, shape HxW, thresholded at 128/255."""
    arr = read_image_u8(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return (arr >= GT_THRESHOLD).astype(np.float64)


def resize_chw(img: np.ndarray, size: int) -> np.ndarray:
    """Square resize of a CxHxW image with the project-wide bilinear sampler."""
    if img.shape[1] == size and img.shape[2] == size:
        return img
    return bilinear_resize_array(img, size, size)


# ---------------------------------------------------------------------------
# synthetic shape dataset
# ---------------------------------------------------------------------------

_FG_FRACTION = (0.02, 0.6)


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = rng.integers(0, 3)
    cx, cy = rng.uniform(0.2, 0.8, size=2) * size
    if kind == 0:  # ellipse
        rx, ry = rng.uniform(0.08, 0.3, size=2) * size
        theta = rng.uniform(0, math.pi)
        dx, dy = xx - cx, yy - cy
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == 1:  # rotated rectangle
        hw, hh = rng.uniform(0.08, 0.3, size=2) * size
        theta = rng.uniform(0, math.pi)
        dx, dy = xx - cx, yy - cy
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    # triangle via half-plane tests on three vertices
    pts = np.stack([rng.uniform(0.1, 0.9, size=3) * size,
                    rng.uniform(0.1, 0.9, size=3) * size], axis=1)
    mask = np.ones((size, size), dtype=bool)
    for i in range(3):
        ax, ay = pts[i]
        bx, by = pts[(i + 1) % 3]
        ox, oy = pts[(i + 2) % 3]
        cross = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
        side = (bx - ax) * (oy - ay) - (by - ay) * (ox - ax)
        mask &= (cross * side) >= 0
    return mask


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.1, 0.9, size=3)
    coarse = rng.normal(scale=0.12, size=(3, max(2, size // 8), max(2, size // 8)))
    texture = bilinear_resize_array(coarse, size, size)
    noise = rng.normal(scale=0.02, size=(3, size, size))
    return np.clip(base[:, None, None] + texture + noise, 0.0, 1.0)


def synth_image(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One image (3xHxW float01) and its exact binary ground truth (HxW)."""
    for _ in range(64):
        bg = _textured_background(rng, size)
        bg_mean = bg.mean(axis=(1, 2))
        gt = np.zeros((size, size), dtype=bool)
        img = bg.copy()
        for _ in range(int(rng.integers(1, 4))):
            mask = _shape_mask(rng, size)
            # shape colors stay far from the background mean so shapes are salient
            color = np.clip(bg_mean + rng.choice([-1.0, 1.0], size=3)
                            * rng.uniform(0.3, 0.5, size=3), 0.02, 0.98)
            shade = rng.normal(scale=0.02, size=(size, size))
            for c in range(3):
                img[c][mask] = np.clip(color[c] + shade[mask], 0.0, 1.0)
            gt |= mask
        frac = gt.mean()
        if _FG_FRACTION[0] <= frac <= _FG_FRACTION[1]:
            return img, gt.astype(np.float64)
    raise RuntimeError("could not sample a scene within the foreground-fraction bounds")


def synth_dataset(n: int, size: int, seed: int, out_dir) -> Path:
    """Generate n image/gt pairs plus a manifest; deterministic per seed."""
    if n < 1:
        raise ValueError("need at least one image")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        img, gt = synth_image(rng, size)
        img_name = f"img_{i:04d}.png"
        gt_name = f"gt_{i:04d}.png"
        write_image_u8(out_dir / img_name,
                       (img.transpose(1, 2, 0) * 255.0).round().astype(np.uint8))
        write_image_u8(out_dir / gt_name, (gt * 255.0).astype(np.uint8))
        rows.append((img_name, gt_name))
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, rows)
    return manifest_path


@dataclass
class LoadedDataset:
    """Whole dataset resident in memory: inputs at train size, GT at native size."""

    names: list
    images: np.ndarray        # (n, 3, size, size) float
    gts: np.ndarray           # (n, 1, H, W) binary float
    masks: np.ndarray | None  # (n, 1, H, W) bool, when the manifest carries masks


def load_dataset(manifest: DatasetManifest, size: int, dtype=np.float64) -> LoadedDataset:
    images, gts, masks, names = [], [], [], []
    any_mask = any(e.mask_path is not None for e in manifest.entries)
    for entry in manifest.entries:
        img = resize_chw(load_image_rgb01(entry.image_path), size)
        images.append(img.astype(dtype))
        gt = load_gt_binary(entry.gt_path)
        gts.append(gt[None].astype(dtype))
        names.append(entry.name)
        if any_mask:
            if entry.mask_path is None:
                raise ManifestError(f"entry {entry.name} lacks a mask path")
            masks.append(read_mask(entry.mask_path)[None])
    gt_shapes = {g.shape for g in gts}
    if len(gt_shapes) != 1:
        raise ManifestError("mixed ground-truth resolutions in one dataset")
    return LoadedDataset(
        names=names,
        images=np.stack(images),
        gts=np.stack(gts),
        masks=np.stack(masks) if any_mask else None,
    )
