"""Datasets: manifests, synthetic images with known labels, distortion operators, cropping."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import NUM_DISTORTIONS, NUM_SCENES, distortion_taxonomy, scene_taxonomy


class DataError(ValueError):
    """Malformed manifest, missing file or invalid image."""


@dataclass
class SampleRecord:
    mos: float
    path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False)
    scene_label: int | None = None
    distortion_label: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.mos):
            raise DataError("mos must be finite")
        if self.scene_label is not None and not 0 <= self.scene_label < NUM_SCENES:
            raise DataError(f"scene label {self.scene_label} out of range")
        if self.distortion_label is not None and not 0 <= self.distortion_label < NUM_DISTORTIONS:
            raise DataError(f"distortion label {self.distortion_label} out of range")
        if self.path is None and self.image is None:
            raise DataError("record needs an image path or inline image")


@dataclass
class Dataset:
    records: list[SampleRecord]
    name: str = "dataset"
    mos_range: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.records:
            raise DataError("dataset is empty")
        values = [r.mos for r in self.records]
        if self.mos_range is None:
            self.mos_range = (min(values), max(values))
        lo, hi = self.mos_range
        if any(v < lo or v > hi for v in values):
            raise DataError(f"mos values outside declared range {self.mos_range}")

    def __len__(self):
        return len(self.records)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        return Dataset([self.records[i] for i in indices], name or self.name, self.mos_range)

    def normalized_mos(self) -> np.ndarray:
        """MOS rescaled linearly from the declared range to [0, 100]."""
        lo, hi = self.mos_range
        mos = np.array([r.mos for r in self.records], dtype=np.float64)
        if hi == lo:
            return np.full_like(mos, 50.0)
        return 100.0 * (mos - lo) / (hi - lo)

    def labels(self, which: str) -> np.ndarray:
        attr = "scene_label" if which == "scene" else "distortion_label"
        return np.array([-1 if getattr(r, attr) is None else getattr(r, attr) for r in self.records])

    def has_labels(self) -> bool:
        return all(r.scene_label is not None and r.distortion_label is not None for r in self.records)

    def images(self, size: int) -> np.ndarray:
        """All images as an (N, size, size, 3) float32 array in [0, 1]."""
        return np.stack([load_record_image(r, size) for r in self.records])

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256(self.name.encode())
        for r in self.records:
            h.update(f"{r.path}|{r.mos!r}|{r.scene_label}|{r.distortion_label}".encode())
            if r.image is not None:
                h.update(np.ascontiguousarray(r.image).tobytes())
        return h.hexdigest()[:16]


def read_image(path: str | Path, size: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_record_image(record: SampleRecord, size: int) -> np.ndarray:
    if record.image is not None:
        img = np.asarray(record.image, dtype=np.float32)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        if img.shape[:2] != (size, size):
            pil = Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8))
            img = np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
        return img
    return read_image(record.path, size)


def _parse_label(raw: str, taxonomy, lineno: int):
    raw = raw.strip()
    if not raw:
        return None
    if raw.lstrip("-").isdigit():
        idx = int(raw)
        if not 0 <= idx < len(taxonomy):
            raise DataError(f"line {lineno}: {taxonomy.kind} index {idx} out of range")
        return idx
    try:
        return taxonomy.index(raw)
    except KeyError:
        raise DataError(f"line {lineno}: unknown {taxonomy.kind} label {raw!r}") from None


def load_manifest(path: str | Path, name: str | None = None,
                  mos_range: tuple[float, float] | None = None, check_files: bool = True) -> Dataset:
    """Parse a ``path,mos[,scene,distortion]`` CSV. Image paths resolve relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    scenes, dists = scene_taxonomy(), distortion_taxonomy()
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader, [])]
        if header[:2] != ["path", "mos"] or any(h not in ("scene", "distortion") for h in header[2:]):
            raise DataError("line 1: header must be path,mos[,scene,distortion]")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            cols = dict(zip(header, row))
            try:
                mos = float(cols["mos"])
            except ValueError:
                raise DataError(f"line {lineno}: invalid mos {cols['mos']!r}") from None
            if not np.isfinite(mos):
                raise DataError(f"line {lineno}: mos must be finite")
            img_path = Path(cols["path"].strip())
            if not img_path.is_absolute():
                img_path = path.parent / img_path
            if check_files and not img_path.is_file():
                raise DataError(f"line {lineno}: image file not found: {img_path}")
            records.append(SampleRecord(
                mos=mos,
                path=str(img_path),
                scene_label=_parse_label(cols.get("scene", ""), scenes, lineno),
                distortion_label=_parse_label(cols.get("distortion", ""), dists, lineno),
            ))
    return Dataset(records, name or path.stem, mos_range)


def save_manifest(dataset: Dataset, path: str | Path) -> None:
    """Write a manifest; paths are stored relative to the manifest directory when possible."""
    path = Path(path)
    scenes, dists = scene_taxonomy(), distortion_taxonomy()
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "mos", "scene", "distortion"])
        for r in dataset.records:
            if r.path is None:
                raise DataError("cannot write a manifest row for an inline image")
            p = Path(r.path)
            try:
                p = p.relative_to(path.parent.resolve()) if p.is_absolute() else p
            except ValueError:
                pass
            writer.writerow([
                p.as_posix(), repr(float(r.mos)),
                "" if r.scene_label is None else scenes[r.scene_label],
                "" if r.distortion_label is None else dists[r.distortion_label],
            ])


# --- distortions -----------------------------------------------------------

def _luma(img):
    return (img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype))[..., None]


def _blur(img, sigma):
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def _codec(img, fmt, **params):
    pil = Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8))
    buf = io.BytesIO()
    pil.save(buf, format=fmt, **params)
    buf.seek(0)
    with Image.open(buf) as out:
        return np.asarray(out.convert("RGB"), dtype=np.float32) / 255.0


def apply_distortion(image: np.ndarray, kind: int, severity: float,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Degrade an (H, W, 3) image in [0, 1]; severity 0 returns the input unchanged.

    Kinds follow the distortion taxonomy order. The two codec kinds use real
    JPEG / JPEG 2000 round trips; "spatially-localized" blurs one random square
    region; "others" is a pixelation (down/up-sampling) artefact.
    """
    if not 0 <= kind < NUM_DISTORTIONS:
        raise ValueError(f"unsupported distortion kind {kind}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    image = np.asarray(image, dtype=np.float32)
    if severity == 0:
        return image.copy()
    rng = rng if rng is not None else np.random.default_rng(0)
    s = float(severity)
    h, w = image.shape[:2]
    if kind == 0:  # blur
        out = _blur(image, 3.0 * s)
    elif kind == 1:  # color-related: desaturation with a channel tint
        tint = np.array([1.0 + 0.3 * s, 1.0, 1.0 - 0.3 * s], dtype=np.float32)
        out = (_luma(image) + (1 - s) * (image - _luma(image))) * tint
    elif kind == 2:  # contrast compression toward mid-grey
        out = 0.5 + (1 - 0.9 * s) * (image - 0.5)
    elif kind == 3:
        out = _codec(image, "JPEG", quality=max(1, int(round(95 - 94 * s))))
    elif kind == 4:
        out = _codec(image, "JPEG2000", quality_mode="rates", quality_layers=[1 + 199 * s])
    elif kind == 5:  # additive gaussian noise
        out = image + rng.normal(0.0, 0.3 * s, size=image.shape).astype(np.float32)
    elif kind == 6:  # over-exposure
        out = image * (1 + 2.5 * s) + 0.2 * s
    elif kind == 7:  # quantization
        levels = max(2, int(round(2 + 62 * (1 - s) ** 2)))
        out = np.round(image * (levels - 1)) / (levels - 1)
    elif kind == 8:  # under-exposure
        out = image * (1 - 0.9 * s)
    elif kind == 9:  # spatially-localized
        side = max(2, h // 2)
        y, x = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
        out = image.copy()
        region = image[y:y + side, x:x + side]
        out[y:y + side, x:x + side] = _blur(region, 4.0 * s) + rng.normal(
            0.0, 0.15 * s, size=region.shape).astype(np.float32)
    else:  # others: pixelation
        factor = 1 + int(round(7 * s))
        small = image[::factor, ::factor]
        out = np.repeat(np.repeat(small, factor, axis=0), factor, axis=1)[:h, :w]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --- synthetic corpus --------------------------------------------------------

def _coords(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    return yy, xx


def _palette(rng, k):
    return rng.uniform(0.15, 0.95, size=(k, 3)).astype(np.float32)


def make_base_image(scene: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural clean image whose layout is determined by the scene label."""
    yy, xx = _coords(size)
    c = _palette(rng, 3)
    if scene == 0:  # animal: a few soft blobs
        img = np.broadcast_to(c[0] * 0.5, (size, size, 3)).copy()
        for _ in range(3):
            cy, cx, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.2)
            m = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))[..., None]
            img = img * (1 - m) + c[1] * m
    elif scene == 1:  # cityscape: vertical bars of different heights
        img = np.broadcast_to(c[0], (size, size, 3)).copy()
        edges = np.sort(rng.uniform(0, 1, 6))
        for i in range(0, 6, 2):
            top = rng.uniform(0.2, 0.6)
            m = ((xx >= edges[i]) & (xx < edges[i + 1]) & (yy > top))[..., None]
            img = np.where(m, c[1 + i % 2], img)
    elif scene == 2:  # human: ellipse over a torso
        img = np.broadcast_to(c[0], (size, size, 3)).copy()
        head = (((yy - 0.35) / 0.18) ** 2 + ((xx - 0.5) / 0.13) ** 2 < 1)[..., None]
        body = ((yy > 0.55) & (np.abs(xx - 0.5) < 0.25))[..., None]
        img = np.where(head, c[1], np.where(body, c[2], img))
    elif scene == 3:  # indoor: checkerboard floor with a wall
        k = rng.integers(4, 9)
        check = ((np.floor(yy * k) + np.floor(xx * k)) % 2)[..., None]
        floor = c[0] * check + c[1] * (1 - check)
        img = np.where((yy > 0.5)[..., None], floor, c[2])
    elif scene == 4:  # landscape: sky gradient over ground
        horizon = rng.uniform(0.35, 0.65)
        sky = c[0] * (1 - yy[..., None]) + 1.0 * yy[..., None] * 0.6
        img = np.where((yy > horizon + 0.05 * np.sin(xx * 6))[..., None], c[1] * (0.6 + 0.4 * yy[..., None]), sky)
    elif scene == 5:  # night scene: dark field with bright points
        img = np.full((size, size, 3), 0.05, dtype=np.float32) + 0.1 * c[0]
        for _ in range(int(rng.integers(6, 14))):
            y, x = rng.integers(0, size), rng.integers(0, size)
            img[max(0, y - 1):y + 2, max(0, x - 1):x + 2] = 0.9 + 0.1 * c[1]
    elif scene == 6:  # plant: radial stripes
        cy, cx = rng.uniform(0.3, 0.7, 2)
        ang = np.arctan2(yy - cy, xx - cx)
        m = ((np.sin(ang * int(rng.integers(5, 10))) > 0)[..., None]).astype(np.float32)
        img = c[0] * m + c[1] * (1 - m)
    elif scene == 7:  # still-life: concentric rings
        cy, cx = rng.uniform(0.35, 0.65, 2)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        m = (0.5 + 0.5 * np.cos(r * rng.uniform(20, 40)))[..., None]
        img = c[0] * m + c[1] * (1 - m)
    else:  # others: smoothed random texture
        img = _blur(rng.uniform(0, 1, (size, size, 3)).astype(np.float32), 1.5)
        img = 0.2 + 0.6 * (img - img.min()) / (img.max() - img.min() + 1e-8)
    return np.clip(img, 0, 1).astype(np.float32)


def pseudo_mos(severity: float, rng: np.random.Generator, noise: float = 1.0) -> float:
    """100 * (1 - severity) plus clipped gaussian jitter, kept inside [0, 100]."""
    jitter = float(np.clip(rng.normal(0.0, noise), -3 * noise, 3 * noise))
    return float(np.clip(100.0 * (1.0 - severity) + jitter, 0.0, 100.0))


def synthesize_dataset(n_images: int, seed: int, size: int = 64, name: str = "synthetic") -> Dataset:
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_images):
        scene = int(rng.integers(NUM_SCENES))
        kind = int(rng.integers(NUM_DISTORTIONS))
        severity = float(rng.uniform(0, 1))
        base = make_base_image(scene, size, rng)
        img = apply_distortion(base, kind, severity, rng)
        records.append(SampleRecord(mos=pseudo_mos(severity, rng), image=img,
                                    scene_label=scene, distortion_label=kind))
    return Dataset(records, name, (0.0, 100.0))


def export_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write inline images as PNG files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, r in enumerate(dataset.records):
        if r.image is None:
            rows.append(r)
            continue
        rel = Path("images") / f"{i:05d}.png"
        Image.fromarray((np.clip(r.image, 0, 1) * 255).round().astype(np.uint8)).save(out_dir / rel)
        rows.append(replace(r, path=rel.as_posix(), image=None))
    manifest = out_dir / "manifest.csv"
    save_manifest(Dataset(rows, dataset.name, dataset.mos_range), manifest)
    return manifest


def random_crops(image: np.ndarray, k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """k crops of size x size at uniform valid offsets -> (k, size, size, C)."""
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than crop size {size}")
    ys = rng.integers(0, h - size + 1, size=k)
    xs = rng.integers(0, w - size + 1, size=k)
    return np.stack([image[y:y + size, x:x + size] for y, x in zip(ys, xs)])
