"""Ground-truth generation, augmentation, raster I/O and synthetic scenes.

Images are 8-bit at the file boundary and real-valued in [0, 1] in memory.
Ground-truth edge maps come from label rasters: mark every pixel whose
4-neighborhood crosses a label change, then thin the result to a unit-width
skeleton. All randomized operations are pure functions of (input, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

__all__ = [
    "load_image",
    "load_binary",
    "save_image",
    "save_float_map",
    "load_float_map",
    "boundary_pixels",
    "thin",
    "overlay_annotations",
    "sample_patches",
    "hflip",
    "add_gaussian_noise",
    "gaussian_blur",
    "EllipseShape",
    "PolygonShape",
    "generate_scene",
    "synth_dataset",
    "DatasetManifest",
    "save_manifest",
    "load_manifest",
    "load_dataset",
]


# ---------------------------------------------------------------------------
# raster I/O
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read an RGB raster into a (H, W, 3) float array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_binary(path) -> np.ndarray:
    """Read a grayscale raster as a binary (H, W) uint8 map (threshold 128)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ground-truth file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def load_gray(path) -> np.ndarray:
    """Read a grayscale raster into a (H, W) float array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def save_image(path, arr: np.ndarray) -> Path:
    """Quantize a [0, 1] float raster to 8 bits; gray for 2-d, RGB for 3-d."""
    path = Path(path)
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    q = np.floor(a * 255.0 + 0.5).astype(np.uint8)
    if q.ndim == 2:
        Image.fromarray(q, mode="L").save(path)
    elif q.ndim == 3 and q.shape[2] == 3:
        Image.fromarray(q, mode="RGB").save(path)
    else:
        raise ValueError(f"save_image expects (H, W) or (H, W, 3), got {arr.shape}")
    return path


# Raw float edge maps: magic "REDF", u16 version, u32 height, u32 width,
# then H*W little-endian float32 values, row major.
_FLOAT_MAGIC = b"REDF"
_FLOAT_VERSION = 1


def save_float_map(path, arr: np.ndarray) -> Path:
    import struct

    path = Path(path)
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    if a.ndim != 2:
        raise ValueError(f"float maps are 2-d, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(_FLOAT_MAGIC)
        f.write(struct.pack("<HII", _FLOAT_VERSION, a.shape[0], a.shape[1]))
        f.write(a.tobytes())
    return path


def load_float_map(path) -> np.ndarray:
    import struct

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"float map not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != _FLOAT_MAGIC:
        raise ValueError(f"{path} is not a float edge map (bad magic {blob[:4]!r})")
    version, h, w = struct.unpack_from("<HII", blob, 4)
    if version != _FLOAT_VERSION:
        raise ValueError(f"{path}: unsupported float-map version {version}")
    return np.frombuffer(blob, dtype="<f4", offset=14, count=h * w).reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# ground truth from label maps
# ---------------------------------------------------------------------------

def boundary_pixels(seg: np.ndarray) -> np.ndarray:
    """Mark every pixel whose 4-neighborhood crosses a label change."""
    lab = np.asarray(seg)
    if lab.ndim != 2:
        raise ValueError(f"label maps are 2-d, got shape {lab.shape}")
    edge = np.zeros(lab.shape, dtype=bool)
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    edge[1:, :] |= lab[1:, :] != lab[:-1, :]
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    return edge.astype(np.uint8)


def thin(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning to a unit-width 8-connected skeleton.

    Runs both sub-iterations until a fixpoint, so the result is idempotent
    and never contains a pixel absent from the input.
    """
    img = (np.asarray(mask) > 0).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError(f"binary maps are 2-d, got shape {mask.shape}")
    while True:
        removed = False
        for phase in (0, 1):
            p = np.pad(img, 1)
            # Moore neighbors, clockwise from north.
            p2 = p[:-2, 1:-1]
            p3 = p[:-2, 2:]
            p4 = p[1:-1, 2:]
            p5 = p[2:, 2:]
            p6 = p[2:, 1:-1]
            p7 = p[2:, :-2]
            p8 = p[1:-1, :-2]
            p9 = p[:-2, :-2]
            ring = (p2, p3, p4, p5, p6, p7, p8, p9)
            b = sum(r.astype(np.int16) for r in ring)
            a = sum(
                ((ring[i] == 0) & (ring[(i + 1) % 8] == 1)).astype(np.int16) for i in range(8)
            )
            if phase == 0:
                edge_cond = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                edge_cond = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            cond = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & edge_cond
            if cond.any():
                img[cond] = 0
                removed = True
        if not removed:
            return img


def overlay_annotations(gts: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise OR of several binary annotations, then thin."""
    gts = list(gts)
    if not gts:
        raise ValueError("need at least one annotation to overlay")
    merged = np.zeros_like(np.asarray(gts[0]), dtype=np.uint8)
    for g in gts:
        merged |= (np.asarray(g) > 0).astype(np.uint8)
    return thin(merged)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def sample_patches(image: np.ndarray, gt: np.ndarray, count: int, size: int, rng) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Crop ``count`` random patches, image and ground truth congruently."""
    image = np.asarray(image)
    gt = np.asarray(gt)
    if image.shape[:2] != gt.shape[:2]:
        raise ValueError(f"image {image.shape} and gt {gt.shape} sizes differ")
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size}px patch; pad it first")
    rng = np.random.default_rng(rng)
    out = []
    for _ in range(count):
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        out.append((image[r : r + size, c : c + size].copy(), gt[r : r + size, c : c + size].copy()))
    return out


def hflip(patch: np.ndarray, gt: np.ndarray, coin: bool):
    """Mirror both rasters horizontally, or neither."""
    if not coin:
        return patch, gt
    return np.ascontiguousarray(patch[:, ::-1]), np.ascontiguousarray(gt[:, ::-1])


def add_gaussian_noise(patch: np.ndarray, std: float = 20.0 / 255.0, rng=None) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise per pixel per channel, clamp to [0, 1]."""
    if std < 0:
        raise ValueError("noise std must be non-negative")
    if std == 0:
        return np.array(patch, copy=True)
    rng = np.random.default_rng(rng)
    return np.clip(patch + rng.normal(0.0, std, np.asarray(patch).shape), 0.0, 1.0)


def gaussian_blur(patch: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the spatial axes (channels untouched)."""
    if sigma < 0:
        raise ValueError("blur sigma must be non-negative")
    if sigma == 0:
        return np.array(patch, copy=True)
    from scipy import ndimage

    arr = np.asarray(patch, dtype=np.float64)
    sigmas = (sigma, sigma) + (0,) * (arr.ndim - 2)
    return ndimage.gaussian_filter(arr, sigmas, mode="nearest")


# ---------------------------------------------------------------------------
# synthetic scenes with analytic boundaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EllipseShape:
    """Rotated ellipse; coordinates are (x = column, y = row) at pixel centers."""

    cx: float
    cy: float
    rx: float
    ry: float
    angle: float

    def contains(self, x, y):
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        u = (x - self.cx) * ca + (y - self.cy) * sa
        v = -(x - self.cx) * sa + (y - self.cy) * ca
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0

    def boundary_points(self, n: int = 2048) -> np.ndarray:
        t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        u = self.rx * np.cos(t)
        v = self.ry * np.sin(t)
        return np.stack([self.cx + u * ca - v * sa, self.cy + u * sa + v * ca], axis=1)


@dataclass(frozen=True)
class PolygonShape:
    """Simple polygon; membership by even-odd ray casting."""

    vertices: Tuple[Tuple[float, float], ...]

    def contains(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        v = np.asarray(self.vertices, dtype=np.float64)
        k = len(v)
        for i in range(k):
            x1, y1 = v[i]
            x2, y2 = v[(i + 1) % k]
            crosses = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_int = (x2 - x1) * (y - y1) / (y2 - y1) + x1
            inside ^= crosses & (x < x_int)
        return inside

    def boundary_points(self, n: int = 2048) -> np.ndarray:
        v = np.asarray(self.vertices, dtype=np.float64)
        k = len(v)
        seg = v[(np.arange(k) + 1) % k] - v
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        total = lengths.sum()
        pts = []
        for i in range(k):
            m = max(2, int(round(n * lengths[i] / total)))
            t = np.linspace(0.0, 1.0, m, endpoint=False)[:, None]
            pts.append(v[i] + t * seg[i])
        return np.concatenate(pts, axis=0)


def _resize_bilinear(a: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = a.shape[:2]
    ys = np.linspace(0.0, sh - 1.0, h)
    xs = np.linspace(0.0, sw - 1.0, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


_SUPERSAMPLE = 4


def generate_scene(size: int, rng):
    """One synthetic scene: textured background plus 2-4 colored shapes.

    Returns (image (H, W, 3) float, label map (H, W) int, shapes back-to-front).
    The image is anti-aliased by 4x supersampling; labels are evaluated at
    pixel centers so every boundary pixel sits within one pixel of the true
    analytic outline.
    """
    if size < 8:
        raise ValueError("scene size must be at least 8 pixels")
    rng = np.random.default_rng(rng)
    base = rng.uniform(0.15, 0.45, 3)
    tex = _resize_bilinear(rng.uniform(-1.0, 1.0, (4, 4, 3)), size, size)
    img = np.clip(base + 0.05 * tex, 0.0, 1.0)

    shapes = []
    colors = []
    for _ in range(int(rng.integers(2, 5))):
        cx = float(rng.uniform(0.15 * size, 0.85 * size))
        cy = float(rng.uniform(0.15 * size, 0.85 * size))
        if rng.random() < 0.5:
            shape = EllipseShape(
                cx=cx,
                cy=cy,
                rx=float(rng.uniform(0.08 * size, 0.30 * size)),
                ry=float(rng.uniform(0.08 * size, 0.30 * size)),
                angle=float(rng.uniform(0.0, math.pi)),
            )
        else:
            k = int(rng.integers(3, 7))
            angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, k))
            radii = rng.uniform(0.10 * size, 0.30 * size, k)
            verts = tuple(
                (cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)
            )
            shape = PolygonShape(vertices=verts)
        shapes.append(shape)
        color = rng.uniform(0.25, 0.95, 3)
        for _ in range(8):  # re-roll until the shape stands out from the backdrop
            if np.linalg.norm(color - base) >= 0.30:
                break
            color = rng.uniform(0.25, 0.95, 3)
        colors.append(color)

    f = _SUPERSAMPLE
    fine = (np.arange(size * f) + 0.5) / f - 0.5
    gx, gy = np.meshgrid(fine, fine)
    cx_grid, cy_grid = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    labels = np.zeros((size, size), dtype=np.int32)
    for i, (shape, color) in enumerate(zip(shapes, colors), start=1):
        alpha = shape.contains(gx, gy).reshape(size, f, size, f).mean(axis=(1, 3))
        img = img * (1.0 - alpha[..., None]) + color * alpha[..., None]
        labels[shape.contains(cx_grid, cy_grid)] = i
    return np.clip(img, 0.0, 1.0), labels, shapes


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Pairs of (image, ground truth) paths plus split tag and match tolerance."""

    entries: List[Tuple[str, str]]
    split: str = "train"
    max_dist: float = 0.0075
    base: Path = Path(".")

    def resolved(self) -> List[Tuple[Path, Path]]:
        return [(self.base / img, self.base / gt) for img, gt in self.entries]


def save_manifest(path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    lines = [f"# split={manifest.split}", f"# maxdist={manifest.max_dist}"]
    lines += [f"{img}\t{gt}" for img, gt in manifest.entries]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    split = "train"
    max_dist = 0.0075
    entries: List[Tuple[str, str]] = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            key = key.strip().lower()
            if key == "split":
                split = value.strip()
            elif key == "maxdist":
                max_dist = float(value)
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected 'image<TAB>gt', got {line!r}")
        entries.append((parts[0], parts[1]))
    return DatasetManifest(entries=entries, split=split, max_dist=max_dist, base=path.parent)


def load_dataset(manifest: DatasetManifest) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Load all manifest pairs; shapes are validated pairwise."""
    out = []
    for img_path, gt_path in manifest.resolved():
        img = load_image(img_path)
        gt = load_binary(gt_path)
        if img.shape[:2] != gt.shape[:2]:
            raise ValueError(
                f"size mismatch between {img_path} {img.shape[:2]} and {gt_path} {gt.shape[:2]}"
            )
        out.append((img, gt))
    return out


def synth_dataset(n: int, size: int, seed: int, out_dir, max_dist: float = 0.0075) -> DatasetManifest:
    """Generate ``n`` synthetic scenes plus thinned ground truth on disk.

    Every raster is a pure function of (seed, index), so regenerating into the
    same directory reproduces identical bytes.
    """
    if n <= 0:
        raise ValueError(f"need a positive number of images, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    entries: List[Tuple[str, str]] = []
    for i in range(n):
        img, labels, _ = generate_scene(size, np.random.default_rng([seed, i]))
        gt = thin(boundary_pixels(labels))
        img_rel = f"images/img_{i:03d}.png"
        gt_rel = f"gt/gt_{i:03d}.png"
        save_image(out / img_rel, img)
        save_image(out / gt_rel, gt.astype(np.float64))
        entries.append((img_rel, gt_rel))
    manifest = DatasetManifest(entries=entries, split="train", max_dist=max_dist, base=out)
    save_manifest(out / "manifest.txt", manifest)
    return manifest
