"""Dataset plumbing: synthetic vessel images, grayscale conversion, patch
tiling, augmentation, and folder loading.

Images travel as float64 arrays shaped (1, h, w) with values in [0, 1].
Masks use the same shape with values in {0, 1}. The synthetic generator
exists so training and every topology-sensitive metric can be exercised
without external datasets.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
NOISE_SIGMA = 0.03
NOISE_KERNEL_SIZE = 5
NOISE_KERNEL_STD = 1.0


@dataclasses.dataclass
class SampleRecord:
    """One image/mask pair.

    image: (1, h, w) float64 in [0, 1]; mask: (1, h, w) float64 in {0, 1},
    spatially congruent with the image.
    """

    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ValueError(f"image must be (1, h, w), got {self.image.shape}")
        if self.mask.shape != self.image.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} differs from image {self.image.shape}"
            )
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask must be strictly binary")


# ---------------------------------------------------------------------------
# grayscale conversion and diffusion-space mapping
# ---------------------------------------------------------------------------


def to_model_space(image: np.ndarray) -> np.ndarray:
    """Convert an image array to the canonical (1, h, w) float64 in [0, 1].

    Accepts 2D grayscale, channel-first (c, h, w), or channel-last
    (h, w, c) with c in {1, 3}. Integer dtypes are assumed 8-bit and are
    scaled by 255; floats must already sit in [0, 1]. Three channels are
    collapsed with the usual luma weights.
    """
    arr = np.asarray(image)
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and arr.shape[0] in (1, 3):
        pass
    elif arr.ndim == 3 and arr.shape[2] in (1, 3):
        arr = np.moveaxis(arr, 2, 0)
    else:
        raise ValueError(f"expected 1 or 3 channels, got shape {arr.shape}")
    if arr.shape[0] == 3:
        w = np.asarray(LUMA_WEIGHTS)
        arr = np.tensordot(w, arr, axes=(0, 0))[None]
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("float image values must lie in [0, 1]")
    return arr


def mask_to_diffusion(mask: np.ndarray) -> np.ndarray:
    """Map a binary mask {0, 1} to diffusion targets {-1, +1}."""
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask must be strictly binary")
    return 2.0 * mask - 1.0


def mask_from_diffusion(x: np.ndarray) -> np.ndarray:
    """Inverse of mask_to_diffusion for exact {-1, +1} inputs."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == -1.0) | (x == 1.0)):
        raise ValueError("expected values in {-1, +1}")
    return (x + 1.0) / 2.0


# ---------------------------------------------------------------------------
# synthetic vessel generator
# ---------------------------------------------------------------------------


def _gaussian_kernel_1d(size: int, std: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-0.5 * (x / std) ** 2)
    return k / k.sum()


def _smooth_2d(field: np.ndarray, size: int, std: float) -> np.ndarray:
    """Separable same-size Gaussian smoothing with zero padding."""
    k = _gaussian_kernel_1d(size, std)
    tmp = np.apply_along_axis(np.convolve, 1, field, k, mode="same")
    return np.apply_along_axis(np.convolve, 0, tmp, k, mode="same")


def _bezier_points(ctrl: np.ndarray, n: int) -> np.ndarray:
    """Sample a cubic Bezier curve through 4 control rows at n parameters."""
    t = np.linspace(0.0, 1.0, n)[:, None]
    b = (
        (1 - t) ** 3 * ctrl[0]
        + 3 * (1 - t) ** 2 * t * ctrl[1]
        + 3 * (1 - t) * t ** 2 * ctrl[2]
        + t ** 3 * ctrl[3]
    )
    return b


def _stamp_disk(mask: np.ndarray, cy: float, cx: float, radius: float) -> None:
    h, w = mask.shape
    r = max(radius, 0.5)
    y0, y1 = max(int(np.floor(cy - r)), 0), min(int(np.ceil(cy + r)) + 1, h)
    x0, x1 = max(int(np.floor(cx - r)), 0), min(int(np.ceil(cx + r)) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    hit = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    mask[y0:y1, x0:x1][hit] = 1.0


def gen_synthetic_vessels(
    seed: int,
    h: int = 64,
    w: int = 64,
    n_curves: int = 4,
    width_range: tuple[float, float] = (1.0, 3.0),
) -> SampleRecord:
    """Generate one synthetic sample: smooth dark curves on a shaded field.

    Each curve is a cubic Bezier between jittered border points, rasterized
    by stamping disks of a per-curve random width. The image is a radial
    vignette over a gentle linear gradient, darkened where vessels run,
    lightly blurred, with additive noise. Deterministic per seed.
    """
    if h < 32 or w < 32:
        raise ValueError(f"image extent must be at least 32, got {h}x{w}")
    lo, hi = width_range
    if not (1.0 <= lo <= hi <= 4.0):
        raise ValueError(f"width_range must sit inside [1, 4], got {width_range}")
    if n_curves < 0:
        raise ValueError("n_curves must be non-negative")
    rng = np.random.default_rng(seed)

    mask = np.zeros((h, w), dtype=np.float64)
    for _ in range(n_curves):
        # Endpoints on opposite borders so curves cross the frame.
        if rng.random() < 0.5:
            p0 = np.array([rng.uniform(0, h - 1), 0.0])
            p3 = np.array([rng.uniform(0, h - 1), w - 1.0])
        else:
            p0 = np.array([0.0, rng.uniform(0, w - 1)])
            p3 = np.array([h - 1.0, rng.uniform(0, w - 1)])
        mid = (p0 + p3) / 2.0
        jitter = np.array([h, w]) * 0.35
        p1 = mid + rng.uniform(-1, 1, size=2) * jitter
        p2 = mid + rng.uniform(-1, 1, size=2) * jitter
        pts = _bezier_points(np.stack([p0, p1, p2, p3]), 4 * max(h, w))
        width = rng.uniform(lo, hi)
        for cy, cx in pts:
            _stamp_disk(mask, cy, cx, width / 2.0)

    yy = np.linspace(-1.0, 1.0, h)[:, None]
    xx = np.linspace(-1.0, 1.0, w)[None, :]
    vignette = 1.0 - 0.3 * (yy ** 2 + xx ** 2) / 2.0
    a, b = rng.uniform(-0.15, 0.15, size=2)
    background = (0.65 + a * xx + b * yy) * vignette
    vessel = _smooth_2d(mask, NOISE_KERNEL_SIZE, 0.7)
    image = background * (1.0 - 0.5 * vessel)
    image = _smooth_2d(image, 3, 0.6)
    image = image + rng.normal(0.0, 0.02, size=(h, w))
    image = np.clip(image, 0.0, 1.0)
    return SampleRecord(id=f"synth-{seed:08d}", image=image[None], mask=mask[None])


# ---------------------------------------------------------------------------
# patch tiling
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PatchGrid:
    """Placement of square patches over a source array.

    Offsets are top-left corners; edge patches are shifted inward so the
    union of patches covers the source exactly, and reassembly averages
    wherever patches overlap.
    """

    patch_size: int
    stride: int
    offsets: tuple[tuple[int, int], ...]
    source_shape: tuple[int, ...]


def _axis_starts(extent: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] + patch < extent:
        starts.append(extent - patch)
    return starts


def extract_patches(
    image: np.ndarray, patch: int, stride: int
) -> tuple[np.ndarray, PatchGrid]:
    """Tile an image into (n, c, patch, patch) with exact edge coverage."""
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected 2D or (c, h, w) input, got shape {image.shape}")
    _, h, w = arr.shape
    if patch < 1 or patch > h or patch > w:
        raise ValueError(f"patch {patch} does not fit extent {h}x{w}")
    if stride < 1 or stride > patch:
        raise ValueError(f"stride must be in [1, patch], got {stride}")
    offsets = tuple(
        (r, c) for r in _axis_starts(h, patch, stride) for c in _axis_starts(w, patch, stride)
    )
    patches = np.stack([arr[:, r:r + patch, c:c + patch] for r, c in offsets])
    grid = PatchGrid(
        patch_size=patch,
        stride=stride,
        offsets=offsets,
        source_shape=tuple(image.shape),
    )
    return patches, grid


def reassemble(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Invert extract_patches, averaging overlapping contributions."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4 or patches.shape[0] != len(grid.offsets):
        raise ValueError(
            f"expected ({len(grid.offsets)}, c, p, p) patches, got {patches.shape}"
        )
    p = grid.patch_size
    shape = grid.source_shape
    c = 1 if len(shape) == 2 else shape[0]
    h, w = shape[-2], shape[-1]
    total = np.zeros((c, h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.float64)
    for tile, (r, col) in zip(patches, grid.offsets):
        total[:, r:r + p, col:col + p] += tile
        count[r:r + p, col:col + p] += 1.0
    out = total / count
    return out[0] if len(shape) == 2 else out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(
    record: SampleRecord,
    rng: np.random.Generator,
    flips: bool = True,
    noise: bool = True,
) -> SampleRecord:
    """Random flips applied jointly to image and mask, plus smoothed noise.

    Each flip axis fires independently with probability one half. The noise
    term is white Gaussian (sigma 0.03) smoothed by a normalized 5x5
    Gaussian kernel, added to the image only, then re-clipped to [0, 1].
    """
    image = record.image.copy()
    mask = record.mask.copy()
    if flips:
        if rng.random() < 0.5:
            image = image[:, :, ::-1]
            mask = mask[:, :, ::-1]
        if rng.random() < 0.5:
            image = image[:, ::-1, :]
            mask = mask[:, ::-1, :]
    if noise:
        white = rng.normal(0.0, NOISE_SIGMA, size=image.shape[1:])
        image = image + _smooth_2d(white, NOISE_KERNEL_SIZE, NOISE_KERNEL_STD)[None]
        image = np.clip(image, 0.0, 1.0)
    return SampleRecord(id=record.id, image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask))


# ---------------------------------------------------------------------------
# folder IO
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")


def write_image(path: Path | str, array01: np.ndarray) -> None:
    """Write a (1, h, w) or (h, w) array in [0, 1] as an 8-bit grayscale file."""
    arr = np.asarray(array01, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"expected single channel, got shape {arr.shape}")
        arr = arr[0]
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("values must lie in [0, 1]")
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(str(path))


def _read_array(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            return np.asarray(img)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_image_file(path: Path | str) -> np.ndarray:
    """Read one image file to canonical (1, h, w) float64 in [0, 1]."""
    return to_model_space(_read_array(Path(path)))


def load_images(root: Path | str) -> list[tuple[str, np.ndarray]]:
    """Load images only, without masks, sorted by filename.

    Accepts either a dataset root (reads its images/ subfolder) or a flat
    folder of image files.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"image folder not found: {root}")
    folder = root / "images" if (root / "images").is_dir() else root
    out = []
    for path in sorted(folder.iterdir()):
        if path.suffix.lower() in _IMAGE_SUFFIXES:
            out.append((path.stem, read_image_file(path)))
    return out


def load_folder(root: Path | str) -> list[SampleRecord]:
    """Load images/ and masks/ subfolders into records, sorted by filename.

    Mask files must share the image's stem (any supported extension) and are
    binarized at the 127/255 midpoint. A missing or unreadable file is a
    hard error naming the offender.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset folder not found: {root}")
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir():
        return []
    records = []
    for img_path in sorted(images_dir.iterdir()):
        if img_path.suffix.lower() not in _IMAGE_SUFFIXES:
            continue
        candidates = [masks_dir / (img_path.stem + s) for s in _IMAGE_SUFFIXES]
        mask_path = next((p for p in candidates if p.is_file()), None)
        if mask_path is None:
            raise DataError(f"no mask found for image {img_path}")
        image = to_model_space(_read_array(img_path))
        raw = _read_array(mask_path)
        if raw.ndim == 3:
            raw = raw[..., 0]
        mask = (raw > 127).astype(np.float64)[None]
        if mask.shape != image.shape:
            raise DataError(
                f"mask {mask_path} shape {mask.shape[1:]} does not match image {image.shape[1:]}"
            )
        records.append(SampleRecord(id=img_path.stem, image=image, mask=mask))
    return records
