"""Synthetic 10-class shape-and-texture dataset and patch shape geometry.

The dataset is generated, not downloaded: each class pairs a fixed palette
colour with a shape (disk, square, triangle, cross, ring; classes 5-9 add a
diagonal stripe texture), drawn with jittered position/size on a muted noisy
background. A fixed seed makes every split reproducible.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .formats import dataset_dir_paths, read_rt1, write_rt1

IMAGE_SIZE = 32
NUM_CLASSES = 10

_PALETTE = np.array([
    [0.85, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.90],
    [0.90, 0.85, 0.10],
    [0.85, 0.15, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.55, 0.15, 0.85],
    [0.40, 0.60, 0.20],
    [0.95, 0.45, 0.60],
], dtype=np.float32)

_SHAPES = ("disk", "square", "triangle", "cross", "ring")


def _object_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= 0.9 * (dy + r) / 2.0)
    if shape == "cross":
        arm = max(1.0, r / 3.0)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown object shape {shape!r}")


def make_toy_dataset(n: int = 6000, size: int = IMAGE_SIZE, seed: int = 7):
    """Generate (images, labels): (n, 3, size, size) float32 in [0,1], (n,) int64."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES).astype(np.int64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    for i, cls in enumerate(labels):
        base = rng.uniform(0.20, 0.45, size=3).astype(np.float32)
        img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
        img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)

        # objects sit toward the upper left so corner patches rarely occlude them
        cy = rng.uniform(0.28 * size, 0.55 * size)
        cx = rng.uniform(0.28 * size, 0.55 * size)
        r = rng.uniform(0.16 * size, 0.26 * size)
        mask = _object_mask(_SHAPES[cls % len(_SHAPES)], size, cy, cx, r)

        colour = _PALETTE[cls] * rng.uniform(0.85, 1.15)
        fill = np.broadcast_to(np.clip(colour, 0, 1)[:, None, None], (3, size, size)).copy()
        if cls >= len(_SHAPES):
            stripes = ((yy + xx) % 4) < 2
            fill[:, stripes] *= 0.45
        img[:, mask] = fill[:, mask]
        img += rng.normal(0.0, 0.01, size=img.shape).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


def default_architecture(input_shape=(3, IMAGE_SIZE, IMAGE_SIZE), num_classes=NUM_CLASSES) -> dict:
    """Reference toy network; the feature tap lands on the third conv stage
    (32 x 8 x 8 post-activation maps for 32px input), followed by a pooled
    two-layer head."""
    return {
        "input_shape": list(input_shape),
        "layers": [
            {"kind": "conv2d", "out_channels": 16, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "relu"},
            {"kind": "maxpool2d", "kernel": 2, "stride": 2},
            {"kind": "conv2d", "out_channels": 32, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "relu"},
            {"kind": "maxpool2d", "kernel": 2, "stride": 2},
            {"kind": "conv2d", "out_channels": 32, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "relu"},
            {"kind": "maxpool2d", "kernel": 2, "stride": 2},
            {"kind": "flatten"},
            {"kind": "dense", "units": 64},
            {"kind": "relu"},
            {"kind": "dense", "units": num_classes},
        ],
    }


def save_dataset(directory, train_images, train_labels, test_images, test_labels) -> None:
    paths = dataset_dir_paths(directory)
    Path(directory).mkdir(parents=True, exist_ok=True)
    write_rt1(paths["train_images"], train_images)
    write_rt1(paths["train_labels"], train_labels.astype(np.float32))
    write_rt1(paths["test_images"], test_images)
    write_rt1(paths["test_labels"], test_labels.astype(np.float32))


def load_dataset(directory) -> dict:
    paths = dataset_dir_paths(directory)
    out = {}
    for key, path in paths.items():
        if not path.exists():
            raise FileNotFoundError(f"dataset file missing: {path}")
        arr = read_rt1(path)
        out[key] = arr.astype(np.int64) if key.endswith("labels") else arr
    return out


# ---------------------------------------------------------------------------
# Patch shape masks
# ---------------------------------------------------------------------------

_STAR_POLY = [  # 5-point star, unit box
    (0.500, 0.000), (0.618, 0.363), (1.000, 0.363), (0.691, 0.588),
    (0.809, 0.950), (0.500, 0.725), (0.191, 0.950), (0.309, 0.588),
    (0.000, 0.363), (0.382, 0.363),
]

_LIGHTNING_POLY = [  # 3-segment bolt, unit box
    (0.580, 0.000), (0.150, 0.420), (0.420, 0.480), (0.100, 1.000),
    (0.720, 0.460), (0.470, 0.410), (0.870, 0.060),
]

_BASE_RASTER = 25


def _rasterize_polygon(points, size: int) -> np.ndarray:
    """Even-odd fill of a polygon given in unit coordinates (x, y)."""
    pts = [(x * (size - 1), y * (size - 1)) for x, y in points]
    mask = np.zeros((size, size), dtype=bool)
    n = len(pts)
    for row in range(size):
        for col in range(size):
            x, y = float(col), float(row)
            inside = False
            for k in range(n):
                x1, y1 = pts[k]
                x2, y2 = pts[(k + 1) % n]
                if (y1 > y) != (y2 > y):
                    t = (y - y1) / (y2 - y1)
                    if x < x1 + t * (x2 - x1):
                        inside = not inside
            mask[row, col] = inside
    return mask


def _asset_path(name: str) -> Path:
    return Path(resources.files("taintradar").joinpath("assets", name))


def generate_shape_assets(directory=None) -> dict:
    """(Re)write the canonical star/lightning rasters as RT1 files."""
    directory = Path(directory) if directory else _asset_path("")
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, poly in (("star", _STAR_POLY), ("lightning", _LIGHTNING_POLY)):
        mask = _rasterize_polygon(poly, _BASE_RASTER)
        write_rt1(directory / f"{name}.rt1", mask.astype(np.float32))
        out[name] = mask
    return out


def _nearest_mask_resize(mask: np.ndarray, side: int) -> np.ndarray:
    h, w = mask.shape
    ri = np.minimum(((np.arange(side) + 0.5) * h / side).astype(int), h - 1)
    ci = np.minimum(((np.arange(side) + 0.5) * w / side).astype(int), w - 1)
    return mask[ri[:, None], ci[None, :]]


def shape_mask(shape: str, side: int) -> np.ndarray:
    """Binary (side, side) patch mask for square/star/lightning shapes."""
    if side < 1:
        raise ValueError(f"patch side must be >= 1, got {side}")
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape in ("star", "lightning"):
        path = _asset_path(f"{shape}.rt1")
        if path.exists():
            base = read_rt1(path) >= 0.5
        else:
            base = _rasterize_polygon(_STAR_POLY if shape == "star" else _LIGHTNING_POLY,
                                      _BASE_RASTER)
        return _nearest_mask_resize(base, side)
    raise ValueError(f"unknown patch shape {shape!r}")


def patch_side(image_size: int, size_fraction: float) -> int:
    """Bounding-box side for a patch covering size_fraction of the image area."""
    if not 0 < size_fraction <= 1:
        raise ValueError(f"size_fraction must be in (0, 1], got {size_fraction}")
    return max(1, int(round(image_size * np.sqrt(size_fraction))))


def glasses_band_mask(image_size: int = IMAGE_SIZE, area_fraction: float = 0.07,
                      center_row: int = None) -> np.ndarray:
    """Accessory mask: a horizontal band across the object centroid region."""
    width = int(round(image_size * 0.75))
    rows = max(1, int(round(area_fraction * image_size * image_size / width)))
    center_row = center_row if center_row is not None else int(round(0.42 * image_size))
    r0 = max(0, center_row - rows // 2)
    c0 = (image_size - width) // 2
    mask = np.zeros((image_size, image_size), dtype=bool)
    mask[r0:r0 + rows, c0:c0 + width] = True
    return mask
