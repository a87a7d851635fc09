"""Dataset ingestion, patch extraction, resizing and a synthetic generator."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff"}


class DatasetError(ValueError):
    pass


class MissingMaskError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


class UnknownClassError(DatasetError):
    pass


@dataclass
class SamplePair:
    image: np.ndarray  # [H, W, 3] float in [0, 1]
    mask: np.ndarray   # [H, W] integer class indices
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise SizeMismatchError(
                f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )

    @property
    def source(self) -> str:
        return self.meta.get("source", self.id)


# -- folder ingestion -------------------------------------------------------

def _list_images(d: Path) -> dict[str, Path]:
    if not d.exists():
        return {}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _remap_mask(raw: np.ndarray, class_map: dict | None, stem: str) -> np.ndarray:
    if class_map is None:
        if raw.ndim == 3:
            raw = raw.max(axis=-1)
        return (raw != 0).astype(np.int64)
    out = np.full(raw.shape[:2], -1, dtype=np.int64)
    for key, idx in class_map.items():
        if raw.ndim == 3:
            hit = np.all(raw[..., :3] == np.asarray(key).reshape(1, 1, -1), axis=-1)
        else:
            hit = raw == key
        out[hit] = idx
    if (out < 0).any():
        vals = raw[out < 0]
        raise UnknownClassError(f"{stem}: mask value {vals[0].tolist()} not in class map")
    return out


def load_folder_dataset(images_dir, masks_dir, class_map: dict | None = None) -> list[SamplePair]:
    """Pair images with same-stem masks, sorted by stem.

    Without a ``class_map`` masks are binarised (nonzero -> 1).  Keys of
    ``class_map`` are grey levels or RGB tuples.
    """
    images = _list_images(Path(images_dir))
    masks = _list_images(Path(masks_dir))
    pairs = []
    for stem in sorted(images):
        if stem not in masks:
            raise MissingMaskError(f"no mask found for image {stem!r}")
        img = np.asarray(Image.open(images[stem]).convert("RGB"), dtype=np.float64) / 255.0
        raw = np.asarray(Image.open(masks[stem]))
        if raw.shape[:2] != img.shape[:2]:
            raise SizeMismatchError(f"{stem}: image {img.shape[:2]} vs mask {raw.shape[:2]}")
        pairs.append(SamplePair(img.astype(np.float32), _remap_mask(raw, class_map, stem), stem))
    return pairs


# -- patch extraction -------------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 448
    patches_per_image: int = 30
    seed: int = 0


def patch_offsets(shape: tuple[int, int], spec: PatchSpec, key: str = "") -> np.ndarray:
    """[n, 2] top-left corners drawn uniformly (with replacement) over valid positions."""
    H, W = shape
    P = spec.patch_size
    if H < P or W < P:
        raise DatasetError(f"source {H}x{W} is smaller than the {P}x{P} patch")
    rng = np.random.default_rng([spec.seed, zlib.crc32(key.encode())])
    rows = rng.integers(0, H - P + 1, size=spec.patches_per_image)
    cols = rng.integers(0, W - P + 1, size=spec.patches_per_image)
    return np.stack([rows, cols], axis=1)


def extract_patches(pair: SamplePair, spec: PatchSpec) -> list[SamplePair]:
    P = spec.patch_size
    out = []
    for n, (r, c) in enumerate(patch_offsets(pair.mask.shape, spec, pair.id)):
        out.append(SamplePair(
            pair.image[r:r + P, c:c + P].copy(),
            pair.mask[r:r + P, c:c + P].copy(),
            f"{pair.id}_p{n:02d}",
            {"source": pair.source, "offset": (int(r), int(c))},
        ))
    return out


# -- resizing ---------------------------------------------------------------

def resize_to_input(pair: SamplePair, target_hw: int) -> SamplePair:
    """Bilinear image, nearest-neighbour mask."""
    if target_hw <= 0 or target_hw % 16:
        raise DatasetError(f"target size must be a positive multiple of 16, got {target_hw}")
    if pair.mask.shape == (target_hw, target_hw):
        return pair
    size = (target_hw, target_hw)
    chans = [
        np.asarray(Image.fromarray(pair.image[..., c].astype(np.float32), mode="F").resize(size, Image.BILINEAR))
        for c in range(pair.image.shape[2])
    ]
    image = np.stack(chans, axis=-1).astype(pair.image.dtype)
    mask = np.asarray(
        Image.fromarray(pair.mask.astype(np.int32), mode="I").resize(size, Image.NEAREST)
    ).astype(pair.mask.dtype)
    return replace(pair, image=image, mask=mask)


# -- synthetic oriented shapes ----------------------------------------------

# chiral pentominoes: none is invariant under any rotation or reflection
TEMPLATES: dict[str, tuple[tuple[int, int], ...]] = {
    "L": ((0, 0), (1, 0), (2, 0), (3, 0), (3, 1)),
    "F": ((0, 1), (0, 2), (1, 0), (1, 1), (2, 1)),
    "P": ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0)),
    "N": ((0, 1), (1, 1), (2, 0), (2, 1), (3, 0)),
    "Y": ((0, 1), (1, 0), (1, 1), (2, 1), (3, 1)),
}

FOREGROUND_RGB = np.array([0.85, 0.55, 0.25])
BACKGROUND_RGB = np.array([0.25, 0.35, 0.45])


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 200
    image_size: int = 64
    templates: tuple[str, ...] = ("L", "F", "P", "N", "Y")
    orientation: str | float = "uniform"  # "uniform" or a fixed angle in degrees
    noise_level: float = 0.1
    cell_px: int = 6
    seed: int = 0


def template_mask(name: str, cell_px: int) -> np.ndarray:
    cells = TEMPLATES[name]
    h = max(r for r, _ in cells) + 1
    w = max(c for _, c in cells) + 1
    m = np.zeros((h * cell_px, w * cell_px), dtype=np.int64)
    for r, c in cells:
        m[r * cell_px:(r + 1) * cell_px, c * cell_px:(c + 1) * cell_px] = 1
    return m


def render_shape(name: str, cell_px: int, size: int, top_left: tuple[int, int], angle: float) -> np.ndarray:
    """Rasterise a template rotated CCW by ``angle`` about its bounding-box centre.

    A pixel belongs to the shape when its centre falls inside a template cell.
    """
    tm = template_mask(name, cell_px)
    th, tw = tm.shape
    cy, cx = top_left[0] + th / 2.0, top_left[1] + tw / 2.0
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    x, y = cols - cx, cy - rows  # y up
    t = np.deg2rad(angle)
    xs = np.cos(t) * x + np.sin(t) * y
    ys = -np.sin(t) * x + np.cos(t) * y
    ti = np.floor(th / 2.0 - ys).astype(np.int64)
    tj = np.floor(xs + tw / 2.0).astype(np.int64)
    inside = (ti >= 0) & (ti < th) & (tj >= 0) & (tj < tw)
    out = np.zeros((size, size), dtype=np.int64)
    out[inside] = tm[ti[inside], tj[inside]]
    return out


def _texture(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(sigma, sigma, 0))
    return field_ / (field_.std() + 1e-12)


def synth_sample(spec: SyntheticSpec, i: int) -> SamplePair:
    rng = np.random.default_rng([spec.seed, i])
    name = spec.templates[int(rng.integers(len(spec.templates)))]
    tm = template_mask(name, spec.cell_px)
    th, tw = tm.shape
    radius = np.hypot(th, tw) / 2.0
    if 2 * radius + 2 > spec.image_size:
        raise DatasetError(f"template {name!r} at {spec.cell_px}px cells does not fit a {spec.image_size}px image")
    if spec.orientation == "uniform":
        angle = float(rng.uniform(0.0, 360.0))
    else:
        angle = float(spec.orientation)
    lo_r = int(np.ceil(radius - th / 2.0)) + 1
    lo_c = int(np.ceil(radius - tw / 2.0)) + 1
    hi_r = int(np.floor(spec.image_size - radius - th / 2.0)) - 1
    hi_c = int(np.floor(spec.image_size - radius - tw / 2.0)) - 1
    top_left = (int(rng.integers(lo_r, hi_r + 1)), int(rng.integers(lo_c, hi_c + 1)))
    mask = render_shape(name, spec.cell_px, spec.image_size, top_left, angle)

    s = spec.image_size
    image = np.where(mask[..., None] == 1, FOREGROUND_RGB, BACKGROUND_RGB)
    if spec.noise_level > 0:
        image = image + spec.noise_level * (
            0.7 * _texture(rng, s, 2.0) + 0.3 * rng.standard_normal((s, s, 3))
        )
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SamplePair(image, mask, f"synth_{i:05d}",
                      {"template": name, "angle": angle, "top_left": top_left})


def synth_generate(spec: SyntheticSpec) -> list[SamplePair]:
    return [synth_sample(spec, i) for i in range(spec.n_images)]
