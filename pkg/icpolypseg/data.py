import os
import math
import logging
from dataclasses import dataclass, field
from typing import Optional, List, Tuple, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .config import SynthConfig, save_config
from .errors import ContractViolation, DatasetError

log = logging.getLogger("icpolypseg.data")

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
_WIDE_MODES = ("I;16", "I;16L", "I;16B", "I")


@dataclass
class SampleBatch:
    images: torch.Tensor                    # (N, 3, S, S) in [0, 1]
    masks: Optional[torch.Tensor]           # (N, 1, S, S) in {0, 1}
    ids: List[str]
    sources: List[Tuple[str, Optional[str]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------
# Image I/O
# ---------------------------

def read_image(path: str, size: int) -> np.ndarray:
    """-> float32 (3, size, size) in [0, 1], bilinear resize."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size, size), Image.Resampling.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"unreadable image {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path: str, size: int) -> np.ndarray:
    """-> float32 (1, size, size) in {0, 1}; nearest resize, then >= half of the full range."""
    try:
        with Image.open(path) as im:
            full = 65535.0 if im.mode in _WIDE_MODES else 255.0
            if im.mode not in _WIDE_MODES and im.mode != "L":
                im = im.convert("L")
            im = im.resize((size, size), Image.Resampling.NEAREST)
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as e:
        raise DatasetError(f"unreadable mask {path}: {e}") from e
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr >= full / 2).astype(np.float32)[None]


def read_probability_map(path: str) -> np.ndarray:
    """8-bit maps scale by 255, 16-bit maps by 65535."""
    try:
        with Image.open(path) as im:
            full = 65535.0 if im.mode in _WIDE_MODES else 255.0
            if im.mode not in _WIDE_MODES and im.mode != "L":
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as e:
        raise DatasetError(f"unreadable prediction {path}: {e}") from e
    return np.clip(arr / full, 0.0, 1.0)


def write_probability_map(path: str, prob: np.ndarray) -> None:
    arr = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 65535.0).astype(np.uint16)).save(path)


def write_mask(path: str, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


# ---------------------------
# Dataset
# ---------------------------

def _stems(directory: str) -> dict:
    out = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in IMAGE_EXTS:
            log.warning("skipping %s: not an image file", os.path.join(directory, name))
            continue
        path = os.path.join(directory, name)
        if stem in out:
            raise DatasetError(f"two files share the name {stem!r}: {out[stem]} and {path}")
        out[stem] = path
    return out


class PolypDataset(torch.utils.data.Dataset):
    """Name-matched image/mask pairs, loaded lazily at a fixed square size."""

    def __init__(self, pairs: Sequence[Tuple[str, str, Optional[str]]], target_size: int, name: str = "dataset"):
        self.pairs = list(pairs)
        self.target_size = target_size
        self.name = name

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def ids(self) -> List[str]:
        return [p[0] for p in self.pairs]

    @property
    def has_masks(self) -> bool:
        return all(p[2] is not None for p in self.pairs)

    def __getitem__(self, i: int):
        image_id, img_path, mask_path = self.pairs[i]
        image = torch.from_numpy(read_image(img_path, self.target_size))
        mask = torch.from_numpy(read_mask(mask_path, self.target_size)) if mask_path else None
        return image, mask, image_id

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "PolypDataset":
        return PolypDataset([self.pairs[i] for i in indices], self.target_size, name or self.name)

    def batches(self, batch_size: int = 1, order: Optional[Sequence[int]] = None) -> Iterator[SampleBatch]:
        """Deterministic batches in `order` (default: sorted id order)."""
        if batch_size < 1:
            raise ContractViolation(f"batch_size must be positive, got {batch_size}")
        order = list(range(len(self))) if order is None else list(order)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            items = [self[i] for i in idx]
            masks = None
            if all(m is not None for _, m, _ in items):
                masks = torch.stack([m for _, m, _ in items])
            yield SampleBatch(
                images=torch.stack([img for img, _, _ in items]),
                masks=masks,
                ids=[image_id for _, _, image_id in items],
                sources=[(self.pairs[i][1], self.pairs[i][2]) for i in idx],
            )

    def __iter__(self) -> Iterator[SampleBatch]:
        return self.batches(1)


def load_dataset(root: str, split: Optional[str] = None, target_size: int = 352,
                 require_masks: bool = True, name: Optional[str] = None) -> PolypDataset:
    """Read `<root>[/<split>]/images` and `/masks`; pairs are matched by file stem."""
    base = os.path.join(root, split) if split else root
    img_dir = os.path.join(base, "images")
    mask_dir = os.path.join(base, "masks")
    if not os.path.isdir(img_dir):
        raise DatasetError(f"missing images directory: {img_dir}")
    images = _stems(img_dir)
    masks = {}
    if os.path.isdir(mask_dir):
        masks = _stems(mask_dir)
    elif require_masks:
        raise DatasetError(f"missing masks directory: {mask_dir}")

    orphans = sorted(set(masks) - set(images))
    if orphans:
        raise DatasetError(f"mask without image: {masks[orphans[0]]}")
    pairs = []
    for stem in sorted(images):
        mask_path = masks.get(stem)
        if mask_path is None and require_masks:
            raise DatasetError(f"image without mask: {images[stem]}")
        pairs.append((stem, images[stem], mask_path))
    if not pairs:
        raise DatasetError(f"size-0 dataset: {base}")

    ds_name = name or os.path.basename(os.path.normpath(base)) or "dataset"
    log.info("loaded %s: %d images from %s", ds_name, len(pairs), base)
    return PolypDataset(pairs, target_size, ds_name)


def split_indices(n: int, val_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Seeded shuffle, then the first round(n * val_fraction) indices (at least 1) validate."""
    if n < 2:
        raise DatasetError(f"need at least 2 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def train_val_sets(root: str, target_size: int, val_fraction: float, seed: int) -> Tuple[PolypDataset, PolypDataset]:
    """`<root>/train` and `<root>/val` when both exist, otherwise a seeded split of `<root>`."""
    if os.path.isdir(os.path.join(root, "train")) and os.path.isdir(os.path.join(root, "val")):
        return load_dataset(root, "train", target_size), load_dataset(root, "val", target_size)
    pool = load_dataset(root, None, target_size)
    train_idx, val_idx = split_indices(len(pool), val_fraction, seed)
    return pool.subset(train_idx, f"{pool.name}-train"), pool.subset(val_idx, f"{pool.name}-val")


# ---------------------------
# Multi-scale
# ---------------------------

def multiscale_size(base: int, ratio: float) -> int:
    """Nearest multiple of 32 to base * ratio (halves round up)."""
    if base < 32 or base % 32:
        raise ContractViolation(f"base size must be a positive multiple of 32, got {base}")
    if ratio <= 0:
        raise ContractViolation(f"scale ratio must be positive, got {ratio}")
    size = 32 * math.floor(base * ratio / 32 + 0.5)
    if size < 32:
        raise ContractViolation(f"scale {ratio} of {base} snaps below 32")
    return size


def rescale_batch(batch: SampleBatch, size: int) -> SampleBatch:
    if batch.images.shape[-1] == size and batch.images.shape[-2] == size:
        return batch
    images = F.interpolate(batch.images, size=(size, size), mode="bilinear", align_corners=False)
    masks = None
    if batch.masks is not None:
        masks = F.interpolate(batch.masks, size=(size, size), mode="nearest")
    return SampleBatch(images=images, masks=masks, ids=batch.ids, sources=batch.sources)


# ---------------------------
# Synthetic polyps
# ---------------------------

_BACKGROUND_RGB = np.array([0.62, 0.30, 0.24])
_POLYP_RGB = np.array([0.88, 0.52, 0.42])
_HARMONICS = np.arange(2, 6)


def _blob(rng: np.random.Generator, cfg: SynthConfig, yy: np.ndarray, xx: np.ndarray):
    """One closed blob with a harmonic-jittered radius. -> (inside mask, dome shading)."""
    s = cfg.canvas
    r0 = rng.uniform(*cfg.blob_radius_range) * s
    coeffs = rng.uniform(-1.0, 1.0, size=len(_HARMONICS))
    coeffs *= cfg.boundary_jitter * rng.uniform(0.5, 1.0) / max(np.abs(coeffs).sum(), 1e-12)
    phases = rng.uniform(0.0, 2 * np.pi, size=len(_HARMONICS))
    reach = r0 * (1.0 + cfg.boundary_jitter) + 1.0
    lo, hi = reach, s - reach
    cy = rng.uniform(lo, hi) if lo < hi else s / 2
    cx = rng.uniform(lo, hi) if lo < hi else s / 2

    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    dist = np.hypot(dy, dx)
    radius = r0 * (1.0 + np.sum(coeffs[:, None, None] * np.cos(_HARMONICS[:, None, None] * theta + phases[:, None, None]), axis=0))
    inside = dist <= radius
    dome = np.clip(1.0 - (dist / radius) ** 2, 0.0, 1.0)
    return inside, dome


def synth_sample(rng: np.random.Generator, cfg: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    """-> (uint8 RGB image (S, S, 3), bool mask (S, S))."""
    s = cfg.canvas
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    mask = np.zeros((s, s), dtype=bool)
    shade = np.zeros((s, s))
    n_blobs = int(rng.integers(cfg.blob_count_range[0], cfg.blob_count_range[1] + 1))
    for _ in range(n_blobs):
        inside, dome = _blob(rng, cfg, yy, xx)
        mask |= inside
        shade = np.maximum(shade, np.where(inside, 0.7 + 0.3 * dome, 0.0))

    bg = _BACKGROUND_RGB + rng.uniform(-0.05, 0.05, size=3)
    fg = _POLYP_RGB + rng.uniform(-0.05, 0.05, size=3)
    texture = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=max(1.0, s / 48))
    texture /= max(np.abs(texture).max(), 1e-12)
    vignette = 1.0 - 0.35 * (np.hypot(yy - s / 2, xx - s / 2) / (s / np.sqrt(2))) ** 2

    img = np.where(mask[..., None], fg * shade[..., None], bg * vignette[..., None])
    img = img + cfg.texture_noise * texture[..., None]
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img, mask


def synth_generate(cfg: SynthConfig, out: str) -> List[str]:
    """Write `count` image/mask PNG pairs plus synth_config.json under `out`.

    Same cfg -> byte-identical files.
    """
    if cfg.count < 1:
        raise DatasetError("size-0 dataset: synthetic count must be >= 1")
    cfg.validate()
    img_dir = os.path.join(out, "images")
    mask_dir = os.path.join(out, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    width = max(5, len(str(cfg.count - 1)))
    written = []
    for i in range(cfg.count):
        img, mask = synth_sample(rng, cfg)
        stem = f"{i:0{width}d}"
        img_path = os.path.join(img_dir, f"{stem}.png")
        mask_path = os.path.join(mask_dir, f"{stem}.png")
        Image.fromarray(img).save(img_path)
        write_mask(mask_path, mask)
        written.extend([img_path, mask_path])

    cfg_path = os.path.join(out, "synth_config.json")
    save_config(cfg, cfg_path)
    written.append(cfg_path)
    log.info("wrote %d synthetic pairs (%dpx) to %s", cfg.count, cfg.canvas, out)
    return written


def mask_area_fractions(root: str) -> List[float]:
    """Foreground fraction per mask under `<root>/masks`, in file order."""
    mask_dir = os.path.join(root, "masks")
    out = []
    for _, path in sorted(_stems(mask_dir).items()):
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
        out.append(float(np.count_nonzero(arr >= 128)) / arr.size)
    return out
