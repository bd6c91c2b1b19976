"""
Line-image preprocessing.
Aspect-preserving resize-and-pad, training-only affine augmentation and batch loaders.
"""

import math
from dataclasses import dataclass
from typing import Callable, Iterator, List, Literal, Optional

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from torch.utils.data import DataLoader, Dataset, Sampler

from .data_model import DatasetManifest
from .splits import Role, SplitAssignment

logger = structlog.get_logger()

TARGET_SIZE = 224


class AugmentParams(BaseModel):
    """Ranges of the training augmentation. Each parameter is sampled uniformly in ±range."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rotation_deg: float = Field(default=15.0, ge=0.0, le=180.0)
    zoom_frac: float = Field(default=0.30, ge=0.0, lt=1.0)
    shear_frac: float = Field(default=0.30, ge=0.0)
    width_shift_frac: float = Field(default=0.20, ge=0.0, le=1.0)
    height_shift_frac: float = Field(default=0.20, ge=0.0, le=1.0)
    fill: Literal["nearest"] = "nearest"


@dataclass(frozen=True)
class AffineSample:
    """One concrete draw from AugmentParams."""
    rotation_deg: float = 0.0
    zoom_y: float = 1.0
    zoom_x: float = 1.0
    shear: float = 0.0
    shift_y: float = 0.0
    shift_x: float = 0.0


@dataclass
class PreprocessedImage:
    """A target×target×3 float image in [0, 1]; the area outside the scaled line is zero."""
    pixels: np.ndarray
    source_line_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"expected a square H×W×3 image, got {self.pixels.shape}")

    def to_tensor(self) -> torch.Tensor:
        """Channel-first float32 tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1), dtype=np.float32))


def _as_unit_float(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H×W×3 image, got shape {image.shape}")
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def scaled_size(height: int, width: int, target: int = TARGET_SIZE) -> tuple:
    """Output (h, w) of the longer-side scaling, each clamped to at least 1."""
    longest = max(height, width)
    return max(1, height * target // longest), max(1, width * target // longest)


def block_process(image: np.ndarray, target: int = TARGET_SIZE, line_id: str = "") -> PreprocessedImage:
    """Scale so the longer side equals `target` and anchor top-left on a zero canvas."""
    pixels = _as_unit_float(image)
    height, width = pixels.shape[:2]
    if height < 1 or width < 1:
        raise ValueError(f"cannot process a zero-sized image ({height}×{width})")

    new_h, new_w = scaled_size(height, width, target)
    if (new_h, new_w) != (height, width):
        tensor = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]
        tensor = F.interpolate(tensor, size=(new_h, new_w), mode="bilinear", align_corners=False)
        pixels = tensor[0].numpy().transpose(1, 2, 0)

    canvas = np.zeros((target, target, 3), dtype=np.float32)
    canvas[:new_h, :new_w] = np.clip(pixels, 0.0, 1.0)
    return PreprocessedImage(pixels=canvas, source_line_id=line_id)


def sample_affine(p: AugmentParams, rng: np.random.Generator) -> AffineSample:
    """Draw rotation, per-axis zoom, shear and shifts uniformly within the ranges of `p`."""
    return AffineSample(
        rotation_deg=float(rng.uniform(-p.rotation_deg, p.rotation_deg)),
        zoom_y=float(rng.uniform(1.0 - p.zoom_frac, 1.0 + p.zoom_frac)),
        zoom_x=float(rng.uniform(1.0 - p.zoom_frac, 1.0 + p.zoom_frac)),
        shear=float(rng.uniform(-p.shear_frac, p.shear_frac)),
        shift_y=float(rng.uniform(-p.height_shift_frac, p.height_shift_frac)),
        shift_x=float(rng.uniform(-p.width_shift_frac, p.width_shift_frac)),
    )


def affine_matrix(sample: AffineSample) -> np.ndarray:
    """Forward 2×2 transform in (row, col) coordinates: rotation · shear · zoom."""
    theta = math.radians(sample.rotation_deg)
    rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shear = np.array([[1.0, 0.0], [sample.shear, 1.0]])
    zoom = np.diag([sample.zoom_y, sample.zoom_x])
    return rotation @ shear @ zoom


def apply_affine(img: PreprocessedImage, sample: AffineSample) -> PreprocessedImage:
    """
    Warp about the image center.

    A positive shift moves content right/down by shift·size pixels. Exposed
    regions repeat the nearest edge pixel.
    """
    size_y, size_x = img.pixels.shape[:2]
    center = np.array([(size_y - 1) / 2.0, (size_x - 1) / 2.0])
    translation = np.array([sample.shift_y * size_y, sample.shift_x * size_x])
    inverse = np.linalg.inv(affine_matrix(sample))
    offset = center - inverse @ (center + translation)

    channels = [
        ndimage.affine_transform(img.pixels[:, :, c], inverse, offset=offset, order=1, mode="nearest")
        for c in range(img.pixels.shape[2])
    ]
    warped = np.stack(channels, axis=2).astype(np.float32)
    return PreprocessedImage(pixels=np.clip(warped, 0.0, 1.0), source_line_id=img.source_line_id)


def augment(img: PreprocessedImage, p: AugmentParams, rng: np.random.Generator) -> PreprocessedImage:
    """Random affine augmentation; deterministic for a fixed generator state."""
    return apply_affine(img, sample_affine(p, rng))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator so batch content does not depend on worker count."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def one_hot(index: int, num_classes: int) -> np.ndarray:
    vector = np.zeros(num_classes, dtype=np.float32)
    vector[index] = 1.0
    return vector


def load_rgb(path: str) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"))


class LineImageDataset(Dataset):
    """Lines of one split role, as (image, one-hot label, line id) triples."""

    def __init__(
        self,
        split: SplitAssignment,
        manifest: DatasetManifest,
        role: Role,
        seed: int = 0,
        params: Optional[AugmentParams] = None,
        image_loader: Callable[[str], np.ndarray] = load_rgb,
    ):
        self.role = Role(role)
        self.seed = seed
        self.epoch = 0
        self.params = params or AugmentParams()
        self.augmenting = self.role == Role.TRAIN
        self.image_loader = image_loader
        self.num_classes = split.num_classes

        index = split.class_index()
        records = {line.line_id: line for line in manifest.lines}
        self.line_ids: List[str] = split.line_ids(self.role)
        self.image_refs = [records[i].image_ref for i in self.line_ids]
        self.labels = [index[records[i].writer.key] for i in self.line_ids]

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.line_ids)

    def __getitem__(self, idx: int):
        image = block_process(self.image_loader(self.image_refs[idx]), line_id=self.line_ids[idx])
        if self.augmenting:
            image = augment(image, self.params, sample_rng(self.seed, self.epoch, idx))
        return image.to_tensor(), torch.from_numpy(one_hot(self.labels[idx], self.num_classes)), self.line_ids[idx]


class EpochPermutationSampler(Sampler):
    """Seeded permutation that changes with the epoch."""

    def __init__(self, size: int, seed: int):
        self.size = size
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __iter__(self) -> Iterator[int]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.epoch]))
        return iter(rng.permutation(self.size).tolist())

    def __len__(self) -> int:
        return self.size


def make_loader(
    split: SplitAssignment,
    manifest: DatasetManifest,
    role: Role,
    batch: int,
    seed: int = 0,
    params: Optional[AugmentParams] = None,
    num_workers: int = 0,
    image_loader: Callable[[str], np.ndarray] = load_rgb,
) -> DataLoader:
    """
    Batch stream for one role.

    Train shuffles per epoch and augments; val/test keep manifest order and never
    augment. Call set_loader_epoch before each training epoch.
    """
    if batch <= 0:
        raise ValueError(f"batch size must be positive, got {batch}")
    dataset = LineImageDataset(split, manifest, role, seed=seed, params=params, image_loader=image_loader)
    sampler = EpochPermutationSampler(len(dataset), seed) if dataset.role == Role.TRAIN else None
    logger.debug("loader_created", role=dataset.role.value, lines=len(dataset), batch=batch)
    return DataLoader(dataset, batch_size=batch, sampler=sampler, shuffle=False, num_workers=num_workers)


def set_loader_epoch(loader: DataLoader, epoch: int) -> None:
    loader.dataset.set_epoch(epoch)
    if isinstance(loader.sampler, EpochPermutationSampler):
        loader.sampler.set_epoch(epoch)
