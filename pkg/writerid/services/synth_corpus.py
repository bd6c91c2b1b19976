"""
Synthetic Corpus Service.
Renders pseudo-glyph line images whose stroke statistics depend on the writer
and whose background, noise and ink depend on the page.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..core.data_model import DatasetManifest, build_manifest, write_manifest_csv
from ..core.splits import Protocol

logger = structlog.get_logger()

LINE_HEIGHT = 64
BASELINE = 50
CAP_HEIGHT = 36
MARGIN = 8
GLYPH_WIDTH = 14
BACKGROUND = 235.0
THICKNESSES = (1, 2, 3, 4, 5)
SLANTS = (-0.4, 0.4)


class SynthSpec(BaseModel):
    """Size, nuisance strength and seed of a synthetic corpus."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_writers: int = Field(default=10, ge=1)
    pages_per_writer: int = Field(default=6, ge=1)
    lines_per_page: int = Field(default=10, ge=1)
    nuisance_level: float = Field(default=0.5, ge=0.0, le=1.0)
    alphabet_size: int = Field(default=8, ge=1)
    glyphs_per_line: Tuple[int, int] = (14, 22)
    target_protocol: Protocol = Protocol.PAGE_DISJOINT
    seed: int = 0

    @model_validator(mode="after")
    def _check_protocol(self) -> "SynthSpec":
        if self.target_protocol == Protocol.PAGE_DISJOINT and self.pages_per_writer < 3:
            raise ValueError("page-disjoint corpora need at least 3 pages per writer")
        low, high = self.glyphs_per_line
        if not 1 <= low <= high:
            raise ValueError(f"invalid glyphs_per_line range {self.glyphs_per_line}")
        return self

    @property
    def lines_per_writer(self) -> int:
        return self.pages_per_writer * self.lines_per_page


@dataclass(frozen=True)
class WriterStyle:
    """Stroke habits of one synthetic writer."""
    thickness: int
    slant: float
    spacing: float
    alphabet: Tuple[Tuple[Tuple[Tuple[float, float], ...], ...], ...]


@dataclass(frozen=True)
class PageNuisance:
    """Acquisition conditions shared by every line of a page."""
    tint: Tuple[float, float, float]
    noise_std: float
    ink: float


def _glyph(rng: np.random.Generator) -> Tuple[Tuple[Tuple[float, float], ...], ...]:
    """A vertical stem plus one or two short hooks, in unit glyph coordinates (y down)."""
    top = float(rng.uniform(0.0, 0.5))
    strokes = [((0.5, top), (0.5, 1.0))]
    for _ in range(int(rng.integers(1, 3))):
        anchor = float(rng.uniform(top, 1.0))
        direction = 1.0 if rng.random() < 0.5 else -1.0
        reach = float(rng.uniform(0.25, 0.5))
        drop = float(rng.uniform(-0.2, 0.2))
        strokes.append((
            (0.5, anchor),
            (0.5 + direction * reach * 0.6, anchor + drop * 0.5),
            (0.5 + direction * reach, anchor + drop),
        ))
    return tuple(strokes)


def writer_styles(spec: SynthSpec) -> List[WriterStyle]:
    """Styles spread over the (thickness, slant) grid in a seed-dependent order."""
    grid = [(t, s) for t in THICKNESSES for s in SLANTS]
    order = np.random.default_rng([spec.seed, 0]).permutation(len(grid))
    styles = []
    for writer in range(spec.num_writers):
        rng = np.random.default_rng([spec.seed, 1, writer])
        thickness, slant = grid[order[writer % len(grid)]]
        styles.append(WriterStyle(
            thickness=thickness,
            slant=slant,
            spacing=float(rng.uniform(3.0, 10.0)),
            alphabet=tuple(_glyph(rng) for _ in range(spec.alphabet_size)),
        ))
    return styles


def page_nuisance(spec: SynthSpec, writer: int, page: int) -> PageNuisance:
    """Background tint, noise and ink darkness scaled by the nuisance level."""
    rng = np.random.default_rng([spec.seed, 2, writer, page])
    level = spec.nuisance_level
    tint = tuple(float(BACKGROUND + level * 60.0 * v) for v in rng.uniform(-1.0, 0.33, size=3))
    return PageNuisance(
        tint=tint,
        noise_std=level * 20.0,
        ink=float(30.0 + level * 80.0 * rng.random()),
    )


def render_line(style: WriterStyle, nuisance: PageNuisance, rng: np.random.Generator,
                glyphs_per_line: Tuple[int, int] = (14, 22)) -> np.ndarray:
    """One H×W×3 uint8 line image."""
    count = int(rng.integers(glyphs_per_line[0], glyphs_per_line[1] + 1))
    advances = GLYPH_WIDTH + style.spacing + rng.uniform(-1.5, 1.5, size=count)
    width = int(np.ceil(2 * MARGIN + advances.sum() + CAP_HEIGHT * abs(style.slant)))

    mask = Image.new("L", (width, LINE_HEIGHT), 0)
    draw = ImageDraw.Draw(mask)
    x = MARGIN + (CAP_HEIGHT * -style.slant if style.slant < 0 else 0.0)
    top = BASELINE - CAP_HEIGHT
    for glyph_index, advance in zip(rng.integers(0, len(style.alphabet), size=count), advances):
        for stroke in style.alphabet[glyph_index]:
            points = []
            for gx, gy in stroke:
                py = top + gy * CAP_HEIGHT
                px = x + gx * GLYPH_WIDTH + style.slant * (BASELINE - py)
                points.append((px, py))
            draw.line(points, fill=255, width=style.thickness, joint="curve")
        x += advance

    ink = np.asarray(mask, dtype=np.float64)[:, :, None] / 255.0
    background = np.array(nuisance.tint, dtype=np.float64)
    pixels = background * (1.0 - ink) + nuisance.ink * ink
    if nuisance.noise_std > 0:
        pixels = pixels + rng.normal(0.0, nuisance.noise_std, size=pixels.shape)
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def writer_name(writer: int) -> str:
    return f"Synthetic Writer {writer:03d}"


def page_id(writer: int, page: int) -> str:
    return f"w{writer:03d}_p{page:02d}"


def _render_page(spec: SynthSpec, style: WriterStyle, writer: int, page: int, out_dir: Path) -> List[Path]:
    nuisance = page_nuisance(spec, writer, page)
    rng = np.random.default_rng([spec.seed, 3, writer, page])
    pid = page_id(writer, page)
    page_dir = out_dir / pid
    page_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for line in range(spec.lines_per_page):
        path = page_dir / f"{pid}_l{line:02d}.png"
        Image.fromarray(render_line(style, nuisance, rng, spec.glyphs_per_line)).save(path)
        paths.append(path)
    return paths


def generate(spec: SynthSpec, out_dir: Path, max_workers: int = 4) -> Tuple[Path, DatasetManifest]:
    """
    Render the corpus to `<out>/<page_id>/<line_id>.png` and write labels.csv and
    manifest.csv beside the page directories.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    styles = writer_styles(spec)
    jobs = [(writer, page) for writer in range(spec.num_writers) for page in range(spec.pages_per_writer)]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        list(pool.map(lambda job: _render_page(spec, styles[job[0]], job[0], job[1], out_dir), jobs))

    labels = out_dir / "labels.csv"
    with open(labels, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["page_id", "line_id", "writer", "flags", "collection"])
        for w, p in jobs:
            writer.writerow([page_id(w, p), "", writer_name(w), "handwritten", "synthetic"])

    manifest = build_manifest(out_dir, labels)
    write_manifest_csv(manifest, out_dir / "manifest.csv")
    logger.info(
        "synthetic_corpus_generated",
        out_dir=str(out_dir),
        writers=spec.num_writers,
        pages=len(jobs),
        lines=len(manifest.lines),
        nuisance_level=spec.nuisance_level,
        seed=spec.seed,
    )
    return out_dir, manifest


def _run_lengths(mask: np.ndarray) -> np.ndarray:
    """Length of the horizontal ink run through each pixel (0 off ink)."""
    lengths = np.zeros(mask.shape, dtype=np.int64)
    for r, row in enumerate(mask):
        padded = np.concatenate(([False], row, [False]))
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        for start, stop in zip(edges[::2], edges[1::2]):
            lengths[r, start:stop] = stop - start
    return lengths


def ink_mask(image: np.ndarray) -> np.ndarray:
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    threshold = (np.median(gray) + gray.min()) / 2.0
    return gray < threshold


def estimate_slant(mask: np.ndarray, candidates: Sequence[float] = tuple(np.linspace(-0.6, 0.6, 25))) -> float:
    """Shear that makes vertical strokes sharpest in the column projection."""
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return 0.0
    best, best_score = 0.0, -1.0
    for shear in candidates:
        shifted = np.rint(cols - shear * (BASELINE - rows)).astype(np.int64)
        profile = np.bincount(shifted - shifted.min())
        score = float(np.sum(profile.astype(np.float64) ** 2))
        if score > best_score:
            best, best_score = float(shear), score
    return best


def stroke_statistics(image: np.ndarray) -> np.ndarray:
    """[mean stroke width, slant, ink fraction, gap fraction] of a line image."""
    mask = ink_mask(image)
    if not mask.any():
        return np.zeros(4)
    width = np.minimum(_run_lengths(mask), _run_lengths(mask.T).T)[mask].mean()
    columns = np.flatnonzero(mask.any(axis=0))
    extent = mask[:, columns[0]:columns[-1] + 1]
    gap_fraction = 1.0 - extent.any(axis=0).mean()
    return np.array([width, estimate_slant(mask), mask.mean(), gap_fraction])


def nearest_centroid_accuracy(features: np.ndarray, labels: Sequence[int], test_mask: Optional[np.ndarray] = None) -> float:
    """
    Accuracy of a nearest-centroid classifier on standardized features.

    Centroids come from the rows outside `test_mask` (every other row per
    label by default) and are scored on the rows inside it.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if test_mask is None:
        test_mask = np.zeros(len(labels), dtype=bool)
        for label in np.unique(labels):
            test_mask[np.flatnonzero(labels == label)[1::2]] = True
    scale = features.std(axis=0)
    scale[scale == 0] = 1.0
    standardized = (features - features.mean(axis=0)) / scale
    classes = np.unique(labels[~test_mask])
    centroids = np.stack([standardized[~test_mask & (labels == c)].mean(axis=0) for c in classes])
    distances = ((standardized[test_mask][:, None, :] - centroids[None]) ** 2).sum(axis=2)
    predicted = classes[distances.argmin(axis=1)]
    return float(np.mean(predicted == labels[test_mask]))
