"""
Dataset catalog for writer identification.
Writer-label space, line/page records, manifest construction, filtering,
statistics and the manifest CSV format.
"""

import csv
import hashlib
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ManifestError
from .names import collapse_whitespace, normalize_name

logger = structlog.get_logger()

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff")
MANIFEST_HEADER = ["line_id", "page_id", "image_path", "writer_kind", "writer_names", "flags", "collection"]
PAIR_SEPARATORS = (" & ", "|")


class WriterKind(str, Enum):
    """Kinds of writer classes."""
    SINGLE = "single"
    COMPOSITE = "composite-pair"


class ContentFlag(str, Enum):
    """Content annotations carried by a line image."""
    HANDWRITTEN = "handwritten"
    TYPEWRITTEN = "typewritten"
    STAMP = "stamp"
    PAGE_NUMBER = "page-number"
    PRINTED = "printed"
    OTTOMAN_SCRIPT = "ottoman-script"
    MIXED_SCRIPT = "mixed-script"


EXCLUDED_FLAGS = frozenset({
    ContentFlag.TYPEWRITTEN,
    ContentFlag.STAMP,
    ContentFlag.PAGE_NUMBER,
    ContentFlag.PRINTED,
})


# Lines carrying no flag at all are handwritten.
DEFAULT_FLAGS = frozenset({ContentFlag.HANDWRITTEN})


class DropReason(str, Enum):
    """Why filter_manifest removed a line. Checked in declaration order."""
    UNLABELED = "unlabeled"
    EXCLUDED_CONTENT = "excluded_content"
    NOT_HANDWRITTEN = "not_handwritten"


class WriterClass(BaseModel):
    """A single writer or a canonicalized composite writer-pair."""

    model_config = ConfigDict(frozen=True)

    kind: WriterKind
    names: Tuple[str, ...]
    class_id: Optional[int] = None

    @model_validator(mode="after")
    def _check_canonical(self) -> "WriterClass":
        expected = 1 if self.kind == WriterKind.SINGLE else 2
        if len(self.names) != expected:
            raise ValueError(f"{self.kind.value} writer needs exactly {expected} name(s): {self.names}")
        keys = [normalize_name(n) for n in self.names]
        if any(not k for k in keys):
            raise ValueError("writer names must be non-empty")
        if len(set(keys)) != len(keys):
            raise ValueError(f"composite-pair names must be distinct: {self.names}")
        if keys != sorted(keys):
            raise ValueError(f"writer names not in canonical order: {self.names}")
        return self

    @classmethod
    def from_names(cls, names: Sequence[str], class_id: Optional[int] = None) -> "WriterClass":
        """Canonicalize one or two names. Duplicate members collapse to a single writer."""
        unique: Dict[str, str] = {}
        for name in names:
            display = collapse_whitespace(name)
            unique.setdefault(normalize_name(display), display)
        ordered = tuple(unique[k] for k in sorted(unique))
        if not 1 <= len(ordered) <= 2:
            raise ValueError(f"writer class needs 1 or 2 names, got {list(names)}")
        kind = WriterKind.SINGLE if len(ordered) == 1 else WriterKind.COMPOSITE
        return cls(kind=kind, names=ordered, class_id=class_id)

    @classmethod
    def parse(cls, text: str) -> Optional["WriterClass"]:
        """Parse a label-table writer cell; empty cells mean no writer."""
        if not text or not text.strip():
            return None
        parts = [text]
        for separator in PAIR_SEPARATORS:
            if separator in text:
                parts = text.split(separator)
                break
        return cls.from_names([p for p in parts if p.strip()])

    @property
    def key(self) -> Tuple[str, ...]:
        """Identity of the class, independent of class_id and display spelling."""
        return tuple(normalize_name(n) for n in self.names)

    @property
    def label(self) -> str:
        return " & ".join(self.names)

    def with_id(self, class_id: int) -> "WriterClass":
        return self.model_copy(update={"class_id": class_id})


class LineRecord(BaseModel):
    """One line image and its annotations."""

    model_config = ConfigDict(frozen=True)

    line_id: str
    page_id: str
    image_ref: str
    writer: Optional[WriterClass] = None
    content_flags: FrozenSet[ContentFlag] = DEFAULT_FLAGS

    @field_validator("content_flags")
    @classmethod
    def _default_flags(cls, flags: FrozenSet[ContentFlag]) -> FrozenSet[ContentFlag]:
        return flags or DEFAULT_FLAGS

    def drop_reason(self, extra_excluded: FrozenSet[ContentFlag] = frozenset()) -> Optional[DropReason]:
        """Reason this line cannot be used for training, or None when usable."""
        if self.writer is None:
            return DropReason.UNLABELED
        if self.content_flags & (EXCLUDED_FLAGS | extra_excluded):
            return DropReason.EXCLUDED_CONTENT
        if ContentFlag.HANDWRITTEN not in self.content_flags:
            return DropReason.NOT_HANDWRITTEN
        return None


class PageRecord(BaseModel):
    """A manuscript page and the lines cut from it."""

    model_config = ConfigDict(frozen=True)

    page_id: str
    writer: Optional[WriterClass] = None
    line_ids: Tuple[str, ...]
    collection: str = ""

    @model_validator(mode="after")
    def _check_lines(self) -> "PageRecord":
        if not self.line_ids:
            raise ValueError(f"page {self.page_id} has no lines")
        return self


class DatasetManifest(BaseModel):
    """Finalized, immutable catalog of pages, lines and writer classes."""

    model_config = ConfigDict(frozen=True)

    pages: Tuple[PageRecord, ...] = ()
    lines: Tuple[LineRecord, ...] = ()
    classes: Tuple[WriterClass, ...] = ()
    provenance: str = ""

    @model_validator(mode="after")
    def _check_integrity(self) -> "DatasetManifest":
        line_ids = [line.line_id for line in self.lines]
        if len(set(line_ids)) != len(line_ids):
            raise ValueError("line_id values are not unique")
        pages = {page.page_id: page for page in self.pages}
        for line in self.lines:
            if line.page_id not in pages:
                raise ValueError(f"line {line.line_id} references unknown page {line.page_id}")
        by_id = {line.line_id: line for line in self.lines}
        for page in self.pages:
            for line_id in page.line_ids:
                if line_id not in by_id or by_id[line_id].page_id != page.page_id:
                    raise ValueError(f"page {page.page_id} lists foreign line {line_id}")

        class_keys = [c.key for c in self.classes]
        if len(set(class_keys)) != len(class_keys):
            raise ValueError("writer classes are not unique")
        if [c.class_id for c in self.classes] != list(range(len(self.classes))):
            raise ValueError("class ids must be contiguous 0..num_classes-1")
        known = {c.key: c.class_id for c in self.classes}
        referenced = [r.writer for r in (*self.lines, *self.pages) if r.writer is not None]
        for writer in referenced:
            if known.get(writer.key) != writer.class_id:
                raise ValueError(f"writer {writer.label} is not a finalized class")
        if set(known) != {w.key for w in referenced}:
            raise ValueError("classes must be exactly the referenced writers")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def line(self, line_id: str) -> LineRecord:
        for line in self.lines:
            if line.line_id == line_id:
                return line
        raise KeyError(line_id)

    def lines_by_page(self) -> Dict[str, List[LineRecord]]:
        grouped: Dict[str, List[LineRecord]] = defaultdict(list)
        for line in self.lines:
            grouped[line.page_id].append(line)
        return dict(grouped)

    def lines_by_class(self) -> Dict[int, List[LineRecord]]:
        grouped: Dict[int, List[LineRecord]] = {c.class_id: [] for c in self.classes}
        for line in self.lines:
            if line.writer is not None:
                grouped[line.writer.class_id].append(line)
        return grouped


class FilterReport(BaseModel):
    """Accounting of lines removed by filter_manifest."""
    kept: int = 0
    dropped: Dict[DropReason, List[str]] = Field(default_factory=dict)

    @property
    def total_dropped(self) -> int:
        return sum(len(ids) for ids in self.dropped.values())


class WriterCount(BaseModel):
    """Per-writer line and page counts."""
    class_id: int
    label: str
    lines: int
    pages: int


class CountSummary(BaseModel):
    """Max/min/mean/population std of a per-writer count."""
    maximum: int = 0
    minimum: int = 0
    mean: float = 0.0
    std: float = 0.0


class StatsReport(BaseModel):
    """Manifest statistics in the shape of the corpus summary tables."""
    total_pages: int = 0
    total_lines: int = 0
    labeled_pages: int = 0
    labeled_lines: int = 0
    num_classes: int = 0
    per_writer: List[WriterCount] = Field(default_factory=list)
    lines_per_writer: CountSummary = Field(default_factory=CountSummary)
    pages_per_writer: CountSummary = Field(default_factory=CountSummary)


def finalize_manifest(
    lines: Iterable[LineRecord],
    provenance: str = "",
    collections: Optional[Dict[str, str]] = None,
) -> DatasetManifest:
    """Densify classes, stamp class ids on every record and derive page records."""
    ordered = sorted(lines, key=lambda r: (r.page_id, r.line_id))
    collections = collections or {}

    writers: Dict[Tuple[str, ...], WriterClass] = {}
    for line in ordered:
        if line.writer is not None:
            writers.setdefault(line.writer.key, line.writer)
    classes = tuple(writers[key].with_id(i) for i, key in enumerate(sorted(writers)))
    by_key = {c.key: c for c in classes}

    stamped = [
        line.model_copy(update={"writer": by_key[line.writer.key]}) if line.writer is not None else line
        for line in ordered
    ]

    grouped: Dict[str, List[LineRecord]] = defaultdict(list)
    for line in stamped:
        grouped[line.page_id].append(line)

    pages = []
    for page_id in sorted(grouped):
        members = grouped[page_id]
        keys = {line.writer.key if line.writer is not None else None for line in members}
        page_writer = by_key[next(iter(keys))] if len(keys) == 1 and None not in keys else None
        pages.append(PageRecord(
            page_id=page_id,
            writer=page_writer,
            line_ids=tuple(line.line_id for line in members),
            collection=collections.get(page_id, ""),
        ))

    return DatasetManifest(pages=tuple(pages), lines=tuple(stamped), classes=classes, provenance=provenance)


def _parse_flags(cell: Optional[str]) -> Optional[FrozenSet[ContentFlag]]:
    if cell is None or not cell.strip():
        return None
    try:
        return frozenset(ContentFlag(part.strip()) for part in cell.split(";") if part.strip())
    except ValueError as e:
        raise ManifestError(f"unknown content flag in '{cell}': {e}")


def _parse_writer(cell: str, where: str) -> Optional[WriterClass]:
    try:
        return WriterClass.parse(cell)
    except ValueError as e:
        raise ManifestError(f"bad writer cell '{cell}' at {where}: {e}", offenders=[where])


def _scan_page(page_dir: Path) -> List[Tuple[str, str]]:
    found = []
    with os.scandir(page_dir) as entries:
        for entry in entries:
            if entry.is_file() and Path(entry.name).suffix.lower() in IMAGE_SUFFIXES:
                found.append((Path(entry.name).stem, entry.path))
    return sorted(found)


def build_manifest(dataset_root: Path, label_table: Path, max_workers: int = 8) -> DatasetManifest:
    """
    Build a manifest from `<root>/<page_id>/<line_id>.<ext>` images and a label table.

    The label table has columns page_id,line_id,writer,flags,collection. Rows with an
    empty line_id set page defaults; rows with a line_id override one line.
    """
    dataset_root = Path(dataset_root)
    if not dataset_root.is_dir():
        raise ManifestError(f"dataset root not found: {dataset_root}")

    page_dirs = sorted(p for p in dataset_root.iterdir() if p.is_dir())
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        scanned = dict(zip((p.name for p in page_dirs), pool.map(_scan_page, page_dirs)))

    page_defaults: Dict[str, Dict[str, str]] = {}
    line_labels: Dict[Tuple[str, str], Dict[str, str]] = {}
    missing: List[str] = []
    rows = _read_label_rows(Path(label_table))
    for row in rows:
        page_id = (row.get("page_id") or "").strip()
        line_id = (row.get("line_id") or "").strip()
        if not page_id:
            continue
        on_disk = dict(scanned.get(page_id, []))
        if line_id:
            if line_id not in on_disk:
                missing.append(f"{page_id}/{line_id}")
            line_labels[(page_id, line_id)] = row
        else:
            if page_id not in scanned:
                missing.append(f"{page_id}/")
            page_defaults[page_id] = row
    if missing:
        raise ManifestError(f"{len(missing)} label rows reference missing images", offenders=missing)

    seen: Dict[str, str] = {}
    duplicates: List[str] = []
    lines: List[LineRecord] = []
    collections: Dict[str, str] = {}
    for page_id, files in scanned.items():
        page_row = page_defaults.get(page_id, {})
        if page_row.get("collection"):
            collections[page_id] = page_row["collection"].strip()
        for line_id, path in files:
            if line_id in seen:
                duplicates.append(f"{line_id} ({seen[line_id]}, {page_id})")
                continue
            seen[line_id] = page_id
            row = line_labels.get((page_id, line_id), {})
            writer_cell = row.get("writer") or page_row.get("writer") or ""
            flags = _parse_flags(row.get("flags")) or _parse_flags(page_row.get("flags"))
            lines.append(LineRecord(
                line_id=line_id,
                page_id=page_id,
                image_ref=str(Path(path).resolve()),
                writer=_parse_writer(writer_cell, f"{page_id}/{line_id}"),
                content_flags=flags or DEFAULT_FLAGS,
            ))
    if duplicates:
        raise ManifestError(f"{len(duplicates)} duplicate line ids", offenders=duplicates)

    manifest = finalize_manifest(lines, provenance=f"ingest:{dataset_root}", collections=collections)
    logger.info(
        "manifest_built",
        root=str(dataset_root),
        pages=len(manifest.pages),
        lines=len(manifest.lines),
        classes=manifest.num_classes,
    )
    return manifest


def _read_label_rows(label_table: Path) -> List[Dict[str, str]]:
    if not label_table.exists():
        raise ManifestError(f"label table not found: {label_table}")
    with open(label_table, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def filter_manifest_with_report(
    m: DatasetManifest,
    exclude_ottoman: bool = False,
) -> Tuple[DatasetManifest, FilterReport]:
    """Keep labeled handwritten-only lines; report every drop with exactly one reason."""
    extra = frozenset({ContentFlag.OTTOMAN_SCRIPT}) if exclude_ottoman else frozenset()
    kept: List[LineRecord] = []
    dropped: Dict[DropReason, List[str]] = {}
    for line in m.lines:
        reason = line.drop_reason(extra)
        if reason is None:
            kept.append(line)
        else:
            dropped.setdefault(reason, []).append(line.line_id)

    collections = {p.page_id: p.collection for p in m.pages}
    filtered = finalize_manifest(kept, provenance=m.provenance, collections=collections)
    report = FilterReport(kept=len(kept), dropped=dropped)
    logger.info(
        "manifest_filtered",
        kept=report.kept,
        dropped={reason.value: len(ids) for reason, ids in dropped.items()},
        classes=filtered.num_classes,
        pages=len(filtered.pages),
    )
    return filtered, report


def filter_manifest(m: DatasetManifest, exclude_ottoman: bool = False) -> DatasetManifest:
    """Training-ready manifest: labeled, handwritten, no stamps/print/page numbers."""
    return filter_manifest_with_report(m, exclude_ottoman)[0]


def _summarize(values: Sequence[int]) -> CountSummary:
    if not values:
        return CountSummary()
    mean = sum(values) / len(values)
    std = math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))
    return CountSummary(maximum=max(values), minimum=min(values), mean=mean, std=std)


def manifest_stats(m: DatasetManifest) -> StatsReport:
    """Per-writer counts and their max/min/mean/population std."""
    pages_of: Dict[int, set] = defaultdict(set)
    lines_of: Dict[int, int] = defaultdict(int)
    labeled_pages = set()
    for line in m.lines:
        if line.writer is None:
            continue
        lines_of[line.writer.class_id] += 1
        pages_of[line.writer.class_id].add(line.page_id)
        labeled_pages.add(line.page_id)

    per_writer = [
        WriterCount(class_id=c.class_id, label=c.label, lines=lines_of[c.class_id], pages=len(pages_of[c.class_id]))
        for c in m.classes
    ]
    return StatsReport(
        total_pages=len(m.pages),
        total_lines=len(m.lines),
        labeled_pages=len(labeled_pages),
        labeled_lines=sum(lines_of.values()),
        num_classes=m.num_classes,
        per_writer=per_writer,
        lines_per_writer=_summarize([w.lines for w in per_writer]),
        pages_per_writer=_summarize([w.pages for w in per_writer]),
    )


def _writer_cells(writer: Optional[WriterClass]) -> Tuple[str, str]:
    if writer is None:
        return "", ""
    return writer.kind.value, "|".join(writer.names)


def manifest_rows(m: DatasetManifest, base_dir: Optional[Path] = None) -> List[List[str]]:
    """CSV rows in deterministic (page_id, line_id) order."""
    collections = {page.page_id: page.collection for page in m.pages}
    rows = []
    for line in sorted(m.lines, key=lambda r: (r.page_id, r.line_id)):
        image_path = line.image_ref
        if base_dir is not None:
            try:
                image_path = os.path.relpath(line.image_ref, base_dir)
            except ValueError:
                pass
        kind, names = _writer_cells(line.writer)
        flags = ";".join(sorted(flag.value for flag in line.content_flags))
        rows.append([line.line_id, line.page_id, image_path, kind, names, flags, collections.get(line.page_id, "")])
    return rows


def manifest_checksum(m: DatasetManifest) -> str:
    """SHA-256 over line ids, pages, labels and flags; image locations and collections are left out."""
    digest = hashlib.sha256()
    for row in manifest_rows(m):
        digest.update(("\x1f".join(row[:2] + row[3:6]) + "\n").encode("utf-8"))
    return digest.hexdigest()


def write_manifest_csv(m: DatasetManifest, path: Path) -> Path:
    """Write the manifest; image paths are stored relative to the CSV's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(manifest_rows(m, base_dir=path.parent.resolve()))
    logger.info("manifest_written", path=str(path), lines=len(m.lines))
    return path


def read_manifest_csv(path: Path) -> DatasetManifest:
    """
    Load a manifest CSV written by write_manifest_csv.

    Page collections come back from the collection column; provenance records
    the file the manifest was read from.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base_dir = path.parent.resolve()
    lines = []
    collections: Dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ManifestError(f"unexpected manifest header {reader.fieldnames}")
        for row in reader:
            writer = None
            if row["writer_kind"]:
                try:
                    writer = WriterClass.from_names(row["writer_names"].split("|"))
                except ValueError as e:
                    raise ManifestError(f"bad writer on line {row['line_id']}: {e}", offenders=[row["line_id"]])
                if writer.kind.value != row["writer_kind"]:
                    raise ManifestError(f"writer kind mismatch on line {row['line_id']}", offenders=[row["line_id"]])
            image_ref = Path(row["image_path"])
            if not image_ref.is_absolute():
                image_ref = base_dir / image_ref
            if row["collection"]:
                collections[row["page_id"]] = row["collection"]
            lines.append(LineRecord(
                line_id=row["line_id"],
                page_id=row["page_id"],
                image_ref=str(image_ref),
                writer=writer,
                content_flags=_parse_flags(row["flags"]) or DEFAULT_FLAGS,
            ))
    try:
        return finalize_manifest(lines, provenance=f"csv:{path}", collections=collections)
    except ValueError as e:
        raise ManifestError(f"invalid manifest {path}: {e}")
