"""
Writer-name curation.
Edit-distance similarity, duplicate-identity candidates and label merging.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import numpy as np
import structlog
from rapidfuzz import process
from rapidfuzz.distance import Levenshtein

from .data_model import DatasetManifest, LineRecord, WriterClass, finalize_manifest
from .errors import DataError
from .names import collapse_whitespace, normalize_name

logger = structlog.get_logger()

THRESHOLD_RANGE = (85, 95)


@dataclass(frozen=True, order=True)
class DuplicateCandidate:
    """A pair of names similar enough to need manual review."""
    name_a: str
    name_b: str
    score: int
    threshold_used: int


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    return Levenshtein.distance(a, b)


def _score(distance: int, longest: int) -> int:
    if longest == 0:
        return 100
    if distance == 0:
        return 100
    value = math.floor(100 * (1 - distance / longest) + 0.5)
    return min(value, 99)


def similarity(a: str, b: str) -> int:
    """Max-length-normalized Levenshtein similarity of the normalized names, 0..100."""
    a_norm, b_norm = normalize_name(a), normalize_name(b)
    return _score(edit_distance(a_norm, b_norm), max(len(a_norm), len(b_norm)))


def find_duplicate_candidates(names: Sequence[str], threshold: int) -> List[DuplicateCandidate]:
    """
    All unordered name pairs scoring at least `threshold`.

    Names that normalize identically are compared once. Results are sorted by
    descending score, then by the pair itself.
    """
    low, high = THRESHOLD_RANGE
    if not low <= threshold <= high:
        raise ValueError(f"threshold must be within [{low}, {high}], got {threshold}")
    if not names:
        raise ValueError("names must be non-empty")

    display: Dict[str, str] = {}
    for name in names:
        display.setdefault(normalize_name(name), collapse_whitespace(name))
    keys = sorted(display)
    if len(keys) < 2:
        return []

    distances = process.cdist(keys, keys, scorer=Levenshtein.distance, dtype=np.int32, workers=-1)
    candidates = []
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            score = _score(int(distances[i, j]), max(len(keys[i]), len(keys[j])))
            if score >= threshold:
                candidates.append(DuplicateCandidate(display[keys[i]], display[keys[j]], score, threshold))

    candidates.sort(key=lambda c: (-c.score, normalize_name(c.name_a), normalize_name(c.name_b)))
    logger.info("duplicate_candidates_found", names=len(keys), threshold=threshold, candidates=len(candidates))
    return candidates


def _resolve_mapping(mapping: Mapping[str, str]) -> Dict[str, str]:
    """Normalized source → display target, chains followed to their end."""
    edges: Dict[str, str] = {}
    targets: Dict[str, str] = {}
    for source, target in mapping.items():
        src, dst = normalize_name(source), normalize_name(target)
        if not src or not dst:
            raise ValueError(f"empty name in merge mapping: {source!r} -> {target!r}")
        if src == dst:
            continue
        edges[src] = dst
        targets.setdefault(dst, collapse_whitespace(target))

    resolved: Dict[str, str] = {}
    for start in edges:
        seen = [start]
        node = edges[start]
        while node in edges:
            if node in seen:
                raise ValueError(f"merge mapping contains a cycle: {' -> '.join(seen + [node])}")
            seen.append(node)
            node = edges[node]
        resolved[start] = targets[node]
    return resolved


def merge_labels(m: DatasetManifest, mapping: Mapping[str, str]) -> DatasetManifest:
    """Rewrite writer names through `mapping` and re-densify the class list."""
    resolved = _resolve_mapping(mapping)
    if not resolved:
        return m

    rewrites: Dict[tuple, WriterClass] = {}
    for cls in m.classes:
        if not any(k in resolved for k in cls.key):
            continue
        names = [resolved.get(normalize_name(n), n) for n in cls.names]
        rewrites[cls.key] = WriterClass.from_names(names)

    lines: List[LineRecord] = []
    moved: Dict[tuple, int] = {}
    for line in m.lines:
        if line.writer is not None and line.writer.key in rewrites:
            lines.append(line.model_copy(update={"writer": rewrites[line.writer.key]}))
            moved[line.writer.key] = moved.get(line.writer.key, 0) + 1
        else:
            lines.append(line)

    for cls in m.classes:
        if cls.key in rewrites:
            logger.info(
                "writer_label_merged",
                source=cls.label,
                target=rewrites[cls.key].label,
                lines=moved.get(cls.key, 0),
            )

    collections = {p.page_id: p.collection for p in m.pages}
    merged = finalize_manifest(lines, provenance=m.provenance, collections=collections)
    logger.info("labels_merged", classes_before=m.num_classes, classes_after=merged.num_classes)
    return merged


def read_merge_mapping(path: Path) -> Dict[str, str]:
    """Read a two-column `source,target` CSV. A header row naming those columns is optional."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"merge mapping not found: {path}")
    mapping: Dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if len(row) < 2 or not row[0].strip():
                continue
            if row[0].strip().lower() == "source" and row[1].strip().lower() == "target":
                continue
            mapping[row[0].strip()] = row[1].strip()
    return mapping


def write_candidates_csv(candidates: Sequence[DuplicateCandidate], path: Path) -> Path:
    """Candidate list for manual review."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["name_a", "name_b", "score", "threshold"])
        for c in candidates:
            writer.writerow([c.name_a, c.name_b, c.score, c.threshold_used])
    return path
