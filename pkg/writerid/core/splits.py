"""
Evaluation splits.
Protocol A (line-level stratified) and Protocol B (page-disjoint) assignments,
structural verification and the split CSV format.
"""

import csv
import math
import re
import zlib
from collections import Counter, defaultdict
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from .data_model import DatasetManifest, WriterClass, manifest_checksum
from .errors import DataError

logger = structlog.get_logger()

RATIOS = (0.70, 0.15, 0.15)
_HEADER = re.compile(r"#\s*protocol=(?P<protocol>[AB])\s+seed=(?P<seed>-?\d+)\s+ratios=(?P<ratios>\S+)\s+manifest_sha256=(?P<sha>\S*)")


class Protocol(str, Enum):
    LINE_LEVEL = "A"
    PAGE_DISJOINT = "B"


class Role(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


ROLES = (Role.TRAIN, Role.VAL, Role.TEST)


class SplitAssignment(BaseModel):
    """Role of every included line, plus the class list the label indices refer to."""

    model_config = ConfigDict(frozen=True)

    protocol: Protocol
    seed: int
    assignment: Dict[str, Role]
    ratios: Tuple[float, float, float] = RATIOS
    classes: Tuple[WriterClass, ...] = ()
    manifest_sha256: str = ""

    def line_ids(self, role: Role) -> List[str]:
        """Line ids of one role, in manifest order."""
        return [line_id for line_id, r in self.assignment.items() if r == role]

    def class_index(self) -> Dict[Tuple[str, ...], int]:
        """Writer key → label index (position in the split's class list)."""
        return {c.key: i for i, c in enumerate(self.classes)}

    @property
    def num_classes(self) -> int:
        return len(self.classes)


class VerificationReport(BaseModel):
    """Outcome of verify_split."""
    passed: bool = True
    checks: Dict[str, bool] = Field(default_factory=dict)
    offenders: List[str] = Field(default_factory=list)

    def fail(self, check: str, offender: str) -> None:
        self.passed = False
        self.checks[check] = False
        self.offenders.append(f"{check}: {offender}")


def role_counts(n: int) -> Tuple[int, int, int]:
    """Per-class (train, val, test) item counts for n ≥ 3 items."""
    val = max(1, math.floor(RATIOS[1] * n))
    test = max(1, math.floor(RATIOS[2] * n + 0.5))
    return n - val - test, val, test


def _class_rng(seed: int, key: Tuple[str, ...]) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32("|".join(key).encode("utf-8"))])


def _cut(items: Sequence[str], seed: int, key: Tuple[str, ...]) -> Dict[str, Role]:
    order = _class_rng(seed, key).permutation(len(items))
    shuffled = [items[i] for i in order]
    n_train, n_val, _ = role_counts(len(items))
    roles = {}
    for i, item in enumerate(shuffled):
        roles[item] = Role.TRAIN if i < n_train else Role.VAL if i < n_train + n_val else Role.TEST
    return roles


def _finish(m: DatasetManifest, protocol: Protocol, seed: int, roles: Dict[str, Role]) -> SplitAssignment:
    assignment = {line.line_id: roles[line.line_id] for line in m.lines if line.line_id in roles}
    keys = {line.writer.key for line in m.lines if line.line_id in assignment}
    classes = tuple(c for c in m.classes if c.key in keys)
    return SplitAssignment(
        protocol=protocol,
        seed=seed,
        assignment=assignment,
        classes=classes,
        manifest_sha256=manifest_checksum(m),
    )


def split_line_level(m: DatasetManifest, seed: int) -> SplitAssignment:
    """Protocol A: per-class stratified 70/15/15 partition of lines."""
    by_class: Dict[Tuple[str, ...], List[str]] = defaultdict(list)
    for line in m.lines:
        if line.writer is not None:
            by_class[line.writer.key].append(line.line_id)

    too_small = [c.label for c in m.classes if 0 < len(by_class[c.key]) < 3]
    if too_small:
        raise DataError(f"classes with fewer than 3 lines: {', '.join(too_small)}", offenders=too_small)

    roles: Dict[str, Role] = {}
    for cls in m.classes:
        if by_class[cls.key]:
            roles.update(_cut(by_class[cls.key], seed, cls.key))

    split = _finish(m, Protocol.LINE_LEVEL, seed, roles)
    logger.info("split_built", protocol="A", seed=seed, classes=split.num_classes, lines=len(split.assignment))
    return split


def primary_writers(m: DatasetManifest) -> Dict[str, Tuple[str, ...]]:
    """Page id → key of the writer holding most of its labeled lines (ties to the smallest key)."""
    primary = {}
    for page_id, lines in m.lines_by_page().items():
        counts = Counter(line.writer.key for line in lines if line.writer is not None)
        if counts:
            primary[page_id] = min(counts, key=lambda k: (-counts[k], k))
    return primary


def split_page_disjoint(m: DatasetManifest, seed: int, min_pages: int = 3) -> SplitAssignment:
    """Protocol B: pages are indivisible; classes with fewer than min_pages pages are excluded."""
    if min_pages < 3:
        raise ValueError(f"min_pages must be at least 3, got {min_pages}")

    primary = primary_writers(m)
    pages_of: Dict[Tuple[str, ...], List[str]] = defaultdict(list)
    for page_id in sorted(primary):
        pages_of[primary[page_id]].append(page_id)

    eligible = set()
    page_roles: Dict[str, Role] = {}
    for cls in m.classes:
        pages = pages_of.get(cls.key, [])
        if len(pages) < min_pages:
            logger.info("class_excluded", protocol="B", writer=cls.label, pages=len(pages), min_pages=min_pages)
            continue
        eligible.add(cls.key)
        page_roles.update(_cut(pages, seed, cls.key))

    roles = {
        line.line_id: page_roles[line.page_id]
        for line in m.lines
        if line.writer is not None and line.writer.key in eligible and line.page_id in page_roles
    }
    split = _finish(m, Protocol.PAGE_DISJOINT, seed, roles)
    logger.info(
        "split_built",
        protocol="B",
        seed=seed,
        classes=split.num_classes,
        excluded_classes=m.num_classes - split.num_classes,
        lines=len(split.assignment),
        pages=len({line.page_id for line in m.lines if line.line_id in split.assignment}),
    )
    return split


def _within_ratio(actual: int, n: int, ratio: float, rule: int) -> bool:
    exact = ratio * n
    return abs(actual - exact) <= max(1.0, abs(rule - exact)) + 1e-9


def verify_split(s: SplitAssignment, m: DatasetManifest) -> VerificationReport:
    """Check partition exactness, page atomicity, closed-set coverage and per-class ratios."""
    report = VerificationReport(checks={"partition": True, "page_atomicity": True, "coverage": True, "ratios": True})
    by_id = {line.line_id: line for line in m.lines}
    split_keys = {c.key for c in s.classes}

    for line_id in s.assignment:
        line = by_id.get(line_id)
        if line is None:
            report.fail("partition", f"unknown line {line_id}")
        elif line.writer is None or line.writer.key not in split_keys:
            report.fail("partition", f"line {line_id} has no class in the split")

    assigned_pages = {by_id[i].page_id for i in s.assignment if i in by_id}
    for line in m.lines:
        if line.writer is None or line.writer.key not in split_keys or line.line_id in s.assignment:
            continue
        if s.protocol == Protocol.LINE_LEVEL or line.page_id in assigned_pages:
            report.fail("partition", f"line {line.line_id} is not assigned")

    page_roles: Dict[str, set] = defaultdict(set)
    for line_id, role in s.assignment.items():
        if line_id in by_id:
            page_roles[by_id[line_id].page_id].add(role)
    if s.protocol == Protocol.PAGE_DISJOINT:
        for page_id in sorted(page_roles):
            if len(page_roles[page_id]) > 1:
                roles = ",".join(sorted(r.value for r in page_roles[page_id]))
                report.fail("page_atomicity", f"page {page_id} spans roles {roles}")

    present: Dict[Tuple[str, ...], set] = defaultdict(set)
    for line_id, role in s.assignment.items():
        line = by_id.get(line_id)
        if line is not None and line.writer is not None:
            present[line.writer.key].add(role)
    for cls in s.classes:
        for role in ROLES:
            if role not in present[cls.key]:
                report.fail("coverage", f"class {cls.label} missing from {role.value}")

    items: Dict[Tuple[str, ...], List[Role]] = defaultdict(list)
    if s.protocol == Protocol.LINE_LEVEL:
        for line_id, role in s.assignment.items():
            line = by_id.get(line_id)
            if line is not None and line.writer is not None:
                items[line.writer.key].append(role)
    else:
        for page_id, writer_key in primary_writers(m).items():
            if len(page_roles.get(page_id, ())) == 1:
                items[writer_key].append(next(iter(page_roles[page_id])))
    for cls in s.classes:
        n = len(items[cls.key])
        if n < 3:
            continue
        counts = Counter(items[cls.key])
        for role, ratio, rule in zip(ROLES, s.ratios, role_counts(n)):
            if not _within_ratio(counts[role], n, ratio, rule):
                report.fail("ratios", f"class {cls.label} has {counts[role]} of {n} in {role.value}")

    logger.info("split_verified", protocol=s.protocol.value, passed=report.passed, offenders=len(report.offenders))
    return report


def _ratios_text(ratios: Sequence[float]) -> str:
    return "/".join(f"{r:.2f}" for r in ratios)


def write_split_csv(s: SplitAssignment, path: Path) -> Path:
    """Write `line_id,role` rows under a header comment carrying protocol, seed, ratios and checksum."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(
            f"# protocol={s.protocol.value} seed={s.seed} "
            f"ratios={_ratios_text(s.ratios)} manifest_sha256={s.manifest_sha256}\n"
        )
        writer = csv.writer(f)
        writer.writerow(["line_id", "role"])
        for line_id, role in s.assignment.items():
            writer.writerow([line_id, role.value])
    return path


def read_split_csv(path: Path, m: DatasetManifest, check_checksum: bool = True) -> SplitAssignment:
    """Load a split written by write_split_csv against the manifest it was built from."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        header = _HEADER.match(f.readline().strip())
        if header is None:
            raise DataError(f"split file {path} lacks the protocol header line")
        rows = list(csv.DictReader(f))

    checksum = header.group("sha")
    if check_checksum and checksum and checksum != manifest_checksum(m):
        raise DataError(f"split {path} was built from a different manifest")

    roles: Dict[str, Role] = {}
    for row in rows:
        try:
            roles[row["line_id"]] = Role(row["role"])
        except (KeyError, ValueError):
            raise DataError(f"bad split row in {path}: {row}")
    known = {line.line_id for line in m.lines}
    unknown = [line_id for line_id in roles if line_id not in known]
    if unknown:
        raise DataError(f"split references {len(unknown)} unknown lines", offenders=unknown)

    ratios = tuple(float(r) for r in header.group("ratios").split("/"))
    split = _finish(m, Protocol(header.group("protocol")), int(header.group("seed")), roles)
    return split.model_copy(update={"ratios": ratios, "manifest_sha256": checksum or split.manifest_sha256})


def role_sizes(s: SplitAssignment) -> Dict[str, int]:
    counts = Counter(role.value for role in s.assignment.values())
    return {role.value: counts.get(role.value, 0) for role in ROLES}


def class_line_counts(s: SplitAssignment, m: DatasetManifest, role: Optional[Role] = None) -> Dict[str, int]:
    """Assigned lines per class label, optionally restricted to one role."""
    counts = {c.label: 0 for c in s.classes}
    for line in m.lines:
        r = s.assignment.get(line.line_id)
        if r is not None and (role is None or r == role):
            counts[line.writer.label] += 1
    return counts
