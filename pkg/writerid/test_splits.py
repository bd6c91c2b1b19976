"""
Test Evaluation Splits
Validates line-level and page-disjoint protocols, split verification and the split file format.
"""

import random

import pytest

from writerid.core.data_model import LineRecord, WriterClass, finalize_manifest
from writerid.core.errors import DataError
from writerid.core.splits import (
    Protocol,
    Role,
    primary_writers,
    read_split_csv,
    role_counts,
    role_sizes,
    split_line_level,
    split_page_disjoint,
    verify_split,
    write_split_csv,
)


def corpus(pages_per_writer, lines_per_page=4):
    """Writer name → page count; every page written by that writer alone."""
    lines = []
    for name, pages in pages_per_writer.items():
        for p in range(pages):
            page_id = f"{name}_p{p}"
            for n in range(lines_per_page):
                lines.append(LineRecord(
                    line_id=f"{page_id}_l{n}",
                    page_id=page_id,
                    image_ref=f"{page_id}/{n}.png",
                    writer=WriterClass.parse(name),
                ))
    return finalize_manifest(lines)


def random_corpus(rng):
    writers = {f"w{i}": rng.randint(3, 8) for i in range(rng.randint(1, 6))}
    return corpus(writers, lines_per_page=rng.randint(1, 5))


class TestRoleCounts:
    """Test the per-class rounding rule."""

    def test_examples(self):
        assert role_counts(10) == (7, 1, 2)
        assert role_counts(3) == (1, 1, 1)
        assert role_counts(100) == (70, 15, 15)

    def test_every_role_nonempty(self):
        for n in range(3, 200):
            train, val, test = role_counts(n)
            assert train >= 1 and val >= 1 and test >= 1
            assert train + val + test == n


class TestLineLevelSplit:
    """Test Protocol A."""

    def setup_method(self):
        self.manifest = corpus({"Ameen": 3, "Botros": 2}, lines_per_page=5)

    def test_partition_and_counts(self):
        split = split_line_level(self.manifest, seed=0)
        assert split.protocol == Protocol.LINE_LEVEL
        assert set(split.assignment) == {line.line_id for line in self.manifest.lines}
        for cls in self.manifest.classes:
            ids = {line.line_id for line in self.manifest.lines if line.writer.key == cls.key}
            roles = [split.assignment[i] for i in ids]
            assert (roles.count(Role.TRAIN), roles.count(Role.VAL), roles.count(Role.TEST)) == role_counts(len(ids))
        assert verify_split(split, self.manifest).passed

    def test_deterministic_per_seed(self):
        assert split_line_level(self.manifest, 4) == split_line_level(self.manifest, 4)
        assert split_line_level(self.manifest, 4).assignment != split_line_level(self.manifest, 5).assignment

    def test_small_class_rejected(self):
        m = corpus({"Ameen": 2}, lines_per_page=1)
        with pytest.raises(DataError) as exc:
            split_line_level(m, 0)
        assert exc.value.offenders == ["Ameen"]


class TestPageDisjointSplit:
    """Test Protocol B."""

    def test_three_pages_one_per_role(self):
        m = corpus({"Ameen": 3})
        split = split_page_disjoint(m, seed=1)
        pages = {}
        for line in m.lines:
            pages.setdefault(line.page_id, set()).add(split.assignment[line.line_id])
        assert all(len(roles) == 1 for roles in pages.values())
        assert sorted(next(iter(r)).value for r in pages.values()) == ["test", "train", "val"]

    def test_class_with_two_pages_excluded(self):
        m = corpus({"Ameen": 3, "Botros": 2})
        split = split_page_disjoint(m, seed=0)
        assert [c.label for c in split.classes] == ["Ameen"]
        assert not any(i.startswith("Botros") for i in split.assignment)
        assert verify_split(split, m).passed

    def test_min_pages_is_monotone(self):
        """Raising min_pages never adds eligible classes."""
        m = corpus({"a": 3, "b": 4, "c": 5, "d": 6})
        previous = None
        for min_pages in range(3, 8):
            keys = {c.key for c in split_page_disjoint(m, 0, min_pages=min_pages).classes}
            if previous is not None:
                assert keys <= previous
            previous = keys
        assert previous == set()

    def test_min_pages_below_three_rejected(self):
        with pytest.raises(ValueError):
            split_page_disjoint(corpus({"a": 3}), 0, min_pages=2)

    def test_primary_writer_majority(self):
        lines = [
            LineRecord(line_id="x1", page_id="p", image_ref="p/1.png", writer=WriterClass.parse("Botros")),
            LineRecord(line_id="x2", page_id="p", image_ref="p/2.png", writer=WriterClass.parse("Ameen")),
            LineRecord(line_id="x3", page_id="p", image_ref="p/3.png", writer=WriterClass.parse("Botros")),
        ]
        assert primary_writers(finalize_manifest(lines)) == {"p": ("botros",)}


class TestVerifySplit:
    """Test structural verification."""

    def test_random_manifests_pass(self):
        rng = random.Random(0)
        for trial in range(100):
            m = random_corpus(rng)
            assert verify_split(split_line_level(m, trial), m).passed
            assert verify_split(split_page_disjoint(m, trial), m).passed

    def test_page_spanning_roles_detected(self):
        m = corpus({"Ameen": 4})
        split = split_page_disjoint(m, 0)
        line = next(line for line in m.lines if split.assignment[line.line_id] == Role.TRAIN)
        assignment = dict(split.assignment)
        assignment[line.line_id] = Role.TEST
        report = verify_split(split.model_copy(update={"assignment": assignment}), m)
        assert not report.passed
        assert not report.checks["page_atomicity"]
        assert any(f"page {line.page_id} spans roles" in o for o in report.offenders)

    def test_missing_role_detected(self):
        m = corpus({"Ameen": 1, "Botros": 1}, lines_per_page=10)
        split = split_line_level(m, 0)
        assignment = {
            i: Role.TRAIN if i.startswith("Ameen") and r == Role.TEST else r
            for i, r in split.assignment.items()
        }
        report = verify_split(split.model_copy(update={"assignment": assignment}), m)
        assert not report.checks["coverage"]
        assert "coverage: class Ameen missing from test" in report.offenders

    def test_unassigned_line_detected(self):
        m = corpus({"Ameen": 1}, lines_per_page=5)
        split = split_line_level(m, 0)
        assignment = dict(split.assignment)
        assignment.pop(m.lines[0].line_id)
        report = verify_split(split.model_copy(update={"assignment": assignment}), m)
        assert not report.checks["partition"]


class TestSplitCsv:
    """Test the split file format."""

    def setup_method(self):
        self.manifest = corpus({"Ameen": 3, "Botros": 3})

    def test_header_and_reload(self, tmp_path):
        split = split_page_disjoint(self.manifest, seed=9)
        path = write_split_csv(split, tmp_path / "split.csv")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# protocol=B seed=9 ratios=0.70/0.15/0.15 manifest_sha256=")
        assert lines[1] == "line_id,role"

        loaded = read_split_csv(path, self.manifest)
        assert loaded.assignment == split.assignment
        assert loaded.classes == split.classes
        assert role_sizes(loaded) == role_sizes(split)

    def test_other_manifest_rejected(self, tmp_path):
        path = write_split_csv(split_line_level(self.manifest, 0), tmp_path / "split.csv")
        other = corpus({"Ameen": 3, "Botros": 3, "Hanna": 3})
        with pytest.raises(DataError):
            read_split_csv(path, other)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "split.csv"
        path.write_text("line_id,role\nx,train\n")
        with pytest.raises(DataError):
            read_split_csv(path, self.manifest)
