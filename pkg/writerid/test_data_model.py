"""
Test Dataset Catalog
Validates writer classes, manifest finalization, filtering, statistics and the manifest CSV format.
"""

import math

import numpy as np
import pytest
from PIL import Image

from writerid.core.data_model import (
    ContentFlag,
    DatasetManifest,
    DropReason,
    LineRecord,
    WriterClass,
    WriterKind,
    build_manifest,
    filter_manifest,
    filter_manifest_with_report,
    finalize_manifest,
    manifest_checksum,
    manifest_stats,
    read_manifest_csv,
    write_manifest_csv,
)
from writerid.core.errors import ManifestError

HW = frozenset({ContentFlag.HANDWRITTEN})


def line(line_id, page_id, writer=None, flags=HW):
    return LineRecord(
        line_id=line_id,
        page_id=page_id,
        image_ref=f"/data/{page_id}/{line_id}.png",
        writer=WriterClass.parse(writer) if writer else None,
        content_flags=frozenset(flags),
    )


def save_image(path, value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((8, 24, 3), value, dtype=np.uint8)).save(path)


class TestWriterClass:
    """Test canonical writer labels."""

    def test_single_writer(self):
        """A plain name is a single-writer class."""
        cls = WriterClass.parse("  Botros  Hassan ")
        assert cls.kind == WriterKind.SINGLE
        assert cls.names == ("Botros Hassan",)
        assert cls.key == ("botros hassan",)

    def test_composite_pair_is_canonically_ordered(self):
        """Pair members are sorted by normalized name whatever the input order."""
        first = WriterClass.parse("Zeta Writer & alpha writer")
        second = WriterClass.parse("Alpha Writer|zeta writer")
        assert first.kind == WriterKind.COMPOSITE
        assert first.names == ("alpha writer", "Zeta Writer")
        assert first.key == second.key

    def test_pair_of_one_person_collapses(self):
        """A pair naming the same writer twice is a single-writer class."""
        cls = WriterClass.parse("Hanna & HANNA")
        assert cls.kind == WriterKind.SINGLE

    def test_empty_cell_is_unlabeled(self):
        assert WriterClass.parse("") is None
        assert WriterClass.parse("   ") is None

    def test_non_canonical_construction_rejected(self):
        with pytest.raises(ValueError):
            WriterClass(kind=WriterKind.COMPOSITE, names=("b", "a"))
        with pytest.raises(ValueError):
            WriterClass(kind=WriterKind.SINGLE, names=("a", "b"))


class TestFinalizeManifest:
    """Test class densification and page records."""

    def test_classes_are_dense_and_sorted(self):
        """Class ids are 0..n-1 in key order and stamped on every line."""
        m = finalize_manifest([
            line("l3", "p2", "Youssef"),
            line("l1", "p1", "Botros"),
            line("l2", "p1", "Botros & Youssef"),
        ])
        assert [c.label for c in m.classes] == ["Botros", "Botros & Youssef", "Youssef"]
        assert [c.class_id for c in m.classes] == [0, 1, 2]
        assert [r.line_id for r in m.lines] == ["l1", "l2", "l3"]
        assert m.line("l3").writer.class_id == 2

    def test_page_writer_is_common_writer(self):
        """A page has a writer only when all of its lines agree."""
        m = finalize_manifest([
            line("a1", "pa", "Botros"),
            line("a2", "pa", "Botros"),
            line("b1", "pb", "Botros"),
            line("b2", "pb", "Youssef"),
        ])
        pages = {p.page_id: p for p in m.pages}
        assert pages["pa"].writer.label == "Botros"
        assert pages["pb"].writer is None
        assert pages["pa"].line_ids == ("a1", "a2")

    def test_duplicate_line_ids_rejected(self):
        with pytest.raises(ValueError):
            finalize_manifest([line("x", "p1", "A"), line("x", "p2", "A")])

    def test_unfinalized_writer_rejected(self):
        """A manifest cannot reference a writer outside its class list."""
        with pytest.raises(ValueError):
            DatasetManifest(lines=(line("x", "p1", "A"),), pages=(), classes=())

    def test_empty_manifest(self):
        m = finalize_manifest([])
        assert m.num_classes == 0
        assert m.lines == ()


class TestFilterManifest:
    """Test training-ready filtering and its drop accounting."""

    def setup_method(self):
        self.manifest = finalize_manifest([
            line("keep", "p1", "Botros"),
            line("nolabel", "p1"),
            line("stamped", "p1", "Botros", {ContentFlag.HANDWRITTEN, ContentFlag.STAMP}),
            line("typed", "p2", "Hanna", {ContentFlag.TYPEWRITTEN}),
            line("printonly", "p2", "Youssef", {ContentFlag.OTTOMAN_SCRIPT}),
            line("ottoman", "p2", "Youssef", {ContentFlag.HANDWRITTEN, ContentFlag.OTTOMAN_SCRIPT}),
        ])

    def test_drop_reasons_partition_dropped_lines(self):
        """Each dropped line has exactly one reason, checked in the documented order."""
        filtered, report = filter_manifest_with_report(self.manifest)
        assert [r.line_id for r in filtered.lines] == ["keep", "ottoman"]
        assert report.kept == 2
        assert report.dropped[DropReason.UNLABELED] == ["nolabel"]
        assert sorted(report.dropped[DropReason.EXCLUDED_CONTENT]) == ["stamped", "typed"]
        assert report.dropped[DropReason.NOT_HANDWRITTEN] == ["printonly"]
        assert report.total_dropped + report.kept == len(self.manifest.lines)

    def test_classes_redensified(self):
        """Writers without surviving lines disappear from the class list."""
        filtered = filter_manifest(self.manifest)
        assert [c.label for c in filtered.classes] == ["Botros", "Youssef"]
        assert [c.class_id for c in filtered.classes] == [0, 1]

    def test_ottoman_switch(self):
        filtered = filter_manifest(self.manifest, exclude_ottoman=True)
        assert [r.line_id for r in filtered.lines] == ["keep"]
        assert filtered.num_classes == 1

    def test_filter_is_idempotent(self):
        """Filtering an already filtered manifest changes nothing."""
        once = filter_manifest(self.manifest, exclude_ottoman=True)
        twice = filter_manifest(once, exclude_ottoman=True)
        assert twice == once
        assert manifest_checksum(filter_manifest(filter_manifest(self.manifest))) == manifest_checksum(
            filter_manifest(self.manifest)
        )


class TestManifestStats:
    """Test per-writer count summaries."""

    def test_population_statistics(self):
        """Lines per writer {3, 1} give mean 2 and population std 1."""
        m = finalize_manifest([
            line("a1", "p1", "A"),
            line("a2", "p1", "A"),
            line("a3", "p2", "A"),
            line("b1", "p3", "B"),
            line("u1", "p3"),
        ])
        stats = manifest_stats(m)
        assert stats.total_lines == 5
        assert stats.labeled_lines == 4
        assert stats.num_classes == 2
        assert stats.lines_per_writer.maximum == 3
        assert stats.lines_per_writer.minimum == 1
        assert stats.lines_per_writer.mean == pytest.approx(2.0)
        assert stats.lines_per_writer.std == pytest.approx(1.0)
        assert [w.pages for w in stats.per_writer] == [2, 1]
        assert stats.pages_per_writer.std == pytest.approx(0.5)

    def test_empty(self):
        stats = manifest_stats(finalize_manifest([]))
        assert stats.lines_per_writer.mean == 0.0
        assert not math.isnan(stats.pages_per_writer.std)


class TestBuildManifest:
    """Test ingestion of a dataset root and label table."""

    def setup_method(self):
        self.labels_header = "page_id,line_id,writer,flags,collection\n"

    def test_page_defaults_and_line_overrides(self, tmp_path):
        """Page rows label every line; line rows override writer and flags."""
        root = tmp_path / "corpus"
        for page, lines in {"p1": ["p1_l1", "p1_l2"], "p2": ["p2_l1"]}.items():
            for line_id in lines:
                save_image(root / page / f"{line_id}.png")
        labels = tmp_path / "labels.csv"
        labels.write_text(
            self.labels_header
            + "p1,,Botros Hassan,handwritten,Archive A\n"
            + "p1,p1_l2,Botros Hassan & Youssef,handwritten;stamp,\n"
        )
        m = build_manifest(root, labels)
        assert len(m.lines) == 3
        assert m.line("p1_l1").writer.label == "Botros Hassan"
        assert m.line("p1_l2").writer.kind == WriterKind.COMPOSITE
        assert ContentFlag.STAMP in m.line("p1_l2").content_flags
        assert m.line("p2_l1").writer is None
        assert m.line("p2_l1").content_flags == HW
        assert {p.page_id: p.collection for p in m.pages}["p1"] == "Archive A"

    def test_missing_image_lists_offenders(self, tmp_path):
        root = tmp_path / "corpus"
        save_image(root / "p1" / "p1_l1.png")
        labels = tmp_path / "labels.csv"
        labels.write_text(self.labels_header + "p1,p1_l9,A,,\np7,,B,,\n")
        with pytest.raises(ManifestError) as exc:
            build_manifest(root, labels)
        assert exc.value.offenders == ["p1/p1_l9", "p7/"]

    def test_duplicate_line_ids_across_pages(self, tmp_path):
        root = tmp_path / "corpus"
        save_image(root / "p1" / "same.png")
        save_image(root / "p2" / "same.png")
        labels = tmp_path / "labels.csv"
        labels.write_text(self.labels_header)
        with pytest.raises(ManifestError):
            build_manifest(root, labels)

    def test_bad_writer_cell_is_a_manifest_error(self, tmp_path):
        """A cell naming three writers is rejected with the offending line."""
        root = tmp_path / "corpus"
        save_image(root / "p1" / "p1_l1.png")
        labels = tmp_path / "labels.csv"
        labels.write_text(self.labels_header + "p1,,A & B & C,,\n")
        with pytest.raises(ManifestError) as exc:
            build_manifest(root, labels)
        assert exc.value.offenders == ["p1/p1_l1"]
        assert exc.value.exit_code == 3


class TestManifestCsv:
    """Test the manifest file format."""

    def test_write_then_read_preserves_content(self, tmp_path):
        """Reading a written manifest gives the same classes, flags and checksum."""
        m = finalize_manifest([
            line("l1", "p1", "Botros & Youssef", {ContentFlag.HANDWRITTEN, ContentFlag.MIXED_SCRIPT}),
            line("l2", "p1", "Hanna"),
            line("l3", "p2"),
        ])
        path = write_manifest_csv(m, tmp_path / "out" / "manifest.csv")
        header = path.read_text().splitlines()[0]
        assert header == "line_id,page_id,image_path,writer_kind,writer_names,flags,collection"

        loaded = read_manifest_csv(path)
        assert [c.key for c in loaded.classes] == [c.key for c in m.classes]
        assert loaded.line("l1").content_flags == m.line("l1").content_flags
        assert manifest_checksum(loaded) == manifest_checksum(m)

    def test_checksum_tracks_labels(self):
        a = finalize_manifest([line("l1", "p1", "A")])
        b = finalize_manifest([line("l1", "p1", "B")])
        assert manifest_checksum(a) != manifest_checksum(b)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,page\nx,y\n")
        with pytest.raises(ManifestError):
            read_manifest_csv(path)

    def test_collections_survive_round_trip(self, tmp_path):
        m = finalize_manifest([line("l1", "p1", "A"), line("l2", "p2", "B")], collections={"p1": "Archive A"})
        loaded = read_manifest_csv(write_manifest_csv(m, tmp_path / "manifest.csv"))
        assert {p.page_id: p.collection for p in loaded.pages} == {"p1": "Archive A", "p2": ""}

    def test_empty_flags_mean_handwritten(self, tmp_path):
        """Both loaders treat a line without flags as handwritten, so filtering keeps it."""
        assert line("l1", "p1", "A", flags=()).content_flags == HW
        path = tmp_path / "manifest.csv"
        path.write_text("line_id,page_id,image_path,writer_kind,writer_names,flags,collection\n"
                        "l1,p1,p1/l1.png,single,Hanna,,\n")
        loaded = read_manifest_csv(path)
        assert loaded.line("l1").content_flags == HW
        assert len(filter_manifest(loaded).lines) == 1

    def test_bad_writer_row_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("line_id,page_id,image_path,writer_kind,writer_names,flags,collection\n"
                        "l1,p1,p1/l1.png,composite-pair,A|B|C,handwritten,\n")
        with pytest.raises(ManifestError) as exc:
            read_manifest_csv(path)
        assert exc.value.offenders == ["l1"]
