"""
Test Desk-Scale Experiments
End-to-end learning on synthetic corpora and public corpus counts. Slow; runs only with WID_RUN_SLOW=1.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from writerid.config import settings
from writerid.core.data_model import build_manifest, filter_manifest
from writerid.core.splits import split_line_level, split_page_disjoint, verify_split
from writerid.models.backbones import BackboneName
from writerid.models.pipeline import ModelConfig
from writerid.services.synth_corpus import SynthSpec, generate
from writerid.services.trainer import FinetunePolicy, TrainConfig, train_run

slow = pytest.mark.skipif(os.environ.get("WID_RUN_SLOW") != "1", reason="set WID_RUN_SLOW=1 to run experiments")

MODEL = ModelConfig(backbone=BackboneName.TINY_TEST, attention=True)
TRAIN = TrainConfig(batch_size=32, max_epochs=50, finetune=FinetunePolicy.from_name("full"))


def top1(manifest, split, seed, run_dir):
    assert verify_split(split, manifest).passed
    return train_run(manifest, split, MODEL, TRAIN, seed, run_dir).report.top1


@slow
class TestDeskScaleLearning:
    """Train the tiny model on 10 writers × 6 pages × 10 lines."""

    def test_line_level_accuracy(self, tmp_path):
        _, manifest = generate(SynthSpec(nuisance_level=0.5, seed=0), tmp_path / "corpus")
        accuracy = top1(manifest, split_line_level(manifest, seed=0), 0, tmp_path / "run")
        assert accuracy >= 0.90

    def test_page_disjoint_gap(self, tmp_path):
        """Unseen pages are harder than unseen lines of seen pages when page nuisance is strong."""
        _, manifest = generate(SynthSpec(nuisance_level=1.0, seed=0), tmp_path / "corpus")
        line_level, page_disjoint = [], []
        for seed in (0, 1, 2):
            line_level.append(top1(manifest, split_line_level(manifest, seed), seed, tmp_path / f"a{seed}"))
            page_disjoint.append(top1(manifest, split_page_disjoint(manifest, seed), seed, tmp_path / f"b{seed}"))
        assert np.mean(line_level) - np.mean(page_disjoint) >= 0.05

    def test_gap_grows_with_nuisance(self, tmp_path):
        """Stronger page nuisance widens the line-level over page-disjoint gap."""
        gaps = []
        for level in (0.0, 0.5, 1.0):
            _, manifest = generate(SynthSpec(nuisance_level=level, seed=0), tmp_path / f"corpus{level}")
            line_level = top1(manifest, split_line_level(manifest, seed=0), 0, tmp_path / f"a{level}")
            page_disjoint = top1(manifest, split_page_disjoint(manifest, seed=0), 0, tmp_path / f"b{level}")
            gaps.append(line_level - page_disjoint)
        assert gaps == sorted(gaps)

    def test_validation_f1_within_30_epochs(self, tmp_path):
        _, manifest = generate(SynthSpec(seed=0), tmp_path / "corpus")
        assert manifest.num_classes == 10
        train = TrainConfig(batch_size=32, max_epochs=30, finetune=FinetunePolicy.from_name("full"))
        model = ModelConfig(backbone=BackboneName.TINY_TEST, attention=False)
        run = train_run(manifest, split_line_level(manifest, seed=0), model, train, 0, tmp_path / "run")
        assert run.epochs_run <= 30
        assert run.best_val_f1 >= 0.95


def public_labels():
    root = settings.data_root
    return Path(root) / "labels.csv" if root and (Path(root) / "labels.csv").exists() else None


@slow
@pytest.mark.skipif(public_labels() is None, reason="public corpus not found under WID_DATA_ROOT")
class TestPublicCorpus:
    """Filtered counts of the public manuscript corpus."""

    def test_filtered_counts(self):
        manifest = filter_manifest(build_manifest(settings.data_root, public_labels()))
        assert len(manifest.lines) == 18987
        assert manifest.num_classes == 179

        split = split_page_disjoint(manifest, seed=0)
        assert split.num_classes == 71
        assert len(split.assignment) == 16456
