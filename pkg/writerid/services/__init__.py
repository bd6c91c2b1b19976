"""
Training, evaluation, synthetic corpus and report services.
"""

from .evaluation import PredictionSet, RunReport, AggregateReport, evaluate_predictions, aggregate_runs
from .trainer import FinetuneMode, FinetunePolicy, TrainConfig, RunState, train_run, train_seeds
from .synth_corpus import SynthSpec, generate
from .report_renderer import RunReportRenderer

__all__ = [
    'PredictionSet',
    'RunReport',
    'AggregateReport',
    'evaluate_predictions',
    'aggregate_runs',
    'FinetuneMode',
    'FinetunePolicy',
    'TrainConfig',
    'RunState',
    'train_run',
    'train_seeds',
    'SynthSpec',
    'generate',
    'RunReportRenderer',
]
