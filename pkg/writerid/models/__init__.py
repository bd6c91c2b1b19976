"""
Differentiable writer identification pipeline.
"""

from .backbones import BackboneName, BackboneAdapter, build_backbone
from .pipeline import ModelConfig, WriterIdentifier, build_model, save_checkpoint, load_checkpoint, load_weights
from .layers import FeatureMap, Stage, VladDescriptor, cross_entropy

__all__ = [
    'BackboneName',
    'BackboneAdapter',
    'build_backbone',
    'ModelConfig',
    'WriterIdentifier',
    'build_model',
    'save_checkpoint',
    'load_checkpoint',
    'load_weights',
    'FeatureMap',
    'Stage',
    'VladDescriptor',
    'cross_entropy',
]
