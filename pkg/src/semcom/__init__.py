"""Semantic communication simulator.

Learns the causal DAG behind observed data with a generative flow network,
grounds the learned state description in a fuzzy real-logic knowledge base,
transmits a compressed message over a noisy binary channel, and measures
semantic distortion, reliability and causal influence against a classical
transmit-everything baseline.
"""

from . import comm, gflownet, harness, kb, nn, worldmodel
from .estimators import SemanticCodec, StructureLearner

__version__ = "0.1.0"

__all__ = [
    "kb",
    "worldmodel",
    "nn",
    "gflownet",
    "comm",
    "harness",
    "StructureLearner",
    "SemanticCodec",
]
