"""Desk-scale two-stage training: joint understanding tasks, then conditional flow matching."""

from .ablation import SCHEDULES, AblationReport, k_sensitivity, run_ablation, toy_forge_config
from .estimators import FlowSynthesizer, UnderstandingClassifier
from .model import ModelShape, SynergyModel
from .store import SliceStore
from .toycorpus import ToyCorpus, ToyCorpusConfig, gen_toy_corpus, write_toy_corpus
from .train import TrainConfig, synthesize, train_stage1, train_stage2

__all__ = [
    "SCHEDULES",
    "AblationReport",
    "FlowSynthesizer",
    "ModelShape",
    "SliceStore",
    "SynergyModel",
    "ToyCorpus",
    "ToyCorpusConfig",
    "TrainConfig",
    "UnderstandingClassifier",
    "gen_toy_corpus",
    "k_sensitivity",
    "run_ablation",
    "synthesize",
    "toy_forge_config",
    "train_stage1",
    "train_stage2",
    "write_toy_corpus",
]
