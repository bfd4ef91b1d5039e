"""Conformer acoustic model with speaker-adaptive training at desk scale."""

from .conformer import (BlockTapPoint, ConformerAM, BlstmAM, ModelConfig, build_model,
                        count_parameters, load_checkpoint, load_model, save_checkpoint)
from .data import Corpus, SpecAugmentConfig, Utterance, gen_corpus, load_corpus, save_corpus
from .integration import IntegrationSpec
from .tensor import Tensor, grad_check
from .training import TrainConfig, ablate, evaluate, sat_finetune, train

__all__ = [
    "BlockTapPoint", "BlstmAM", "ConformerAM", "Corpus", "IntegrationSpec",
    "ModelConfig", "SpecAugmentConfig", "Tensor", "TrainConfig", "Utterance",
    "ablate", "build_model", "count_parameters", "evaluate", "gen_corpus",
    "grad_check", "load_checkpoint", "load_corpus", "load_model", "sat_finetune",
    "save_checkpoint", "save_corpus", "train",
]
