"""Standard desk-scale experiment settings.

One place for the corpus, model, and schedule sizes that the acceptance
suite, the scripts, and the CLI defaults all share. Small enough to train on
a laptop core in seconds-to-minutes, large enough that the speaker-shift
structure is learnable.
"""

from __future__ import annotations

from .conformer import ModelConfig
from .data import Corpus, SpecAugmentConfig, gen_corpus
from .training import TrainConfig

EMBEDDING_DIM = 64
UBM_COMPONENTS = 8


def desk_corpus(seed: int = 0, n_speakers: int = 20, utts_per_speaker: int = 30,
                shift_std: float = 1.0) -> Corpus:
    return gen_corpus(n_speakers=n_speakers, utts_per_speaker=utts_per_speaker,
                      frames_range=(30, 50), feature_dim=16, n_classes=6,
                      speaker_shift_std=shift_std, noise_std=0.5, class_scale=0.5,
                      seed=seed)


def desk_model_config(feature_dim: int = 16, n_classes: int = 6,
                      model_kind: str = "conformer") -> ModelConfig:
    if model_kind == "blstm":
        return ModelConfig(feature_dim=feature_dim, num_output_classes=n_classes,
                           model_kind="blstm", blstm_layers=6, blstm_hidden=32,
                           dropout=0.1)
    return ModelConfig(feature_dim=feature_dim, num_output_classes=n_classes,
                       num_blocks=4, att_dim=32, num_heads=2, ffn_dim=64,
                       conv_kernel=7, dropout=0.1, time_downsample=3,
                       frontend_channels=(8, 16))


def desk_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=12, batch_utts=8, warmup_epochs=3, seed=seed,
                       specaugment=SpecAugmentConfig(time_masks=1, max_time_width=6,
                                                     freq_masks=1, max_freq_width=3),
                       sat_epochs=6)
