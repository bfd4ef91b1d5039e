"""Synthetic speaker-structured corpora and their on-disk layout.

Each utterance is a Markov chain over frame classes; each class emits
Gaussian frames around its own mean, and every speaker adds one fixed random
shift vector to its frames. With a large shift the frame classes overlap for
a speaker-blind classifier but separate cleanly once the shift is known,
which is exactly the structure speaker conditioning should exploit.

Class 0 plays the role of silence: its frames carry no speaker shift. A
correction that is constant across an utterance therefore corrupts silence
frames, while a per-frame weighted correction can skip them.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: str
    features: np.ndarray          # [T, F] float32
    frame_labels: np.ndarray      # [T] int32
    split: str                    # train | dev | test


@dataclass
class CorpusMeta:
    n_speakers: int
    utts_per_speaker: int
    frames_min: int
    frames_max: int
    feature_dim: int
    n_classes: int
    speaker_shift_std: float
    noise_std: float
    class_scale: float
    stay_prob: float
    seed: int
    silence_class: bool = True
    silence_prob: float = 0.0
    class_means: list = field(default_factory=list)
    speaker_shifts: dict = field(default_factory=dict)


@dataclass
class Corpus:
    meta: CorpusMeta
    utterances: list[Utterance]

    @property
    def feature_dim(self) -> int:
        return self.meta.feature_dim

    @property
    def n_classes(self) -> int:
        return self.meta.n_classes

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    def speakers(self) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances})


SPLIT_FRACTIONS = (("train", 0.7), ("dev", 0.15), ("test", 0.15))


def gen_corpus(n_speakers: int, utts_per_speaker: int, frames_range=(30, 50),
               feature_dim: int = 16, n_classes: int = 6, speaker_shift_std: float = 1.0,
               noise_std: float = 0.5, class_scale: float = 0.5, stay_prob: float = 0.7,
               seed: int = 0, silence_class: bool = True,
               silence_prob: float = 0.0) -> Corpus:
    """Deterministic corpus; splits are per speaker so every speaker appears
    in train, dev and test. With silence_class, frames of class 0 are left
    unshifted; silence_prob > 0 biases state transitions toward class 0
    (otherwise transitions are uniform)."""
    if n_speakers < 2:
        raise UsageError("need at least 2 speakers")
    rng = np.random.default_rng(seed)
    fmin, fmax = frames_range
    class_means = rng.standard_normal((n_classes, feature_dim)) * class_scale
    shifts = {f"spk{s:03d}": rng.standard_normal(feature_dim) * speaker_shift_std
              for s in range(n_speakers)}

    n_train = max(1, int(round(utts_per_speaker * SPLIT_FRACTIONS[0][1])))
    n_dev = max(1, int(round(utts_per_speaker * SPLIT_FRACTIONS[1][1])))
    if n_train + n_dev >= utts_per_speaker:
        n_dev = max(1, (utts_per_speaker - n_train) // 2) if utts_per_speaker > n_train else 0
    splits = ["train"] * n_train + ["dev"] * n_dev \
        + ["test"] * (utts_per_speaker - n_train - n_dev)

    utterances = []
    for spk, shift in shifts.items():
        for j in range(utts_per_speaker):
            T = int(rng.integers(fmin, fmax + 1))
            labels = np.empty(T, dtype=np.int32)
            state = int(rng.integers(n_classes))
            for t in range(T):
                labels[t] = state
                if rng.random() >= stay_prob:
                    if silence_prob > 0 and rng.random() < silence_prob:
                        state = 0
                    else:
                        state = int(rng.integers(n_classes))
            shifted = (labels != 0)[:, None] if silence_class else 1.0
            feats = class_means[labels] + shift * shifted \
                + rng.standard_normal((T, feature_dim)) * noise_std
            utterances.append(Utterance(
                utterance_id=f"{spk}_u{j:03d}", speaker_id=spk,
                features=feats.astype(np.float32), frame_labels=labels,
                split=splits[j] if j < len(splits) else "train"))
    meta = CorpusMeta(n_speakers=n_speakers, utts_per_speaker=utts_per_speaker,
                      frames_min=fmin, frames_max=fmax, feature_dim=feature_dim,
                      n_classes=n_classes, speaker_shift_std=speaker_shift_std,
                      noise_std=noise_std, class_scale=class_scale, stay_prob=stay_prob,
                      seed=seed, silence_class=silence_class, silence_prob=silence_prob,
                      class_means=class_means.tolist(),
                      speaker_shifts={k: v.tolist() for k, v in shifts.items()})
    return Corpus(meta=meta, utterances=utterances)


def oracle_frame_accuracy(corpus: Corpus, speaker_aware: bool, split: str = "dev") -> float:
    """Bayes-style plug-in classifier on the true generative parameters.

    speaker_aware subtracts the true speaker shift before matching class
    means; the blind variant matches raw frames against the raw means.
    """
    means = np.asarray(corpus.meta.class_means)
    shifts = {k: np.asarray(v) for k, v in corpus.meta.speaker_shifts.items()}
    hits = total = 0
    for u in corpus.split(split):
        x = u.features.astype(np.float64)
        cmeans = means
        if speaker_aware:
            cmeans = means + shifts[u.speaker_id]
            if corpus.meta.silence_class:
                cmeans = cmeans.copy()
                cmeans[0] = means[0]
        d2 = ((x[:, None, :] - cmeans[None, :, :]) ** 2).sum(axis=2)
        hits += int((np.argmin(d2, axis=1) == u.frame_labels).sum())
        total += len(u.frame_labels)
    return hits / total


# -- disk layout -----------------------------------------------------------------


def save_corpus(corpus: Corpus, out_dir: str):
    """manifest.json plus one .f32 (features) and .i32 (labels) file per
    utterance, little-endian row-major."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for u in sorted(corpus.utterances, key=lambda u: u.utterance_id):
        feat_file = f"{u.utterance_id}.f32"
        label_file = f"{u.utterance_id}.i32"
        u.features.astype("<f4").tofile(os.path.join(out_dir, feat_file))
        u.frame_labels.astype("<i4").tofile(os.path.join(out_dir, label_file))
        entries.append({"utterance_id": u.utterance_id, "speaker_id": u.speaker_id,
                        "split": u.split, "T": int(u.features.shape[0]),
                        "F": int(u.features.shape[1]),
                        "label_file": label_file, "feature_file": feat_file})
    manifest = {"utterances": entries, "meta": vars(corpus.meta)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)


def load_corpus(in_dir: str) -> Corpus:
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    meta = CorpusMeta(**manifest["meta"])
    utterances = []
    for e in manifest["utterances"]:
        feats = np.fromfile(os.path.join(in_dir, e["feature_file"]),
                            dtype="<f4").reshape(e["T"], e["F"])
        labels = np.fromfile(os.path.join(in_dir, e["label_file"]), dtype="<i4")
        utterances.append(Utterance(utterance_id=e["utterance_id"],
                                    speaker_id=e["speaker_id"], features=feats,
                                    frame_labels=labels, split=e["split"]))
    return Corpus(meta=meta, utterances=utterances)


# -- augmentation -----------------------------------------------------------------


@dataclass
class SpecAugmentConfig:
    time_masks: int = 2
    max_time_width: int = 8
    freq_masks: int = 1
    max_freq_width: int = 4

    def halved(self) -> "SpecAugmentConfig":
        return SpecAugmentConfig(self.time_masks, max(1, self.max_time_width // 2),
                                 self.freq_masks, max(1, self.max_freq_width // 2))


def spec_augment(features: np.ndarray, cfg: SpecAugmentConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Zero out random time and frequency stripes; returns a masked copy."""
    T, F = features.shape
    if cfg.max_time_width > T or cfg.max_freq_width > F:
        raise UsageError(f"mask widths {cfg.max_time_width}/{cfg.max_freq_width} "
                         f"exceed utterance dims {T}/{F}")
    out = features.copy()
    for _ in range(cfg.time_masks):
        w = int(rng.integers(0, cfg.max_time_width + 1))
        if w:
            t0 = int(rng.integers(0, T - w + 1))
            out[t0:t0 + w, :] = 0.0
    for _ in range(cfg.freq_masks):
        w = int(rng.integers(0, cfg.max_freq_width + 1))
        if w:
            f0 = int(rng.integers(0, F - w + 1))
            out[:, f0:f0 + w] = 0.0
    return out
