"""Layer-wise speaker-identification probes on a frozen acoustic model.

Each probe head is an attentive pooling over one tap point's frame sequence
followed by a linear speaker classifier. The acoustic model is run once per
utterance in eval mode, its tap activations are cached as plain arrays, and
only the heads train; a parameter digest taken before and after training
certifies the model was untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .conformer import BlockTapPoint, validate_taps
from .embeddings import AttentivePool
from .errors import ConfigurationError, UsageError
from .nn import Linear, Module, params_checksum
from .tensor import Tensor

MODULE_RANK = {"ffn1_out": 1.0, "conv1_out": 2.0, "mhsa_in": 2.5,
               "mhsa_out": 3.0, "conv2_out": 4.0, "ffn2_out": 5.0}


def depth_fraction(tap: BlockTapPoint, config) -> float:
    """Plot coordinate in [0, 1].

    Conformer: block b output sits at b / num_blocks (block 0 = front-end);
    module taps interpolate inside their block by module position. The
    recurrent model's layers spread evenly from 0 to 1.
    """
    if config.model_kind == "blstm":
        L = config.blstm_layers
        return (tap.block_index - 1) / (L - 1) if L > 1 else 0.0
    n = config.num_blocks
    if tap.module is None:
        return tap.block_index / n
    return (tap.block_index - 1) / n + MODULE_RANK[tap.module] / (5.0 * n)


@dataclass
class ProbeConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_utts: int = 8
    seed: int = 0


class ProbeHead(Module):
    def __init__(self, d: int, n_speakers: int, rng, dtype):
        self.pool = AttentivePool(d, rng, dtype)
        self.cls = Linear(d, n_speakers, rng, dtype)

    def __call__(self, frames: Tensor) -> Tensor:
        return self.cls(T.reshape(self.pool(frames), (1, -1)))


class ProbeHeads(Module):
    def __init__(self, taps: list[BlockTapPoint], d: int, speakers: list[str], rng, dtype):
        self.taps = list(taps)
        self.speakers = list(speakers)
        self.heads = [ProbeHead(d, len(speakers), rng, dtype) for _ in taps]

    def head_for(self, tap: BlockTapPoint) -> ProbeHead:
        return self.heads[self.taps.index(tap)]


def attach_probes(model, taps, speakers, seed: int = 0, dtype=np.float32) -> ProbeHeads:
    taps = list(taps)
    validate_taps(taps, model.config)
    if not speakers:
        raise ConfigurationError("need a speaker inventory")
    d = model.config.att_dim if model.config.model_kind == "conformer" \
        else model.config.blstm_hidden
    return ProbeHeads(taps, d, sorted(speakers), np.random.default_rng(seed), dtype)


def _cache_taps(model, utterances, taps) -> dict[str, dict[str, np.ndarray]]:
    """Frozen-model activations per utterance, detached from any graph."""
    cache = {}
    for u in utterances:
        _, tap_out = model.forward(Tensor(u.features), ctx=None, taps=tuple(taps))
        cache[u.utterance_id] = {k: t.data.copy() for k, t in tap_out.items()}
    return cache


def train_probes(model, heads: ProbeHeads, train_utts, cfg: ProbeConfig,
                 dev_utts=None) -> dict:
    """Train all heads jointly on cached activations; the model itself is
    never part of the graph, so its parameters cannot move.

    Returns {"checksum_before", "checksum_after", "losses": per-epoch mean}.
    """
    from .training import AdamOptimizer

    if not train_utts:
        raise UsageError("empty probe training split")
    train_speakers = {u.speaker_id for u in train_utts}
    for u in dev_utts or ():
        if u.speaker_id not in train_speakers:
            raise UsageError(f"speaker {u.speaker_id} appears in dev but not in train")
    missing = train_speakers - set(heads.speakers)
    if missing:
        raise UsageError(f"heads lack speakers {sorted(missing)}")
    spk_index = {s: i for i, s in enumerate(heads.speakers)}

    checksum_before = params_checksum(model)
    cache = _cache_taps(model, train_utts, heads.taps)
    opt = AdamOptimizer(heads.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order = np.arange(len(train_utts))
    losses = []
    for _ in range(cfg.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        n = 0
        for start in range(0, len(order), cfg.batch_utts):
            batch = order[start:start + cfg.batch_utts]
            heads.zero_grads()
            batch_loss = None
            for i in batch:
                u = train_utts[i]
                label = np.array([spk_index[u.speaker_id]])
                for tap in heads.taps:
                    logits = heads.head_for(tap)(Tensor(cache[u.utterance_id][tap.key()]))
                    loss = T.cross_entropy(logits, label)
                    batch_loss = loss if batch_loss is None else T.add(batch_loss, loss)
            scaled = T.mul(batch_loss, 1.0 / (len(batch) * len(heads.taps)))
            scaled.backward()
            opt.step()
            epoch_loss += scaled.item()
            n += 1
        losses.append(epoch_loss / n)
    checksum_after = params_checksum(model)
    if checksum_before != checksum_after:
        from .errors import NumericalError
        raise NumericalError("frozen model changed during probe training: "
                             f"{checksum_before} -> {checksum_after}")
    return {"checksum_before": checksum_before, "checksum_after": checksum_after,
            "losses": losses}


@dataclass
class ProbeReport:
    model_kind: str
    rows: list[dict] = field(default_factory=list)
    am_checksum_before: str = ""
    am_checksum_after: str = ""

    def to_json(self) -> str:
        return json.dumps({"model_kind": self.model_kind,
                           "am_checksum_before": self.am_checksum_before,
                           "am_checksum_after": self.am_checksum_after,
                           "rows": self.rows}, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ProbeReport":
        d = json.loads(text)
        return cls(model_kind=d["model_kind"], rows=d["rows"],
                   am_checksum_before=d["am_checksum_before"],
                   am_checksum_after=d["am_checksum_after"])


def probe_report(model, heads: ProbeHeads, dev_utts, checksums: dict | None = None) -> ProbeReport:
    """Per-tap top-1 speaker error on the dev utterances."""
    if not dev_utts:
        raise UsageError("empty probe dev split")
    spk_index = {s: i for i, s in enumerate(heads.speakers)}
    cache = _cache_taps(model, dev_utts, heads.taps)
    report = ProbeReport(model_kind=model.config.model_kind)
    if checksums:
        report.am_checksum_before = checksums["checksum_before"]
        report.am_checksum_after = checksums["checksum_after"]
    for tap in heads.taps:
        head = heads.head_for(tap)
        hits = 0
        for u in dev_utts:
            logits = head(Tensor(cache[u.utterance_id][tap.key()]))
            hits += int(np.argmax(logits.data) == spk_index[u.speaker_id])
        report.rows.append({"tap": {"block_index": tap.block_index, "module": tap.module},
                            "depth_fraction": depth_fraction(tap, model.config),
                            "error_rate": 1.0 - hits / len(dev_utts),
                            "n_dev_utts": len(dev_utts)})
    report.rows.sort(key=lambda r: r["depth_fraction"])
    return report


def depth_curve_csv(report: ProbeReport) -> str:
    lines = ["model_kind,depth_fraction,error_rate"]
    for r in sorted(report.rows, key=lambda r: r["depth_fraction"]):
        lines.append(f"{report.model_kind},{r['depth_fraction']:.9g},{r['error_rate']:.9g}")
    return "\n".join(lines) + "\n"


def block_output_taps(config) -> list[BlockTapPoint]:
    """The standard depth-curve tap set: every block output (front-end
    included for the conformer, layers 1..L for the recurrent model)."""
    if config.model_kind == "blstm":
        return [BlockTapPoint(i) for i in range(1, config.blstm_layers + 1)]
    return [BlockTapPoint(i) for i in range(0, config.num_blocks + 1)]
