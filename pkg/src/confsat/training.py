"""Frame-level cross-entropy training, the two-phase adaptation workflow,
evaluation, and the ablation grid runner.

Phase one trains a speaker-independent model with linear learning-rate warmup
and decay-on-plateau. Phase two loads that checkpoint, creates
identity-initialized integration parameters, resets the learning rate to a
small constant with no warmup, halves the augmentation mask widths, and
continues training with per-utterance speaker vectors.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .conformer import ModelConfig, build_model, count_parameters
from .data import Corpus, SpecAugmentConfig, spec_augment
from .errors import NumericalError, UsageError
from .integration import IntegrationSpec, added_param_count
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_utts: int = 8
    peak_lr: float = 8e-4
    init_lr: float = 1e-5
    warmup_epochs: int = 5
    seed: int = 0
    specaugment: SpecAugmentConfig | None = field(default_factory=SpecAugmentConfig)
    plateau_decay: float = 0.7
    plateau_patience: int = 1
    sat_reset_lr: float = 3e-5
    sat_epochs: int = 6
    sat_freeze_am_epochs: int = 0

    def __post_init__(self):
        if self.init_lr > self.peak_lr:
            raise UsageError("init_lr must not exceed peak_lr")

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["specaugment"] = vars(self.specaugment) if self.specaugment else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("specaugment"):
            d["specaugment"] = SpecAugmentConfig(**d["specaugment"])
        return cls(**d)


def lr_schedule(step: int, phase: str, cfg: TrainConfig, steps_per_epoch: int,
                decay_factor: float = 1.0) -> float:
    """Pretraining ramps linearly from init_lr to peak_lr over the warmup
    epochs and then holds; the caller shrinks decay_factor on dev plateaus.
    Adaptation uses a flat reset learning rate from step 0, never a ramp."""
    if phase == "sat":
        return cfg.sat_reset_lr * decay_factor
    if phase != "pretrain":
        raise UsageError(f"unknown phase {phase!r}")
    warm = cfg.warmup_epochs * steps_per_epoch
    if warm > 0 and step < warm:
        return cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * (step / warm)
    return cfg.peak_lr * decay_factor


class AdamOptimizer:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None, include: set[int] | None = None,
             frozen_rows: dict[int, int] | None = None):
        """One update. ``include`` restricts which tensors move; a tensor in
        ``frozen_rows`` (id -> row count) only updates rows past that count,
        which is how widened projections train their appended rows while the
        pretrained slice stays put."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or (include is not None and id(p) not in include):
                continue
            g = p.grad
            if frozen_rows and id(p) in frozen_rows:
                g = g.copy()
                g[:frozen_rows[id(p)]] = 0.0
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))


class TrainContext:
    """Carries the dropout stream during training forwards; None means eval."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng


@dataclass
class TrainResult:
    config: ModelConfig
    state: dict[str, np.ndarray]          # best-dev parameters
    metrics: list[dict]                   # one entry per epoch
    best_dev_error: float


def _utterance_embedding(embeddings, utt):
    if embeddings is None:
        return None
    try:
        e = embeddings[utt.utterance_id]
    except KeyError:
        raise UsageError(f"no embedding for utterance {utt.utterance_id}") from None
    return e.vector if hasattr(e, "vector") else e


def evaluate(model, utterances, embeddings=None) -> float:
    """Top-1 frame error over every frame of the given utterances."""
    if not utterances:
        raise UsageError("empty evaluation split")
    if model.config.integration is not None and embeddings is None:
        raise UsageError("model integrates speaker vectors; pass embeddings")
    hits = total = 0
    for u in utterances:
        logits, _ = model.forward(Tensor(u.features), ctx=None,
                                  embedding=_utterance_embedding(embeddings, u))
        hits += int((np.argmax(logits.data, axis=1) == u.frame_labels).sum())
        total += len(u.frame_labels)
    return 1.0 - hits / total


def _run_epochs(model, corpus: Corpus, cfg: TrainConfig, phase: str, epochs: int,
                embeddings=None, spec_cfg: SpecAugmentConfig | None = None,
                freeze_to: set[int] | None = None, freeze_epochs: int = 0,
                frozen_rows: dict[int, int] | None = None,
                log_initial: bool = False):
    train_utts = corpus.split("train")
    dev_utts = corpus.split("dev")
    if not train_utts:
        raise UsageError("corpus has no train split")
    ss = np.random.SeedSequence([cfg.seed, 0 if phase == "pretrain" else 1])
    order_rng, drop_rng, mask_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    opt = AdamOptimizer(model.parameters())
    steps_per_epoch = max(1, len(train_utts) // cfg.batch_utts)
    metrics = []
    best_err = np.inf
    best_state = model.state()
    decay = 1.0
    since_best = 0
    step = 0
    if log_initial:
        err0 = evaluate(model, dev_utts, embeddings)
        metrics.append({"epoch": 0, "phase": phase, "train_loss": None,
                        "dev_frame_error": err0, "lr": lr_schedule(0, phase, cfg,
                                                                   steps_per_epoch, decay)})
        best_err, best_state = err0, model.state()
    for epoch in range(1, epochs + 1):
        order = order_rng.permutation(len(train_utts))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_utts):
            batch = [train_utts[i] for i in order[start:start + cfg.batch_utts]]
            total_frames = sum(len(u.frame_labels) for u in batch)
            model.zero_grads()
            batch_loss = 0.0
            for u in batch:
                feats = u.features
                if spec_cfg is not None:
                    feats = spec_augment(feats, spec_cfg, mask_rng)
                logits, _ = model.forward(Tensor(feats), ctx=TrainContext(drop_rng),
                                          embedding=_utterance_embedding(embeddings, u))
                loss = T.mul(T.cross_entropy(logits, u.frame_labels),
                             len(u.frame_labels) / total_frames)
                loss.backward()
                batch_loss += loss.item()
            lr = lr_schedule(step, phase, cfg, steps_per_epoch, decay)
            if not np.isfinite(batch_loss):
                raise NumericalError(f"loss diverged at step {step} (lr={lr:.2e}, "
                                     f"grad_norm={opt.grad_norm():.2e})")
            frozen = epoch <= freeze_epochs
            opt.step(lr=lr, include=freeze_to if frozen else None,
                     frozen_rows=frozen_rows if frozen else None)
            step += 1
            epoch_loss += batch_loss
            n_batches += 1
        dev_err = evaluate(model, dev_utts, embeddings)
        metrics.append({"epoch": epoch, "phase": phase,
                        "train_loss": epoch_loss / n_batches,
                        "dev_frame_error": dev_err,
                        "lr": lr_schedule(step - 1, phase, cfg, steps_per_epoch, decay)})
        if dev_err < best_err - 1e-12:
            best_err = dev_err
            best_state = model.state()
            since_best = 0
        else:
            since_best += 1
            past_warmup = phase == "sat" or epoch > cfg.warmup_epochs
            if past_warmup and since_best > cfg.plateau_patience:
                decay *= cfg.plateau_decay
                since_best = 0
    return best_state, metrics, best_err


def train(model_config: ModelConfig, corpus: Corpus, cfg: TrainConfig) -> TrainResult:
    """Speaker-independent pretraining; the best-dev parameters are kept."""
    if model_config.integration is not None:
        raise UsageError("pretraining is speaker independent; run sat_finetune for integration")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 97]))
    model = build_model(model_config, rng=rng, dtype=np.float32)
    state, metrics, best = _run_epochs(model, corpus, cfg, "pretrain", cfg.epochs,
                                       spec_cfg=cfg.specaugment)
    return TrainResult(config=model_config, state=state, metrics=metrics, best_dev_error=best)


def sat_finetune(pretrained_config: ModelConfig, pretrained_state: dict,
                 corpus: Corpus, embeddings, spec: IntegrationSpec,
                 cfg: TrainConfig) -> TrainResult:
    """Continue from a speaker-independent checkpoint with speaker vectors.

    Integration parameters start as the identity, the optimizer is fresh, the
    learning rate is a flat reset value, and augmentation masks are halved.
    The epoch-0 metrics row is the untouched warm-start dev error.
    """
    if pretrained_config.integration is not None:
        raise UsageError("pretrained checkpoint already has integration parameters")
    dims = {np.asarray(_utterance_embedding(embeddings, u)).shape
            for u in corpus.utterances if u.utterance_id in embeddings}
    if dims and dims != {(spec.embedding_dim,)}:
        raise UsageError(f"embedding dims {dims} do not match spec dim {spec.embedding_dim}")
    sat_config = replace(pretrained_config, integration=spec)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 131]))
    model = build_model(sat_config, rng=rng, dtype=np.float32, integration_init="warm_start")
    model.load_warm_start(pretrained_state)
    freeze_to = None
    frozen_rows = None
    if cfg.sat_freeze_am_epochs > 0:
        freeze_to = {id(p) for name, p in model.named_parameters()
                     if name.startswith("integration.")}
        if spec.method == "concat":
            # concat's trainable capacity is the appended rows of the widened
            # projections; keep those live and freeze the pretrained rows
            d = sat_config.att_dim
            frozen_rows = {}
            for b in spec.blocks:
                if b == 0:
                    lin = model.blocks[0].ffn1.lin1
                    frozen_rows[id(lin.W)] = d
                    freeze_to.add(id(lin.W))
                else:
                    mhsa = model.blocks[b - 1].mhsa
                    for lin in (mhsa.wq, mhsa.wk, mhsa.wv):
                        frozen_rows[id(lin.W)] = d
                        freeze_to.add(id(lin.W))
    spec_cfg = cfg.specaugment.halved() if cfg.specaugment else None
    state, metrics, best = _run_epochs(model, corpus, cfg, "sat", cfg.sat_epochs,
                                       embeddings=embeddings, spec_cfg=spec_cfg,
                                       freeze_to=freeze_to,
                                       freeze_epochs=cfg.sat_freeze_am_epochs,
                                       frozen_rows=frozen_rows,
                                       log_initial=True)
    return TrainResult(config=sat_config, state=state, metrics=metrics, best_dev_error=best)


# -- ablation grid ------------------------------------------------------------------


@dataclass
class AblationCell:
    method: str
    blocks: tuple[int, ...]
    source: str
    seed: int


def format_blocks(blocks: tuple[int, ...]) -> str:
    return str(blocks[0]) if len(blocks) == 1 else "(" + ",".join(map(str, blocks)) + ")"


def _run_cell(args):
    (cell, config_dict, state, corpus, embeddings_by_source, cfg_dict, base_spec_dict) = args
    config = ModelConfig.from_dict(config_dict)
    cfg = replace(TrainConfig.from_dict(cfg_dict), seed=cell.seed)
    spec = IntegrationSpec.from_dict(base_spec_dict)
    spec.method = cell.method
    spec.blocks = list(cell.blocks)
    result = sat_finetune(config, state, corpus, embeddings_by_source[cell.source], spec, cfg)
    return {"method": cell.method, "blocks": format_blocks(cell.blocks),
            "source": cell.source, "seed": cell.seed,
            "dev_frame_error": result.best_dev_error,
            "params_added": added_param_count(spec, config.att_dim, config.ffn_dim)}


def ablate(pretrained_config: ModelConfig, pretrained_state: dict, corpus: Corpus,
           embeddings_by_source: dict[str, dict], methods, block_sets, seeds,
           cfg: TrainConfig, base_spec: IntegrationSpec | None = None,
           jobs: int = 1) -> list[dict]:
    """One adaptation run per (method, block set, embedding source, seed), all
    from the same pretrained parameters. Row order is grid order regardless
    of how workers finish."""
    if not methods or not block_sets or not seeds:
        raise UsageError("empty ablation grid")
    base_spec = base_spec or IntegrationSpec(embedding_dim=next(
        iter(next(iter(embeddings_by_source.values())).values())).vector.size)
    cells = [AblationCell(m, tuple(b), src, s)
             for m in methods for b in block_sets
             for src in sorted(embeddings_by_source) for s in seeds]
    args = [(c, pretrained_config.to_dict(), pretrained_state, corpus,
             embeddings_by_source, cfg.to_dict(), base_spec.to_dict()) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell, args))
    return [_run_cell(a) for a in args]


ABLATION_COLUMNS = ("method", "blocks", "source", "seed", "dev_frame_error", "params_added")


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        out["dev_frame_error"] = f"{row['dev_frame_error']:.9g}"
        writer.writerow(out)
    return buf.getvalue()
