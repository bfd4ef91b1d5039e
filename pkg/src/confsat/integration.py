"""Speaker-vector integration methods.

Five ways to inject a fixed per-utterance speaker vector v into a hidden
sequence z (frames x dim), all as pure tensor functions plus a parameter
container per attached block. The default attachment point is the input of
the self-attention module of the first block.

Warm-start initialization makes every method the identity map so that
fine-tuning from a speaker-independent checkpoint starts at exactly the
pretrained outputs:

  concat       extra projection columns in the consuming module start at 0
  simple_add   U = 0, b = 0
  complex_add  W = I, U = 0, b = 0
  gated_add    W = U = 0, b1 = 1, b2 = 0 (scale 1, shift 0)
  weighted     W = U = 0, b1 = b2 = 0 (weights all 0.5, correction 0)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .nn import Module, eye_param, ones_param, uniform_init, zeros_param
from .tensor import Tensor

METHODS = ("concat", "simple_add", "complex_add", "gated_add", "weighted_simple_add")


@dataclass
class IntegrationSpec:
    method: str = "weighted_simple_add"
    blocks: list[int] = field(default_factory=lambda: [1])
    target: str = "mhsa_in"
    threshold_k: float = 0.4
    embedding_dim: int = 200
    straight_through: bool = False

    def validate(self, num_blocks: int):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown integration method {self.method!r}")
        if self.target != "mhsa_in":
            raise ConfigurationError(f"integration target {self.target!r} not supported (only mhsa_in)")
        if not self.blocks:
            raise ConfigurationError("integration needs at least one block index")
        for b in self.blocks:
            if not 0 <= b <= num_blocks:
                raise ConfigurationError(f"integration block {b} outside [0, {num_blocks}]")
        if len(set(self.blocks)) != len(self.blocks):
            raise ConfigurationError(f"duplicate integration blocks {self.blocks}")
        if not 0.0 <= self.threshold_k <= 1.0:
            raise ConfigurationError(f"threshold_k must be in [0, 1], got {self.threshold_k}")
        if self.embedding_dim < 1:
            raise ConfigurationError("embedding_dim must be positive")

    def to_dict(self) -> dict:
        return {"method": self.method, "blocks": list(self.blocks), "target": self.target,
                "threshold_k": self.threshold_k, "embedding_dim": self.embedding_dim,
                "straight_through": self.straight_through}

    @classmethod
    def from_dict(cls, d: dict) -> "IntegrationSpec":
        return cls(method=d["method"], blocks=list(d["blocks"]), target=d.get("target", "mhsa_in"),
                   threshold_k=d.get("threshold_k", 0.4), embedding_dim=d["embedding_dim"],
                   straight_through=d.get("straight_through", False))


def _rows(vec: Tensor, n_frames: int) -> Tensor:
    """Tile a [d] vector into [T, d]."""
    return T.broadcast_to(T.reshape(vec, (1, vec.shape[-1])), (n_frames, vec.shape[-1]))


def integrate_concat(z: Tensor, v: Tensor) -> Tensor:
    """Append v to every frame; the consumer's input projection must be widened."""
    return T.concat([z, _rows(v, z.shape[0])], axis=-1)


def integrate_simple_add(z: Tensor, v: Tensor, U: Tensor, b: Tensor) -> Tensor:
    corr = T.add(T.reshape(T.matmul(T.reshape(v, (1, -1)), U), (-1,)), b)
    return T.add(z, _rows(corr, z.shape[0]))


def integrate_complex_add(z: Tensor, v: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    corr = T.add(T.reshape(T.matmul(T.reshape(v, (1, -1)), U), (-1,)), b)
    return T.add(T.matmul(z, W), _rows(corr, z.shape[0]))


def integrate_gated_add(z: Tensor, v: Tensor, W: Tensor, U: Tensor,
                        b1: Tensor, b2: Tensor) -> Tensor:
    vrow = T.reshape(v, (1, -1))
    gamma = T.add(T.reshape(T.tanh(T.matmul(vrow, W)), (-1,)), b1)
    beta = T.add(T.reshape(T.tanh(T.matmul(vrow, U)), (-1,)), b2)
    n = z.shape[0]
    return T.add(T.mul(z, _rows(gamma, n)), _rows(beta, n))


def integrate_weighted_simple_add(z: Tensor, v: Tensor, W: Tensor, U: Tensor,
                                  b1: Tensor, b2: Tensor, k: float,
                                  straight_through: bool = False) -> tuple[Tensor, Tensor]:
    """Per-frame gated correction.

    A scalar score per frame, sigmoid(z_t . (tanh(Wv) + b1)), weights the shared
    correction Uv + b2; weights below k are zeroed hard (no gradient through the
    zeroed entries unless straight_through).
    Returns (integrated sequence, post-threshold weights [T]).
    """
    n, d = z.shape
    vrow = T.reshape(v, (1, -1))
    key = T.add(T.reshape(T.tanh(T.matmul(vrow, W)), (-1,)), b1)     # [d]
    scores = T.reshape(T.matmul(z, T.reshape(key, (d, 1))), (n,))    # [T]
    w = T.threshold_keep(T.sigmoid(scores), k, straight_through)
    corr = T.add(T.reshape(T.matmul(vrow, U), (-1,)), b2)            # [d]
    delta = T.matmul(T.reshape(w, (n, 1)), T.reshape(corr, (1, d)))
    return T.add(z, delta), w


class IntegrationParams(Module):
    """Trainable parameters for one attached block.

    ``init="warm_start"`` sets the method to be exactly the identity (see
    module docstring); ``init="random"`` uses small uniform U/W for training
    from scratch. Concat holds no parameters here: its capacity lives in the
    widened projection of the consuming module.
    """

    def __init__(self, method: str, d: int, emb_dim: int, dtype,
                 rng: np.random.Generator | None = None, init: str = "warm_start"):
        if method not in METHODS:
            raise ConfigurationError(f"unknown integration method {method!r}")
        self.method = method
        random = init == "random"
        if random and rng is None:
            raise ConfigurationError("random init needs an rng")

        def mat(shape, fan_in):
            return uniform_init(rng, shape, fan_in, dtype) if random else zeros_param(shape, dtype)

        if method == "simple_add":
            self.U = mat((emb_dim, d), emb_dim)
            self.b = zeros_param((d,), dtype)
        elif method == "complex_add":
            self.W = mat((d, d), d) if random else eye_param(d, dtype)
            self.U = mat((emb_dim, d), emb_dim)
            self.b = zeros_param((d,), dtype)
        elif method == "gated_add":
            self.W = mat((emb_dim, d), emb_dim)
            self.U = mat((emb_dim, d), emb_dim)
            self.b1 = ones_param((d,), dtype)
            self.b2 = zeros_param((d,), dtype)
        elif method == "weighted_simple_add":
            self.W = mat((emb_dim, d), emb_dim)
            self.U = mat((emb_dim, d), emb_dim)
            self.b1 = zeros_param((d,), dtype)
            self.b2 = zeros_param((d,), dtype)


def apply_integration(z: Tensor, v: Tensor, spec: IntegrationSpec,
                      params: IntegrationParams | None) -> Tensor:
    """Dispatch one attached block's method; weights of the weighted method
    are discarded here (use integrate_weighted_simple_add to inspect them)."""
    m = spec.method
    if m == "concat":
        return integrate_concat(z, v)
    if m == "simple_add":
        return integrate_simple_add(z, v, params.U, params.b)
    if m == "complex_add":
        return integrate_complex_add(z, v, params.W, params.U, params.b)
    if m == "gated_add":
        return integrate_gated_add(z, v, params.W, params.U, params.b1, params.b2)
    if m == "weighted_simple_add":
        out, _ = integrate_weighted_simple_add(z, v, params.W, params.U, params.b1,
                                               params.b2, spec.threshold_k,
                                               spec.straight_through)
        return out
    raise ConfigurationError(f"unknown integration method {m!r}")


def added_param_count(spec: IntegrationSpec, d: int, ffn_dim: int) -> int:
    """Extra trainable scalars integration adds to a model, all blocks included."""
    D = spec.embedding_dim
    per = {"simple_add": D * d + d,
           "complex_add": d * d + D * d + d,
           "gated_add": 2 * D * d + 2 * d,
           "weighted_simple_add": 2 * D * d + 2 * d}
    total = 0
    for b in spec.blocks:
        if spec.method == "concat":
            # widened rows: q/k/v at block >= 1, first feed-forward expansion at block 0
            total += D * ffn_dim if b == 0 else 3 * D * d
        else:
            total += per[spec.method]
    return total
