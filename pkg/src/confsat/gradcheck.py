"""Central-difference gradient suite over every differentiable operation.

Each op gets a battery of random tiny float64 instances; the suite reports
the max relative error per op and is the single source of truth for both the
test suite and the command-line ``grad-check``.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .conformer import ConformerAM, ModelConfig
from .embeddings import attentive_pool
from .integration import (integrate_complex_add, integrate_concat, integrate_gated_add,
                          integrate_simple_add, integrate_weighted_simple_add)
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _attention_fn(heads: int):
    def fn(x, wq, wk, wv):
        n, d = x.shape
        dh = d // heads
        split = lambda m: T.transpose(T.reshape(m, (n, heads, dh)), (1, 0, 2))
        q, k, v = split(T.matmul(x, wq)), split(T.matmul(x, wk)), split(T.matmul(x, wv))
        attn = T.softmax(T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh)), -1)
        return T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (n, d))
    return fn


def _conformer_block_fn(rng):
    cfg = ModelConfig(feature_dim=6, num_output_classes=3, num_blocks=1, att_dim=4,
                      num_heads=2, ffn_dim=6, conv_kernel=3, dropout=0.0,
                      frontend_channels=(2, 3))
    model = ConformerAM(cfg, rng, dtype=np.float64)
    block = model.blocks[0]
    params = [p for _, p in block.named_parameters()]

    def fn(x, *ps):
        out, _ = block(x)
        return out

    return fn, params


def check_once(name: str, rng: np.random.Generator, seed: int) -> float:
    if name == "linear":
        return grad_check(T.linear, [_t(rng, 4, 3), _t(rng, 3, 2), _t(rng, 2)], seed=seed)
    if name == "softmax":
        return grad_check(lambda x: T.softmax(x, -1), [_t(rng, 3, 5)], seed=seed)
    if name == "log_softmax":
        return grad_check(lambda x: T.log_softmax(x, -1), [_t(rng, 3, 5)], seed=seed)
    if name == "layer_norm":
        return grad_check(T.layer_norm, [_t(rng, 3, 8), _t(rng, 8), _t(rng, 8)], seed=seed)
    if name in ("sigmoid", "tanh", "relu", "swish"):
        return grad_check(getattr(T, name), [_t(rng, 7)], seed=seed)
    if name == "add":
        return grad_check(T.add, [_t(rng, 3, 4), _t(rng, 3, 4)], seed=seed)
    if name == "mul":
        return grad_check(T.mul, [_t(rng, 3, 4), _t(rng, 3, 4)], seed=seed)
    if name == "scale":
        return grad_check(lambda x: T.mul(x, 0.37), [_t(rng, 3, 4)], seed=seed)
    if name == "glu":
        return grad_check(T.glu, [_t(rng, 5, 6)], seed=seed)
    if name == "depthwise_conv1d":
        return grad_check(T.depthwise_conv1d, [_t(rng, 7, 2), _t(rng, 3, 2)], seed=seed)
    if name == "conv1d":
        return grad_check(lambda x, k: T.conv1d(x, k, dilation=2),
                          [_t(rng, 8, 2), _t(rng, 3, 2, 3)], seed=seed)
    if name == "conv2d":
        return grad_check(lambda x, k: T.conv2d(x, k, 3, 2),
                          [_t(rng, 7, 6, 2), _t(rng, 3, 3, 2, 3)], seed=seed)
    if name == "transposed_conv1d":
        return grad_check(lambda x, k: T.transposed_conv1d(x, k, 3),
                          [_t(rng, 4, 2), _t(rng, 3, 2)], seed=seed)
    if name == "lstm":
        return grad_check(lambda x, W, R, b: T.lstm_layer(x, (W, R, b), "fwd"),
                          [_t(rng, 3, 2), _t(rng, 2, 12), _t(rng, 3, 12), _t(rng, 12)],
                          seed=seed)
    if name == "attention":
        return grad_check(_attention_fn(2), [_t(rng, 3, 4), _t(rng, 4, 4),
                                             _t(rng, 4, 4), _t(rng, 4, 4)], seed=seed)
    if name == "attentive_pool":
        return grad_check(attentive_pool, [_t(rng, 4, 3), _t(rng, 3, 3),
                                           _t(rng, 3), _t(rng, 3)], seed=seed)
    if name == "integrate_concat":
        return grad_check(lambda z, v, w: T.linear(integrate_concat(z, v), w, None),
                          [_t(rng, 3, 4), _t(rng, 2), _t(rng, 6, 3)], seed=seed)
    if name == "integrate_simple_add":
        return grad_check(integrate_simple_add,
                          [_t(rng, 3, 4), _t(rng, 2), _t(rng, 2, 4), _t(rng, 4)], seed=seed)
    if name == "integrate_complex_add":
        return grad_check(integrate_complex_add,
                          [_t(rng, 3, 4), _t(rng, 2), _t(rng, 4, 4),
                           _t(rng, 2, 4), _t(rng, 4)], seed=seed)
    if name == "integrate_gated_add":
        return grad_check(integrate_gated_add,
                          [_t(rng, 3, 4), _t(rng, 2), _t(rng, 2, 4), _t(rng, 2, 4),
                           _t(rng, 4), _t(rng, 4)], seed=seed)
    if name == "integrate_weighted_simple_add":
        # scores near the threshold make the hard cut non-differentiable; keep
        # the instance away from it so the check measures the smooth branches
        def fn(z, v, W, U, b1, b2):
            out, _ = integrate_weighted_simple_add(z, v, W, U, b1, b2, k=0.4)
            return out
        return grad_check(fn, [_t(rng, 3, 4), _t(rng, 2), _t(rng, 2, 4), _t(rng, 2, 4),
                               _t(rng, 4), _t(rng, 4)], seed=seed)
    if name == "conformer_block":
        # deep composition: tiny-gradient coords are roundoff-bound at 1e-5
        # while high-curvature coords are truncation-bound at 1e-4, so give
        # each coordinate both steps
        fn, params = _conformer_block_fn(rng)
        return grad_check(fn, [_t(rng, 5, 4)] + params, eps=(1e-5, 1e-4), seed=seed)
    raise KeyError(name)


OPS = ("linear", "softmax", "log_softmax", "layer_norm", "sigmoid", "tanh", "relu",
       "swish", "add", "mul", "scale", "glu", "depthwise_conv1d", "conv1d", "conv2d",
       "transposed_conv1d", "lstm", "attention", "attentive_pool", "integrate_concat",
       "integrate_simple_add", "integrate_complex_add", "integrate_gated_add",
       "integrate_weighted_simple_add", "conformer_block")

def run_suite(instances: int = 20, eps: float = 1e-5, seed: int = 0,
              ops=OPS) -> dict[str, float]:
    results = {}
    for name in ops:
        tag = zlib.crc32(name.encode())
        rng = np.random.default_rng(np.random.SeedSequence([seed, tag]))
        worst = 0.0
        for i in range(instances):
            worst = max(worst, check_once(name, rng, seed=seed + i))
        results[name] = worst
    return results
