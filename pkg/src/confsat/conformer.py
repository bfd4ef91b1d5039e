"""Conformer acoustic model and a BLSTM reference model.

Block layout: half-step feed-forward, convolution, self-attention,
convolution, half-step feed-forward, final layer norm. All normalization is
layer norm. A small 2-D conv front-end downsamples time by a configurable
factor; a per-channel transposed convolution upsamples the output back and
the result is cropped to the input length so frame targets align.

Speaker vectors, when configured, enter at the self-attention input of the
attached blocks (or at the front-end output for block 0). See
``integration`` for the methods and their warm-start behaviour.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .integration import IntegrationParams, IntegrationSpec, apply_integration, integrate_concat
from .nn import LayerNorm, Linear, Module, uniform_init, zeros_param
from .tensor import Tensor

POS_ENCODINGS = ("relative", "absolute", "none")
TAP_MODULES = ("ffn1_out", "conv1_out", "mhsa_in", "mhsa_out", "conv2_out", "ffn2_out")


@dataclass
class ModelConfig:
    feature_dim: int
    num_output_classes: int
    num_blocks: int = 12
    att_dim: int = 384
    num_heads: int = 6
    ffn_dim: int = 1536
    conv_kernel: int = 31
    dropout: float = 0.1
    time_downsample: int = 3
    pos_encoding: str = "relative"
    ln_eps: float = 1e-5
    integration: IntegrationSpec | None = None
    model_kind: str = "conformer"
    blstm_layers: int = 6
    blstm_hidden: int = 512
    frontend_channels: tuple[int, int] = (32, 64)

    def __post_init__(self):
        if self.att_dim % self.num_heads != 0:
            raise ConfigurationError(f"att_dim {self.att_dim} not divisible by {self.num_heads} heads")
        if self.ffn_dim < self.att_dim:
            raise ConfigurationError(f"ffn_dim {self.ffn_dim} < att_dim {self.att_dim}")
        if self.time_downsample < 1:
            raise ConfigurationError("time_downsample must be >= 1")
        if self.conv_kernel % 2 != 1:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ConfigurationError(f"pos_encoding must be one of {POS_ENCODINGS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        if self.model_kind not in ("conformer", "blstm"):
            raise ConfigurationError(f"unknown model_kind {self.model_kind!r}")
        if self.model_kind == "blstm":
            if self.blstm_hidden % 2 != 0:
                raise ConfigurationError("blstm_hidden must be even (two directions)")
            if self.integration is not None:
                raise ConfigurationError("speaker integration is only wired for the conformer")
        if self.integration is not None:
            self.integration.validate(self.num_blocks)

    def to_dict(self) -> dict:
        d = {k: v for k, v in vars(self).items()}
        d["frontend_channels"] = list(self.frontend_channels)
        d["integration"] = self.integration.to_dict() if self.integration else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("integration"):
            d["integration"] = IntegrationSpec.from_dict(d["integration"])
        d["frontend_channels"] = tuple(d.get("frontend_channels", (32, 64)))
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class BlockTapPoint:
    """Where to read an intermediate activation.

    block_index 0 is the front-end output; module None means the block output
    (after its final layer norm)."""
    block_index: int
    module: str | None = None

    def __post_init__(self):
        if self.module is not None and self.module not in TAP_MODULES:
            raise ConfigurationError(f"unknown tap module {self.module!r}")

    def key(self) -> str:
        return f"block{self.block_index}" + (f".{self.module}" if self.module else "")


def validate_taps(taps, config: ModelConfig):
    seen = set()
    for tap in taps:
        n_layers = config.num_blocks if config.model_kind == "conformer" else config.blstm_layers
        if not 0 <= tap.block_index <= n_layers:
            raise ConfigurationError(f"tap {tap} outside [0, {n_layers}]")
        if config.model_kind == "blstm" and tap.module is not None:
            raise ConfigurationError("blstm taps address whole layers only")
        if config.model_kind == "blstm" and tap.block_index == 0:
            raise ConfigurationError("blstm layers are numbered from 1")
        if tap.block_index == 0 and tap.module is not None:
            raise ConfigurationError("block 0 is the front-end; no sub-modules to tap")
        if tap in seen:
            raise ConfigurationError(f"duplicate tap {tap}")
        seen.add(tap)


# -- positional encodings ------------------------------------------------------


def sinusoid_table(positions: np.ndarray, d: int, dtype) -> np.ndarray:
    inv = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    ang = positions[:, None] * inv[None, :]
    pe = np.zeros((len(positions), d), dtype=np.float64)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d // 2])
    return pe.astype(dtype)


class FeedForwardModule(Module):
    """Half-step feed-forward: x + 0.5 * drop(L2(drop(swish(L1(ln(x))))))."""

    def __init__(self, d: int, ffn_dim: int, dropout: float, ln_eps: float,
                 rng, dtype, concat_dim: int = 0):
        self.ln = LayerNorm(d, dtype, ln_eps)
        self.lin1 = Linear(d + concat_dim, ffn_dim, rng, dtype)
        self.lin2 = Linear(ffn_dim, d, rng, dtype)
        self.p = dropout
        self.concat_dim = concat_dim

    def __call__(self, x: Tensor, ctx=None, v: Tensor | None = None) -> Tensor:
        rng = ctx.rng if ctx is not None else None
        h = self.ln(x)
        if self.concat_dim:
            if v is None:
                raise UsageError("feed-forward was built widened but got no speaker vector")
            h = integrate_concat(h, v)
        h = T.dropout(T.swish(self.lin1(h)), self.p, rng)
        return T.add(x, T.mul(T.dropout(self.lin2(h), self.p, rng), 0.5))


class ConvModule(Module):
    """Pointwise expansion + GLU, depthwise conv, layer norm, swish, pointwise."""

    def __init__(self, d: int, kernel: int, dropout: float, ln_eps: float, rng, dtype):
        self.ln = LayerNorm(d, dtype, ln_eps)
        self.pw_in = Linear(d, 2 * d, rng, dtype)
        self.dw = uniform_init(rng, (kernel, d), kernel, dtype)
        self.ln_inner = LayerNorm(d, dtype, ln_eps)
        self.pw_out = Linear(d, d, rng, dtype)
        self.p = dropout

    def __call__(self, x: Tensor, ctx=None) -> Tensor:
        rng = ctx.rng if ctx is not None else None
        h = T.glu(self.pw_in(self.ln(x)))
        h = T.swish(self.ln_inner(T.depthwise_conv1d(h, self.dw)))
        return T.add(x, T.dropout(self.pw_out(h), self.p, rng))


class MhsaModule(Module):
    """Multi-head self-attention with optional speaker-vector hook.

    The hook runs on the normalized input; for the concat method the q/k/v
    projections are built wider so the appended vector is consumed there.
    """

    def __init__(self, d: int, heads: int, dropout: float, pos_encoding: str,
                 ln_eps: float, rng, dtype, concat_dim: int = 0):
        self.ln = LayerNorm(d, dtype, ln_eps)
        d_in = d + concat_dim
        self.wq = Linear(d_in, d, rng, dtype)
        # no key bias: softmax cancels a per-row constant, the parameter would be dead
        self.wk = Linear(d_in, d, rng, dtype, bias=False)
        self.wv = Linear(d_in, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)
        self.heads = heads
        self.d = d
        self.p = dropout
        self.pos = pos_encoding
        self.dtype = dtype
        if pos_encoding == "relative":
            self.w_pos = Linear(d, d, rng, dtype, bias=False)
            self.u_bias = zeros_param((heads, d // heads), dtype)
            self.v_bias = zeros_param((heads, d // heads), dtype)

    def _split_heads(self, x: Tensor, n: int) -> Tensor:
        dh = self.d // self.heads
        return T.transpose(T.reshape(x, (n, self.heads, dh)), (1, 0, 2))

    def __call__(self, x: Tensor, ctx=None, v_hook=None, return_attn: bool = False):
        rng = ctx.rng if ctx is not None else None
        n = x.shape[0]
        h, dh = self.heads, self.d // self.heads
        z = self.ln(x)
        if v_hook is not None:
            z = v_hook(z)
        if self.pos == "absolute":
            z = T.add(z, Tensor(sinusoid_table(np.arange(n, dtype=np.float64),
                                               z.shape[-1], z.dtype)))
        q = self._split_heads(self.wq(z), n)
        k = self._split_heads(self.wk(z), n)
        val = self._split_heads(self.wv(z), n)
        kt = T.transpose(k, (0, 2, 1))
        if self.pos == "relative":
            qu = T.add(q, T.broadcast_to(T.reshape(self.u_bias, (h, 1, dh)), (h, n, dh)))
            qv = T.add(q, T.broadcast_to(T.reshape(self.v_bias, (h, 1, dh)), (h, n, dh)))
            rel = sinusoid_table(np.arange(-(n - 1), n, dtype=np.float64), self.d, self.dtype)
            rproj = T.transpose(T.reshape(self.w_pos(Tensor(rel)), (2 * n - 1, h, dh)), (1, 0, 2))
            pos_full = T.matmul(qv, T.transpose(rproj, (0, 2, 1)))  # [h, n, 2n-1]
            idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) + (n - 1)
            idx = np.broadcast_to(idx, (h, n, n)).copy()
            scores = T.add(T.matmul(qu, kt), T.take_last_axis(pos_full, idx))
        else:
            scores = T.matmul(q, kt)
        attn = T.softmax(T.mul(scores, 1.0 / np.sqrt(dh)), axis=-1)
        ctx_out = T.reshape(T.transpose(T.matmul(attn, val), (1, 0, 2)), (n, self.d))
        out = T.add(x, T.dropout(self.wo(ctx_out), self.p, rng))
        return (out, attn) if return_attn else out


class ConformerBlock(Module):
    def __init__(self, config: ModelConfig, rng, dtype,
                 mhsa_concat_dim: int = 0, ffn1_concat_dim: int = 0):
        d = config.att_dim
        self.ffn1 = FeedForwardModule(d, config.ffn_dim, config.dropout, config.ln_eps,
                                      rng, dtype, concat_dim=ffn1_concat_dim)
        self.conv1 = ConvModule(d, config.conv_kernel, config.dropout, config.ln_eps, rng, dtype)
        self.mhsa = MhsaModule(d, config.num_heads, config.dropout, config.pos_encoding,
                               config.ln_eps, rng, dtype, concat_dim=mhsa_concat_dim)
        self.conv2 = ConvModule(d, config.conv_kernel, config.dropout, config.ln_eps, rng, dtype)
        self.ffn2 = FeedForwardModule(d, config.ffn_dim, config.dropout, config.ln_eps, rng, dtype)
        self.ln_final = LayerNorm(d, dtype, config.ln_eps)

    def __call__(self, x: Tensor, ctx=None, v_mhsa: Tensor | None = None,
                 integration: tuple[IntegrationSpec, IntegrationParams | None] | None = None,
                 v_ffn1: Tensor | None = None, tap_modules: tuple[str, ...] = ()):
        taps = {}
        h = self.ffn1(x, ctx, v=v_ffn1)
        if "ffn1_out" in tap_modules:
            taps["ffn1_out"] = h
        h = self.conv1(h, ctx)
        if "conv1_out" in tap_modules:
            taps["conv1_out"] = h
        hook = None
        if v_mhsa is not None:
            spec, params = integration

            def hook(z, _spec=spec, _params=params):
                if "mhsa_in" in tap_modules:
                    taps["mhsa_in"] = z
                return apply_integration(z, v_mhsa, _spec, _params)
        elif "mhsa_in" in tap_modules:
            def hook(z):
                taps["mhsa_in"] = z
                return z
        h = self.mhsa(h, ctx, v_hook=hook)
        if "mhsa_out" in tap_modules:
            taps["mhsa_out"] = h
        h = self.conv2(h, ctx)
        if "conv2_out" in tap_modules:
            taps["conv2_out"] = h
        h = self.ffn2(h, ctx)
        if "ffn2_out" in tap_modules:
            taps["ffn2_out"] = h
        return self.ln_final(h), taps


class VggFrontend(Module):
    """Two 3x3 convs; the first strides time by the downsample factor and
    frequency by 2, then the feature map is flattened into att_dim."""

    def __init__(self, config: ModelConfig, rng, dtype):
        c1, c2 = config.frontend_channels
        self.k1 = uniform_init(rng, (3, 3, 1, c1), 9, dtype)
        self.b1 = zeros_param((c1,), dtype)
        self.k2 = uniform_init(rng, (3, 3, c1, c2), 9 * c1, dtype)
        self.b2 = zeros_param((c2,), dtype)
        self.stride_t = config.time_downsample
        f_out = -(-config.feature_dim // 2)
        self.proj = Linear(c2 * f_out, config.att_dim, rng, dtype)

    def __call__(self, features: Tensor) -> Tensor:
        x = T.reshape(features, features.shape + (1,))
        h = T.conv2d(x, self.k1, stride_t=self.stride_t, stride_f=2)
        h = T.relu(T.add(h, T.broadcast_to(T.reshape(self.b1, (1, 1, -1)), h.shape)))
        h = T.conv2d(h, self.k2, stride_t=1, stride_f=1)
        h = T.relu(T.add(h, T.broadcast_to(T.reshape(self.b2, (1, 1, -1)), h.shape)))
        t = h.shape[0]
        return self.proj(T.reshape(h, (t, -1)))


class ConformerAM(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32, integration_init: str = "warm_start"):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        spec = config.integration
        d = config.att_dim
        self.frontend = VggFrontend(config, rng, dtype)
        blocks = []
        for i in range(1, config.num_blocks + 1):
            mhsa_cd = ffn1_cd = 0
            if spec and spec.method == "concat":
                if i in spec.blocks:
                    mhsa_cd = spec.embedding_dim
                if 0 in spec.blocks and i == 1:
                    ffn1_cd = spec.embedding_dim
            blocks.append(ConformerBlock(config, rng, dtype,
                                         mhsa_concat_dim=mhsa_cd, ffn1_concat_dim=ffn1_cd))
        self.blocks = blocks
        self.up_kernel = uniform_init(rng, (config.time_downsample, d), config.time_downsample, dtype)
        self.out = Linear(d, config.num_output_classes, rng, dtype)
        self.integrations = {}
        if spec and spec.method != "concat":
            self.integrations = {b: IntegrationParams(spec.method, d, spec.embedding_dim,
                                                      dtype, rng, integration_init)
                                 for b in spec.blocks}

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        for b, mod in sorted(self.integrations.items()):
            yield from mod.named_parameters(f"{prefix}integration.{b}.")

    def forward(self, features: Tensor, embedding=None, ctx=None,
                taps: tuple[BlockTapPoint, ...] = ()):
        """Features [T, F] to logits [T, classes], plus requested tap tensors."""
        spec = self.config.integration
        if embedding is not None and spec is None:
            raise ConfigurationError("got a speaker embedding but no integration is configured; "
                                     "refusing to ignore it")
        if spec is not None and embedding is None:
            raise UsageError("integration is configured; a speaker embedding is required")
        validate_taps(taps, self.config)
        v = None
        if embedding is not None:
            v = embedding if isinstance(embedding, Tensor) else Tensor(np.asarray(embedding))
            if v.shape != (spec.embedding_dim,):
                raise DimensionError(f"embedding shape {v.shape} vs spec dim {spec.embedding_dim}")
            v = v.astype(self.up_kernel.dtype)

        n_in = features.shape[0]
        x = self.frontend(features)
        tap_out = {}
        if spec and 0 in spec.blocks and spec.method != "concat":
            x = apply_integration(x, v, spec, self.integrations[0])
        by_block = {}
        for tap in taps:
            if tap.block_index == 0:
                tap_out[tap.key()] = x
            else:
                by_block.setdefault(tap.block_index, []).append(tap)
        for i, block in enumerate(self.blocks, start=1):
            v_mhsa = v if (spec and i in spec.blocks) else None
            v_ffn1 = v if (spec and spec.method == "concat" and 0 in spec.blocks and i == 1) else None
            wanted = tuple(t.module for t in by_block.get(i, ()) if t.module)
            params = self.integrations.get(i) if spec and spec.method != "concat" else None
            x, module_taps = block(x, ctx, v_mhsa=v_mhsa,
                                   integration=(spec, params) if v_mhsa is not None else None,
                                   v_ffn1=v_ffn1, tap_modules=wanted)
            for t in by_block.get(i, ()):
                tap_out[t.key()] = x if t.module is None else module_taps[t.module]
        up = T.transposed_conv1d(x, self.up_kernel, self.config.time_downsample)
        up = T.narrow(up, 0, 0, n_in)
        return self.out(up), tap_out

    def load_warm_start(self, state: dict[str, np.ndarray]):
        """Load a speaker-independent checkpoint into this (possibly
        integration-enabled) model. Widened projections take the pretrained
        rows in their leading slice; the freshly added rows stay at their
        identity-preserving init, so the first forward pass reproduces the
        pretrained outputs exactly."""
        own = dict(self.named_parameters())
        loaded = set()
        for name, p in own.items():
            if name.startswith("integration."):
                continue  # keep warm-start init
            if name not in state:
                raise ConfigurationError(f"pretrained checkpoint lacks parameter {name}")
            arr = state[name]
            if arr.shape == p.shape:
                p.data = arr.astype(p.dtype)
            elif arr.ndim == p.data.ndim and p.shape[0] > arr.shape[0] \
                    and p.shape[1:] == arr.shape[1:]:
                p.data[: arr.shape[0]] = arr.astype(p.dtype)
                p.data[arr.shape[0]:] = 0.0
            else:
                raise DimensionError(f"param {name}: checkpoint {arr.shape} vs model {p.shape}")
            loaded.add(name)
        unused = set(state) - loaded
        if unused:
            raise ConfigurationError(f"checkpoint parameters not consumed: {sorted(unused)}")


class BlstmAM(Module):
    """Stack of bidirectional LSTM layers at full frame rate, linear output."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        half = config.blstm_hidden // 2
        self.layers = []
        d_in = config.feature_dim
        for _ in range(config.blstm_layers):
            pair = []
            for _direction in range(2):
                layer = Module()
                layer.W = uniform_init(rng, (d_in, 4 * half), d_in, dtype)
                layer.R = uniform_init(rng, (half, 4 * half), half, dtype)
                layer.b = zeros_param((4 * half,), dtype)
                pair.append(layer)
            self.layers.append(pair)
            d_in = config.blstm_hidden
        self.out = Linear(config.blstm_hidden, config.num_output_classes, rng, dtype)

    def forward(self, features: Tensor, embedding=None, ctx=None,
                taps: tuple[BlockTapPoint, ...] = ()):
        if embedding is not None:
            raise ConfigurationError("the blstm model does not take speaker embeddings")
        validate_taps(taps, self.config)
        wanted = {t.block_index: t for t in taps}
        x = features
        tap_out = {}
        for i, (fwd, bwd) in enumerate(self.layers, start=1):
            x = T.lstm_layer(x, ((fwd.W, fwd.R, fwd.b), (bwd.W, bwd.R, bwd.b)), "bidirectional")
            if i in wanted:
                tap_out[wanted[i].key()] = x
        return self.out(x), tap_out


def build_model(config: ModelConfig, rng=None, dtype=np.float32, integration_init="warm_start"):
    if config.model_kind == "blstm":
        return BlstmAM(config, rng, dtype)
    return ConformerAM(config, rng, dtype, integration_init)


def am_forward(model, features: Tensor, embedding=None, ctx=None, taps=()):
    """Uniform forward entry point shared by both model kinds."""
    return model.forward(features, embedding=embedding, ctx=ctx, taps=taps)


# -- parameter accounting ------------------------------------------------------


def count_parameters(config: ModelConfig) -> int:
    """Closed-form trainable-scalar count; must equal the built model exactly.

    Conformer, with d = att_dim, f = ffn_dim, k = conv_kernel, per block:
      two feed-forwards   2 * (2d + (d f + f) + (f d + d))
      two conv modules    2 * (2d + (2 d^2 + 2d) + k d + 2d + (d^2 + d))
      attention           2d + 4 d^2 + 3d (key proj has no bias)
                          [+ d^2 + 2d when relative pos]
      final norm          2d
    Plus front-end (two 3x3 convs and the flatten projection), the upsample
    kernel (downsample * d), the output layer, and integration parameters.
    """
    if config.model_kind == "blstm":
        half = config.blstm_hidden // 2
        total, d_in = 0, config.feature_dim
        for _ in range(config.blstm_layers):
            total += 2 * (d_in * 4 * half + half * 4 * half + 4 * half)
            d_in = config.blstm_hidden
        return total + config.blstm_hidden * config.num_output_classes + config.num_output_classes

    d, f, k = config.att_dim, config.ffn_dim, config.conv_kernel
    ffn = 2 * d + (d * f + f) + (f * d + d)
    conv = 2 * d + (d * 2 * d + 2 * d) + k * d + 2 * d + (d * d + d)
    mhsa = 2 * d + 4 * d * d + 3 * d
    if config.pos_encoding == "relative":
        mhsa += d * d + 2 * d
    block = 2 * ffn + 2 * conv + mhsa + 2 * d
    c1, c2 = config.frontend_channels
    f_out = -(-config.feature_dim // 2)
    frontend = (9 * c1 + c1) + (9 * c1 * c2 + c2) + (c2 * f_out * d + d)
    total = frontend + config.num_blocks * block + config.time_downsample * d \
        + d * config.num_output_classes + config.num_output_classes
    spec = config.integration
    if spec is not None:
        from .integration import added_param_count
        total += added_param_count(spec, d, f)
    return total


# -- checkpoint io --------------------------------------------------------------

CKPT_MAGIC = b"CSAT"
CKPT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, state: dict[str, np.ndarray]):
    """Versioned binary: magic, version, canonical config JSON, then named
    float32 tensors in sorted-name order (little endian)."""
    blob = config.canonical_json().encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        names = sorted(state)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(state[name], dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise UsageError(f"{path} is not a checkpoint file")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise UsageError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_dict(json.loads(fh.read(blob_len).decode()))
        (n,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(n):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            state[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).copy()
    return config, state


def load_model(path, dtype=np.float32):
    config, state = load_checkpoint(path)
    model = build_model(config, rng=np.random.default_rng(0), dtype=dtype)
    model.load_state(state)
    return model, config
