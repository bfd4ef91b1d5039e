"""Per-utterance speaker vectors from three sources.

* synthetic: seeded per-speaker prototype plus per-utterance channel noise,
  the controlled stand-in used by most experiments
* ivector_lite: diagonal-GMM background model, relevance-MAP adapted mean
  supervector, linear projection to the target dimension
* xvector_lite: small dilated-conv speaker classifier; the embedding is its
  bottleneck activation

None of the sources length-normalizes its output; keeping the raw scale is
deliberate and downstream code must not re-scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .nn import Linear, Module, uniform_init, zeros_param
from .tensor import Tensor

SOURCES = ("synthetic", "ivector_lite", "xvector_lite")


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    speaker_id: str
    utterance_id: str
    source: str


def write_embeddings(path, embeddings: list[SpeakerEmbedding]):
    """JSON-lines, one utterance per row, vectors at full decimal precision."""
    with open(path, "w") as fh:
        for e in sorted(embeddings, key=lambda e: e.utterance_id):
            fh.write(json.dumps({"utterance_id": e.utterance_id, "speaker_id": e.speaker_id,
                                 "source": e.source, "dim": int(e.vector.size),
                                 "vector": [float(x) for x in e.vector]}) + "\n")


def read_embeddings(path) -> dict[str, SpeakerEmbedding]:
    out = {}
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            out[d["utterance_id"]] = SpeakerEmbedding(
                vector=np.asarray(d["vector"], dtype=np.float64),
                speaker_id=d["speaker_id"], utterance_id=d["utterance_id"], source=d["source"])
    return out


# -- synthetic ----------------------------------------------------------------


def synth_embeddings(utterances, dim: int, noise_std: float, seed: int):
    """Prototype per speaker, prototype + channel noise per utterance.

    ``utterances`` is any iterable of objects with utterance_id and
    speaker_id. Returns (speaker -> prototype, utterance_id -> embedding).
    """
    if dim < 1:
        raise UsageError("embedding dim must be >= 1")
    rng = np.random.default_rng(seed)
    speakers = sorted({u.speaker_id for u in utterances})
    protos = {s: rng.standard_normal(dim) for s in speakers}
    embs = {}
    for u in sorted(utterances, key=lambda u: u.utterance_id):
        noise = rng.standard_normal(dim) * noise_std if noise_std > 0 else 0.0
        embs[u.utterance_id] = SpeakerEmbedding(vector=protos[u.speaker_id] + noise,
                                                speaker_id=u.speaker_id,
                                                utterance_id=u.utterance_id,
                                                source="synthetic")
    return protos, embs


# -- gmm background model -------------------------------------------------------


@dataclass
class GmmUbm:
    n_components: int
    weights: np.ndarray   # [M]
    means: np.ndarray     # [M, F]
    diag_vars: np.ndarray  # [M, F]
    var_floor: float


def _log_gauss(frames: np.ndarray, ubm_means, ubm_vars, ubm_weights) -> np.ndarray:
    """Per-frame per-component log p(x, m); frames [N, F] -> [N, M]."""
    F = frames.shape[1]
    const = -0.5 * (F * np.log(2 * np.pi) + np.log(ubm_vars).sum(axis=1))  # [M]
    diff = frames[:, None, :] - ubm_means[None, :, :]
    quad = -0.5 * (diff * diff / ubm_vars[None, :, :]).sum(axis=2)
    return np.log(ubm_weights)[None, :] + const[None, :] + quad


def _kmeanspp_centers(frames: np.ndarray, m: int, rng) -> np.ndarray:
    centers = [frames[rng.integers(len(frames))]]
    for _ in range(m - 1):
        d2 = np.min([((frames - c) ** 2).sum(axis=1) for c in centers], axis=0)
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(len(frames), 1.0 / len(frames))
        centers.append(frames[rng.choice(len(frames), p=probs)])
    return np.stack(centers)


def train_ubm(frames: np.ndarray, n_components: int, iters: int = 20, seed: int = 0,
              floor_scale: float = 1e-3) -> tuple[GmmUbm, list[float]]:
    """Diagonal-covariance GMM via EM; returns the model and the per-iteration
    mean log-likelihood trace (non-decreasing up to tiny numerical slack)."""
    frames = np.asarray(frames, dtype=np.float64)
    if n_components < 1:
        raise UsageError("need at least one component")
    if frames.ndim != 2 or len(frames) == 0:
        raise UsageError("frames must be a non-empty [N, F] array")
    if len(frames) < n_components:
        raise UsageError(f"{len(frames)} frames cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    var_floor = floor_scale * float(frames.var(axis=0).mean())
    var_floor = max(var_floor, 1e-12)
    means = _kmeanspp_centers(frames, n_components, rng)
    variances = np.tile(np.maximum(frames.var(axis=0), var_floor), (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)
    trace = []
    for _ in range(iters):
        lj = _log_gauss(frames, means, variances, weights)       # [N, M]
        mx = lj.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(lj - mx).sum(axis=1))
        trace.append(float(lse.mean()))
        resp = np.exp(lj - lse[:, None])                          # [N, M]
        nk = resp.sum(axis=0) + 1e-12
        means = (resp.T @ frames) / nk[:, None]
        sq = (resp.T @ (frames * frames)) / nk[:, None]
        variances = np.maximum(sq - means * means, var_floor)
        weights = nk / nk.sum()
    return GmmUbm(n_components, weights, means, variances, var_floor), trace


def map_adapt_supervector(ubm: GmmUbm, frames: np.ndarray, relevance: float = 16.0) -> np.ndarray:
    """Relevance-MAP adapted means stacked into one [M*F] vector.

    alpha_m = n_m / (n_m + r); adapted mean interpolates the utterance
    statistics with the background mean, so an empty-ish component stays put.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or len(frames) == 0:
        raise UsageError("need at least one frame")
    lj = _log_gauss(frames, ubm.means, ubm.diag_vars, ubm.weights)
    mx = lj.max(axis=1, keepdims=True)
    resp = np.exp(lj - mx)
    resp /= resp.sum(axis=1, keepdims=True)
    nk = resp.sum(axis=0)                                   # [M]
    xbar = (resp.T @ frames) / np.maximum(nk, 1e-12)[:, None]
    alpha = (nk / (nk + relevance))[:, None]
    adapted = alpha * xbar + (1.0 - alpha) * ubm.means
    return adapted.reshape(-1)


# -- linear projection -----------------------------------------------------------


@dataclass
class Projection:
    mean: np.ndarray   # [dim]
    rows: np.ndarray   # [target_dim, dim], orthonormal

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.rows @ (np.asarray(x, dtype=np.float64) - self.mean)


def project_fit(vectors: np.ndarray, labels=None, target_dim: int = 64) -> Projection:
    """PCA projection; with labels, discriminant directions in whitened space.

    The returned rows are orthonormalized so reconstruction is well defined
    either way. Deterministic: eigen decompositions of symmetric matrices
    with a fixed sign convention.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n, dim = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    rank = int((evals > max(evals[0], 1e-30) * 1e-10).sum())
    if target_dim > rank:
        raise DimensionError(f"target_dim {target_dim} exceeds data rank {rank}")
    if labels is None:
        rows = evecs[:, :target_dim].T
    else:
        labels = np.asarray(labels)
        p = rank
        white = evecs[:, :p] / np.sqrt(evals[:p])            # [dim, p]
        Z = Xc @ white                                        # whitened coords
        classes = np.unique(labels)
        cmeans = np.stack([Z[labels == c].mean(axis=0) for c in classes])
        cmeans -= cmeans.mean(axis=0)
        scatter = cmeans.T @ cmeans
        se, sv = np.linalg.eigh(scatter)
        directions = white @ sv[:, np.argsort(se)[::-1][:target_dim]]  # back to input space
        q, _ = np.linalg.qr(directions)
        rows = q.T
    # fixed sign: largest-magnitude entry of each row is positive
    for r in rows:
        i = np.argmax(np.abs(r))
        if r[i] < 0:
            r *= -1.0
    return Projection(mean=mean, rows=rows)


def extract_ivector_lite(ubm: GmmUbm, utt, projection: Projection,
                         relevance: float = 16.0) -> SpeakerEmbedding:
    sv = map_adapt_supervector(ubm, utt.features, relevance)
    return SpeakerEmbedding(vector=projection(sv), speaker_id=utt.speaker_id,
                            utterance_id=utt.utterance_id, source="ivector_lite")


def ivector_lite_pipeline(utterances, n_components: int, target_dim: int,
                          relevance: float = 16.0, seed: int = 0,
                          em_iters: int = 15) -> dict[str, SpeakerEmbedding]:
    """Background model on pooled train frames, projection on train
    supervectors, embeddings for every utterance."""
    train = [u for u in utterances if u.split == "train"]
    if not train:
        raise UsageError("no train utterances to fit the background model on")
    pooled = np.concatenate([u.features for u in train], axis=0)
    ubm, _ = train_ubm(pooled, n_components, seed=seed)
    svs = np.stack([map_adapt_supervector(ubm, u.features, relevance) for u in train])
    proj = project_fit(svs, labels=np.asarray([u.speaker_id for u in train]),
                       target_dim=target_dim)
    return {u.utterance_id: extract_ivector_lite(ubm, u, proj, relevance)
            for u in sorted(utterances, key=lambda u: u.utterance_id)}


# -- attentive pooling and the neural extractor -----------------------------------


def attentive_pool(frames: Tensor, proj_W: Tensor, proj_b: Tensor, score_u: Tensor) -> Tensor:
    """softmax(u . tanh(W h_t + b)) weighted average of the frames."""
    n, d = frames.shape
    scores = T.matmul(T.tanh(T.linear(frames, proj_W, proj_b)),
                      T.reshape(score_u, (-1, 1)))
    alpha = T.softmax(T.reshape(scores, (1, n)), axis=-1)
    return T.reshape(T.matmul(alpha, frames), (d,))


class AttentivePool(Module):
    def __init__(self, d: int, rng, dtype):
        self.W = uniform_init(rng, (d, d), d, dtype)
        self.b = zeros_param((d,), dtype)
        self.u = uniform_init(rng, (d,), d, dtype)

    def __call__(self, frames: Tensor) -> Tensor:
        return attentive_pool(frames, self.W, self.b, self.u)


class MeanPool(Module):
    def __call__(self, frames: Tensor) -> Tensor:
        return T.reduce_mean(frames, axis=0)


class XvectorLite(Module):
    """Dilated 1-D conv stack, pooling, bottleneck, speaker softmax."""

    def __init__(self, feature_dim: int, n_speakers: int, emb_dim: int,
                 rng, dtype=np.float32, channels: int = 48, pooling: str = "attentive"):
        self.conv1 = uniform_init(rng, (5, feature_dim, channels), 5 * feature_dim, dtype)
        self.conv2 = uniform_init(rng, (3, channels, channels), 3 * channels, dtype)
        self.conv3 = uniform_init(rng, (3, channels, channels), 3 * channels, dtype)
        self.pool = AttentivePool(channels, rng, dtype) if pooling == "attentive" else MeanPool()
        self.bottleneck = Linear(channels, emb_dim, rng, dtype)
        self.head = Linear(emb_dim, n_speakers, rng, dtype)
        self.pooling = pooling

    def embed(self, features: Tensor) -> Tensor:
        h = T.relu(T.conv1d(features, self.conv1, dilation=1))
        h = T.relu(T.conv1d(h, self.conv2, dilation=2))
        h = T.relu(T.conv1d(h, self.conv3, dilation=3))
        pooled = self.pool(h)
        return self.bottleneck(T.reshape(pooled, (1, -1)))

    def logits(self, features: Tensor) -> Tensor:
        return self.head(self.embed(features))


def train_xvector_lite(corpus, emb_dim: int, seed: int = 0, epochs: int = 8,
                       lr: float = 1e-3, pooling: str = "attentive",
                       channels: int = 48, dtype=np.float32):
    """Cross-entropy speaker classifier on the train split; returns the
    trained extractor and the ordered speaker list."""
    from .training import AdamOptimizer  # local import, no cycle at module load
    train = [u for u in corpus.utterances if u.split == "train"]
    speakers = sorted({u.speaker_id for u in train})
    if len(speakers) < 2:
        raise UsageError("speaker classifier needs at least 2 speakers")
    spk_index = {s: i for i, s in enumerate(speakers)}
    rng = np.random.default_rng(seed)
    model = XvectorLite(corpus.feature_dim, len(speakers), emb_dim, rng,
                        dtype=dtype, pooling=pooling, channels=channels)
    opt = AdamOptimizer(model.parameters(), lr=lr)
    order = np.arange(len(train))
    for _ in range(epochs):
        rng.shuffle(order)
        for i in order:
            u = train[i]
            logits = model.logits(Tensor(u.features.astype(dtype)))
            loss = T.cross_entropy(logits, np.array([spk_index[u.speaker_id]]))
            model.zero_grads()
            loss.backward()
            opt.step()
    return model, speakers


def extract_xvector(model: XvectorLite, utt, dtype=np.float32) -> SpeakerEmbedding:
    vec = model.embed(Tensor(utt.features.astype(dtype))).data.reshape(-1)
    return SpeakerEmbedding(vector=vec.astype(np.float64), speaker_id=utt.speaker_id,
                            utterance_id=utt.utterance_id, source="xvector_lite")


def xvector_accuracy(model: XvectorLite, utterances, speakers, dtype=np.float32) -> float:
    """Top-1 speaker classification accuracy of the softmax head."""
    spk_index = {s: i for i, s in enumerate(speakers)}
    hits = 0
    for u in utterances:
        logits = model.logits(Tensor(u.features.astype(dtype)))
        hits += int(np.argmax(logits.data) == spk_index[u.speaker_id])
    return hits / len(utterances)
