"""Two-stream fusion MLP with hand-written backprop and Adam.

One encoder per modality maps raw features to an embedding; the fusion
head consumes the concatenated embeddings, and its hidden activation is
the fused class-level feature that all confusion machinery consumes.

Checkpoint layout DICM (little-endian):
    magic    4 bytes  b"DICM"
    version  u32      currently 1
    3 groups (audio encoder, video encoder, fusion head), each:
        u32 count, then count u64 layer sizes
    parameters as f64 in declaration order (W then b per layer, audio
    encoder first, then video encoder, then fusion head)
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    BadMagicError,
    CacheError,
    DimensionError,
    TruncatedFileError,
    VersionMismatchError,
)
from .numeric import make_rng

CHECKPOINT_MAGIC = b"DICM"
CHECKPOINT_VERSION = 1


class MlpEncoder:
    """Fully connected stack: rectifier on hidden layers, identity output.

    Weights start uniform in +/- sqrt(6 / (fan_in + fan_out)), biases at
    zero.
    """

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None):
        self.layer_sizes = list(layer_sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out)) if rng is not None \
                else np.zeros((fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray):
        """Returns (output, cache); the cache holds every pre-activation
        and activation needed for an exact backward pass."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.layer_sizes[0]:
            raise DimensionError(
                f"input dim {x.shape[1]}, encoder expects {self.layer_sizes[0]}"
            )
        activations = [x]
        pre = []
        h = x
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if layer < self.num_layers - 1 else z
            activations.append(h)
        return h, {"activations": activations, "pre": pre}

    def backward(self, cache, d_out: np.ndarray, hidden_grads: dict | None = None):
        """Gradients for every weight/bias plus the input gradient.

        hidden_grads maps a hidden-layer index (0-based, post-activation)
        to an extra upstream gradient injected at that activation.
        """
        activations, pre = cache["activations"], cache["pre"]
        d = np.asarray(d_out, dtype=np.float64)
        grads_w = [None] * self.num_layers
        grads_b = [None] * self.num_layers
        for layer in range(self.num_layers - 1, -1, -1):
            grads_w[layer] = activations[layer].T @ d
            grads_b[layer] = d.sum(axis=0)
            d = d @ self.weights[layer].T
            if layer > 0:
                if hidden_grads and (layer - 1) in hidden_grads:
                    d = d + hidden_grads[layer - 1]
                d = d * (pre[layer - 1] > 0)
        return grads_w, grads_b, d

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


class FusionModel:
    """Audio encoder + video encoder + fusion head.

    The fusion head is [2h, fusion_hidden, num_classes]; its hidden
    activation (post-rectifier) is the fused feature tap.
    """

    def __init__(self, audio_dim, video_dim, embed_dim=64, encoder_hidden=64,
                 fusion_hidden=64, num_classes=2, seed=0):
        rng = make_rng(seed)
        self.audio_encoder = MlpEncoder(
            [audio_dim, encoder_hidden, encoder_hidden, embed_dim], rng)
        self.video_encoder = MlpEncoder(
            [video_dim, encoder_hidden, encoder_hidden, embed_dim], rng)
        self.fusion_head = MlpEncoder(
            [2 * embed_dim, fusion_hidden, num_classes], rng)
        self.fused_tap_layer = 0  # hidden layer of the fusion head
        self.version = 0  # bumped on every parameter update

    @property
    def embed_dim(self) -> int:
        return self.audio_encoder.layer_sizes[-1]

    @property
    def fused_dim(self) -> int:
        return self.fusion_head.layer_sizes[1]

    @property
    def num_classes(self) -> int:
        return self.fusion_head.layer_sizes[-1]

    def encoders(self):
        return [self.audio_encoder, self.video_encoder, self.fusion_head]

    def parameters(self):
        params = []
        for enc in self.encoders():
            params.extend(enc.parameters())
        return params

    def forward(self, audio: np.ndarray, video: np.ndarray):
        if audio.shape[0] != video.shape[0]:
            raise DimensionError("audio and video batches must have equal rows")
        audio_emb, a_cache = self.audio_encoder.forward(audio)
        video_emb, v_cache = self.video_encoder.forward(video)
        logits, f_cache = self.fusion_head.forward(
            np.concatenate([audio_emb, video_emb], axis=1))
        fused = f_cache["activations"][self.fused_tap_layer + 1]
        return ForwardCache(
            audio_emb=audio_emb, video_emb=video_emb, fused=fused, logits=logits,
            audio_cache=a_cache, video_cache=v_cache, fusion_cache=f_cache,
            model_version=self.version,
        )

    def backward(self, cache: "ForwardCache", d_logits: np.ndarray,
                 d_fused=None, d_audio_emb=None, d_video_emb=None):
        """Exact parameter gradients for upstream gradients injected at the
        logits, the fused tap, and/or the modality embeddings. Returns
        (gradient list aligned with parameters(), d_audio_in, d_video_in).
        """
        if cache.model_version != self.version:
            raise CacheError("forward cache is stale: parameters changed since")
        hidden = {self.fused_tap_layer: d_fused} if d_fused is not None else None
        fw, fb, d_concat = self.fusion_head.backward(
            cache.fusion_cache, d_logits, hidden)
        h = self.embed_dim
        d_a = d_concat[:, :h].copy()
        d_v = d_concat[:, h:].copy()
        if d_audio_emb is not None:
            d_a += d_audio_emb
        if d_video_emb is not None:
            d_v += d_video_emb
        aw, ab, d_audio_in = self.audio_encoder.backward(cache.audio_cache, d_a)
        vw, vb, d_video_in = self.video_encoder.backward(cache.video_cache, d_v)
        grads = []
        for ws, bs in ((aw, ab), (vw, vb), (fw, fb)):
            for w, b in zip(ws, bs):
                grads.append(w)
                grads.append(b)
        return grads, d_audio_in, d_video_in

    def reset_classifier(self, num_classes: int, seed: int = 0):
        """Swap the final fusion layer for a freshly initialized one with a
        different class count (fine-tuning after pseudo-label pretraining)."""
        rng = make_rng(seed)
        fan_in = self.fusion_head.layer_sizes[-2]
        limit = np.sqrt(6.0 / (fan_in + num_classes))
        self.fusion_head.layer_sizes[-1] = num_classes
        self.fusion_head.weights[-1] = rng.uniform(
            -limit, limit, size=(fan_in, num_classes))
        self.fusion_head.biases[-1] = np.zeros(num_classes)
        self.version += 1


@dataclass
class ForwardCache:
    audio_emb: np.ndarray
    video_emb: np.ndarray
    fused: np.ndarray
    logits: np.ndarray
    audio_cache: dict
    video_cache: dict
    fusion_cache: dict
    model_version: int


@dataclass
class AdamState:
    """First/second moments per parameter with bias-corrected updates."""

    shapes: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]


def adam_step(params: list, grads: list, state: AdamState) -> AdamState:
    """In-place Adam update over a parameter list."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("parameter/gradient/state lengths disagree")
    state.step_count += 1
    t = state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} vs parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def save_checkpoint(model: FusionModel, path):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for enc in model.encoders():
        chunks.append(struct.pack("<I", len(enc.layer_sizes)))
        chunks.append(struct.pack(f"<{len(enc.layer_sizes)}Q", *enc.layer_sizes))
    for p in model.parameters():
        chunks.append(np.asarray(p, dtype="<f8").tobytes())
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.fspath(path)) or ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> FusionModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a DICM checkpoint")
    if len(blob) < 8:
        raise TruncatedFileError(f"{path}: header truncated")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    offset = 8
    tables = []
    for _ in range(3):
        if offset + 4 > len(blob):
            raise TruncatedFileError(f"{path}: layer table truncated")
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + 8 * count > len(blob):
            raise TruncatedFileError(f"{path}: layer table truncated")
        tables.append(list(struct.unpack_from(f"<{count}Q", blob, offset)))
        offset += 8 * count
    audio_sizes, video_sizes, fusion_sizes = tables
    model = FusionModel(
        audio_dim=audio_sizes[0], video_dim=video_sizes[0],
        embed_dim=audio_sizes[-1], encoder_hidden=audio_sizes[1],
        fusion_hidden=fusion_sizes[1], num_classes=fusion_sizes[-1], seed=0,
    )
    for enc, sizes in zip(model.encoders(), tables):
        if enc.layer_sizes != sizes:
            # irregular stack: rebuild the encoder with the stored sizes
            enc.layer_sizes = sizes
            enc.weights = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
            enc.biases = [np.zeros(b) for b in sizes[1:]]
    for p in model.parameters():
        count = p.size
        if offset + 8 * count > len(blob):
            raise TruncatedFileError(f"{path}: parameter payload truncated")
        p[...] = np.frombuffer(blob, dtype="<f8", count=count,
                               offset=offset).reshape(p.shape)
        offset += 8 * count
    if offset != len(blob):
        raise TruncatedFileError(f"{path}: {len(blob) - offset} trailing bytes")
    return model
