"""Language-guided multi-scene pose regression network.

The forward path: image patches and caption tokens are embedded with scaled
sinusoidal position tables, fused by scaled dot-product similarity (language
context is added to the visual tokens), run through a stack of pre-LN
decoder layers (a single-head attention sublayer followed by a multi-head
one, residual connections around each), passed through a final GELU
feedforward block, and read out by mean-pooling the visual token rows into
a scene classifier and K scene-specific pose heads emitting position plus a
raw quaternion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nm
from .numerics import Tensor, rng_from_seed

ALLOWED_DECODER_LAYERS = (2, 4, 6, 8)

ALPHA_INIT = -4.0
BETA_INIT = -2.0

_INIT_STD = 0.02


class ModelError(ValueError):
    """Shape or routing violation inside the network."""


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. ``gamma`` is derived: width ** -0.5."""

    channels: int = 3
    height: int = 224
    width: int = 224
    patch: int = 16
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 4
    n_scenes: int = 7
    vocab_size: int = 64
    max_caption_len: int = 32
    dropout: float = 0.5

    def __post_init__(self):
        for key in ("channels", "height", "width", "patch", "d_model",
                    "n_heads", "n_scenes", "vocab_size", "max_caption_len"):
            v = getattr(self, key)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(key, f"must be a positive integer, got {v!r}")
        if self.n_layers not in ALLOWED_DECODER_LAYERS:
            raise ConfigError(
                "n_layers", f"must be one of {ALLOWED_DECODER_LAYERS}, got {self.n_layers}"
            )
        if self.d_model % self.n_heads:
            raise ConfigError(
                "d_model", f"{self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.d_model % 4:
            raise ConfigError(
                "d_model", f"{self.d_model} must be divisible by 4 for the 2-D position table"
            )
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                "patch", f"{self.height}x{self.width} input is not divisible by patch={self.patch}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", f"must be in [0, 1), got {self.dropout}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size", "needs at least the reserved pad/unk ids")

    @property
    def gamma(self) -> float:
        """Positional scale keeping the encoding subordinate to content."""
        return self.width ** -0.5

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def n_visual_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    """Classic fixed sin/cos position table; every entry lies in [-1, 1]."""
    if dim % 2:
        raise ModelError(f"sinusoid table needs an even dim, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    frels = np.arange(dim // 2, dtype=np.float64)[None, :] * (2.0 / dim)
    angles = pos / (10000.0 ** frels)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def visual_position_table(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Separable 2-D table: first half of the dims encode the token row,
    second half the column, in row-major token order."""
    half = dim // 2
    rows = sinusoid_table(grid_h, half)
    cols = sinusoid_table(grid_w, dim - half)
    table = np.empty((grid_h * grid_w, dim))
    table[:, :half] = np.repeat(rows, grid_w, axis=0)
    table[:, half:] = np.tile(cols, (grid_h, 1))
    return table


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[C, H, W] image to [n_tokens, C * patch * patch] rows, row-major grid."""
    c, h, w = image.shape
    gh, gw = h // patch, w // patch
    return (
        image.reshape(c, gh, patch, gw, patch)
        .transpose(1, 3, 0, 2, 4)
        .reshape(gh * gw, c * patch * patch)
    )


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class LayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    sa: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    mha: AttentionParams


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ModelParams:
    """Every learnable tensor plus the fixed position tables.

    The position tables are pure functions of the config and therefore not
    parameters; they are rebuilt on checkpoint load rather than stored.
    """

    conv_w: Tensor
    conv_b: Tensor
    token_embedding: Tensor
    layers: list[LayerParams]
    ffn_ln_gain: Tensor
    ffn_ln_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    cls_w: Tensor
    cls_b: Tensor
    heads: list[HeadParams]
    alpha: Tensor
    beta: Tensor
    pos_visual: np.ndarray = field(repr=False, default=None)
    pos_text: np.ndarray = field(repr=False, default=None)

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        """Seeded initialization: truncated normal (clipped at two standard
        deviations, std 0.02) for projections, ones/zeros for layer norms,
        zeros for biases."""
        rng = rng_from_seed(seed, 0xD0E5)

        def w(name, *shape):
            return Tensor(np.clip(rng.standard_normal(shape), -2.0, 2.0) * _INIT_STD, name)

        def zeros(name, *shape):
            return Tensor(np.zeros(shape), name)

        def ones(name, *shape):
            return Tensor(np.ones(shape), name)

        d = config.d_model

        def attention(prefix):
            return AttentionParams(
                wq=w(f"{prefix}.wq", d, d), bq=zeros(f"{prefix}.bq", d),
                wk=w(f"{prefix}.wk", d, d), bk=zeros(f"{prefix}.bk", d),
                wv=w(f"{prefix}.wv", d, d), bv=zeros(f"{prefix}.bv", d),
                wo=w(f"{prefix}.wo", d, d), bo=zeros(f"{prefix}.bo", d),
            )

        layers = [
            LayerParams(
                ln1_gain=ones(f"layers.{i}.ln1.gain", d),
                ln1_bias=zeros(f"layers.{i}.ln1.bias", d),
                sa=attention(f"layers.{i}.sa"),
                ln2_gain=ones(f"layers.{i}.ln2.gain", d),
                ln2_bias=zeros(f"layers.{i}.ln2.bias", d),
                mha=attention(f"layers.{i}.mha"),
            )
            for i in range(config.n_layers)
        ]
        # quaternion bias starts at identity so the raw output has unit-scale
        # norm from the first step; normalizing a near-zero vector would make
        # early orientation gradients explode
        head_bias = np.zeros(7)
        head_bias[3] = 1.0
        heads = [
            HeadParams(
                w1=w(f"heads.{k}.w1", d, d), b1=zeros(f"heads.{k}.b1", d),
                w2=w(f"heads.{k}.w2", d, 7), b2=Tensor(head_bias.copy(), f"heads.{k}.b2"),
            )
            for k in range(config.n_scenes)
        ]
        gh, gw = config.grid
        return cls(
            conv_w=w("conv.w", config.patch * config.patch * config.channels, d),
            conv_b=zeros("conv.b", d),
            token_embedding=w("token_embedding", config.vocab_size, d),
            layers=layers,
            ffn_ln_gain=ones("ffn.ln.gain", d),
            ffn_ln_bias=zeros("ffn.ln.bias", d),
            ffn_w1=w("ffn.w1", d, 4 * d),
            ffn_b1=zeros("ffn.b1", 4 * d),
            ffn_w2=w("ffn.w2", 4 * d, d),
            ffn_b2=zeros("ffn.b2", d),
            cls_w=w("cls.w", d, config.n_scenes),
            cls_b=zeros("cls.b", config.n_scenes),
            heads=heads,
            alpha=Tensor(np.array(ALPHA_INIT), "alpha"),
            beta=Tensor(np.array(BETA_INIT), "beta"),
            pos_visual=visual_position_table(gh, gw, d),
            pos_text=sinusoid_table(config.max_caption_len, d),
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All learnable tensors in a fixed, documented order."""
        out = [
            ("conv.w", self.conv_w),
            ("conv.b", self.conv_b),
            ("token_embedding", self.token_embedding),
        ]
        for i, layer in enumerate(self.layers):
            out += [
                (f"layers.{i}.ln1.gain", layer.ln1_gain),
                (f"layers.{i}.ln1.bias", layer.ln1_bias),
            ]
            for tag, attn in (("sa", layer.sa), ("mha", layer.mha)):
                if tag == "mha":
                    out += [
                        (f"layers.{i}.ln2.gain", layer.ln2_gain),
                        (f"layers.{i}.ln2.bias", layer.ln2_bias),
                    ]
                out += [
                    (f"layers.{i}.{tag}.wq", attn.wq), (f"layers.{i}.{tag}.bq", attn.bq),
                    (f"layers.{i}.{tag}.wk", attn.wk), (f"layers.{i}.{tag}.bk", attn.bk),
                    (f"layers.{i}.{tag}.wv", attn.wv), (f"layers.{i}.{tag}.bv", attn.bv),
                    (f"layers.{i}.{tag}.wo", attn.wo), (f"layers.{i}.{tag}.bo", attn.bo),
                ]
        out += [
            ("ffn.ln.gain", self.ffn_ln_gain),
            ("ffn.ln.bias", self.ffn_ln_bias),
            ("ffn.w1", self.ffn_w1),
            ("ffn.b1", self.ffn_b1),
            ("ffn.w2", self.ffn_w2),
            ("ffn.b2", self.ffn_b2),
            ("cls.w", self.cls_w),
            ("cls.b", self.cls_b),
        ]
        for k, head in enumerate(self.heads):
            out += [
                (f"heads.{k}.w1", head.w1), (f"heads.{k}.b1", head.b1),
                (f"heads.{k}.w2", head.w2), (f"heads.{k}.b2", head.b2),
            ]
        out += [("alpha", self.alpha), ("beta", self.beta)]
        return out


def parameter_count(config: ModelConfig) -> int:
    """Closed-form learnable parameter count.

    conv (p^2*C*d + d) + embedding (V*d)
    + N * (2*2d layer norms + 2 * 4*(d^2 + d) attention projections)
    + final block (2d + d*4d + 4d + 4d*d + d)
    + classifier (d*K + K) + K pose heads ((d^2 + d) + (7d + 7)) + alpha, beta
    """
    d, k = config.d_model, config.n_scenes
    conv = config.patch ** 2 * config.channels * d + d
    emb = config.vocab_size * d
    per_layer = 2 * (2 * d) + 2 * 4 * (d * d + d)
    ffn = 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    cls = d * k + k
    heads = k * ((d * d + d) + (d * 7 + 7))
    return conv + emb + config.n_layers * per_layer + ffn + cls + heads + 2


@dataclass
class AttentionMaps:
    """Raw attention weights: fusion rows plus per-layer (single-head,
    multi-head) maps, each row a probability distribution over keys."""

    fusion: np.ndarray                      # [n_visual, n_text]
    layers: list[tuple[np.ndarray, np.ndarray]]  # ([1, T, T], [heads, T, T])


@dataclass
class ForwardOutput:
    scene_logits: Tensor                    # [K]
    scene_probs: Tensor                     # [K]
    poses: list[tuple[Tensor, Tensor]]      # per scene: ((3,) position, (4,) raw quaternion)
    selected_scene: int
    attention: AttentionMaps | None = None


def encode_image(image, params: ModelParams, config: ModelConfig) -> Tensor:
    """Strided-convolution patch embedding plus the scaled 2-D position table."""
    image = np.asarray(image, dtype=np.float64)
    expected = (config.channels, config.height, config.width)
    if image.shape != expected:
        raise ModelError(f"image shape {image.shape} != configured {expected}")
    patches = Tensor(patchify(image, config.patch))
    tokens = nm.affine(patches, params.conv_w, params.conv_b)
    return tokens + Tensor(config.gamma * params.pos_visual)


def encode_text(token_ids, params: ModelParams, config: ModelConfig) -> Tensor:
    """Embedding lookup plus the scaled 1-D position table over the actual
    sequence length; no padding is ever introduced."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or not 1 <= ids.size <= config.max_caption_len:
        raise ModelError(
            f"caption must hold 1..{config.max_caption_len} ids, got shape {ids.shape}"
        )
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ModelError(
            f"token id out of vocabulary (size {config.vocab_size}); map unknown "
            f"words to the reserved unknown id first: {ids.tolist()}"
        )
    tokens = nm.gather_rows(params.token_embedding, ids)
    return tokens + Tensor(config.gamma * params.pos_text[: ids.size])


def fuse(visual: Tensor, language: Tensor) -> tuple[Tensor, Tensor]:
    """Similarity-weighted language context added to the visual tokens.

    S = V L^T / sqrt(d); each visual row mixes language rows with
    softmax(S) weights; the joint sequence is concat(V + context, L).
    Returns (joint, fusion attention).
    """
    if visual.ndim != 2 or language.ndim != 2 or visual.shape[1] != language.shape[1]:
        raise ModelError(
            f"fuse needs matching widths, got {visual.shape} and {language.shape}"
        )
    scale = 1.0 / math.sqrt(visual.shape[1])
    attn = nm.softmax(nm.matmul(visual, nm.transpose(language)) * scale)
    fused_visual = visual + nm.matmul(attn, language)
    return nm.concat([fused_visual, language], axis=0), attn


def _attention(x: Tensor, p: AttentionParams, n_heads: int) -> tuple[Tensor, np.ndarray]:
    q = nm.affine(x, p.wq, p.bq)
    k = nm.affine(x, p.wk, p.bk)
    v = nm.affine(x, p.wv, p.bv)
    ctx, maps = nm.attention(q, k, v, n_heads)
    return nm.affine(ctx, p.wo, p.bo), maps


def decoder_layer(x: Tensor, layer: LayerParams, config: ModelConfig,
                  rng=None, training: bool = False) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Pre-LN sublayers with residuals: single-head attention, then
    multi-head attention, both over the whole joint sequence (no causal
    mask; this is not autoregressive decoding). Dropout hits the sublayer
    outputs in training mode."""
    sa_out, sa_map = _attention(nm.layer_norm(x, layer.ln1_gain, layer.ln1_bias), layer.sa, 1)
    x = x + nm.dropout(sa_out, config.dropout, rng, training)
    mha_out, mha_map = _attention(
        nm.layer_norm(x, layer.ln2_gain, layer.ln2_bias), layer.mha, config.n_heads
    )
    x = x + nm.dropout(mha_out, config.dropout, rng, training)
    return x, sa_map, mha_map


def final_feedforward(x: Tensor, params: ModelParams) -> Tensor:
    """x + linear(gelu(linear(LN(x)))) with hidden width 4 * d_model."""
    h = nm.layer_norm(x, params.ffn_ln_gain, params.ffn_ln_bias)
    h = nm.gelu(nm.affine(h, params.ffn_w1, params.ffn_b1))
    return x + nm.affine(h, params.ffn_w2, params.ffn_b2)


def _pool_visual(features: Tensor, n_visual: int) -> Tensor:
    return nm.mean(nm.narrow(features, 0, 0, n_visual), axis=0, keepdims=True)


def classify_scene(features: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Mean-pool the visual token rows, then a linear head to K logits."""
    pooled = _pool_visual(features, config.n_visual_tokens)
    return nm.reshape(nm.affine(pooled, params.cls_w, params.cls_b), (config.n_scenes,))


def regress_pose(features: Tensor, scene_index: int, params: ModelParams,
                 config: ModelConfig) -> tuple[Tensor, Tensor]:
    """The selected scene's two-layer MLP over pooled visual features,
    emitting a 3-vector position and a raw (unnormalized) quaternion."""
    if not 0 <= scene_index < config.n_scenes:
        raise ModelError(f"scene index {scene_index} out of range [0, {config.n_scenes})")
    head = params.heads[scene_index]
    pooled = _pool_visual(features, config.n_visual_tokens)
    h = nm.gelu(nm.affine(pooled, head.w1, head.b1))
    out = nm.affine(h, head.w2, head.b2)
    return nm.reshape(nm.narrow(out, 1, 0, 3), (3,)), nm.reshape(nm.narrow(out, 1, 3, 7), (4,))


def forward(samples, params: ModelParams, config: ModelConfig, training: bool = False,
            rng=None, collect_attention: bool = False) -> list[ForwardOutput]:
    """Run the full network over a batch (a sequence of samples).

    Training mode routes ``selected_scene`` through the ground-truth label;
    evaluation uses the argmax of the predicted scene probabilities. Pose
    outputs for all K heads are produced either way. Errors are re-raised
    with the failing sample index attached.
    """
    if not len(samples):
        raise ModelError("forward over an empty batch")
    if training and config.dropout > 0.0 and rng is None:
        raise ModelError("training-mode forward with dropout needs a generator")
    outputs = []
    for i, sample in enumerate(samples):
        try:
            outputs.append(
                _forward_one(sample, params, config, training, rng, collect_attention)
            )
        except ValueError as e:
            raise ModelError(f"sample {i}: {e}") from e
    return outputs


def _forward_one(sample, params, config, training, rng, collect_attention) -> ForwardOutput:
    visual = encode_image(sample.image, params, config)
    language = encode_text(sample.caption_tokens, params, config)
    x, fusion_attn = fuse(visual, language)
    layer_maps = []
    for layer in params.layers:
        x, sa_map, mha_map = decoder_layer(x, layer, config, rng, training)
        if collect_attention:
            layer_maps.append((sa_map, mha_map))
    features = final_feedforward(x, params)
    logits = classify_scene(features, params, config)
    probs = nm.softmax(logits)
    poses = [regress_pose(features, k, params, config) for k in range(config.n_scenes)]
    selected = sample.scene_index if training else int(np.argmax(probs.data))
    attention = AttentionMaps(fusion_attn.data, layer_maps) if collect_attention else None
    return ForwardOutput(
        scene_logits=logits,
        scene_probs=probs,
        poses=poses,
        selected_scene=selected,
        attention=attention,
    )
