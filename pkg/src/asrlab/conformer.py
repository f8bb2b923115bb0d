"""Conformer acoustic encoder: 4x convolutional subsampling, then blocks of
half-step feedforward, relative-position multi-head self-attention, and a
convolution module, with a final linear + log-softmax head over the CTC
output inventory (blank + subword pieces).

Parameters live in a flat name -> Tensor map whose shapes are fully
determined by ``ModelConfig``; ``param_shapes`` exposes the shape map so
parameter counting needs no allocation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NEG_INF = -1.0e30

ParameterSet = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_model: int
    num_heads: int
    conv_kernel: int
    ff_expansion: int
    dropout: float
    vocab_out: int = 129
    subsample_factor: int = 4
    feat_dim: int = 80

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.num_heads} heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel {self.conv_kernel} must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        if self.subsample_factor != 4:
            raise ValueError("only 4x subsampling is supported")


# the published large variant and a small configuration for tests
LARGE_CONFIG = ModelConfig(num_layers=18, d_model=512, num_heads=8,
                           conv_kernel=31, ff_expansion=4, dropout=0.1)
TINY_CONFIG = ModelConfig(num_layers=2, d_model=16, num_heads=2,
                          conv_kernel=7, ff_expansion=4, dropout=0.1, vocab_out=33)


@dataclass
class EncoderOutput:
    log_probs: Tensor  # (B, T', vocab_out)
    lengths: list[int]


def _conv_out_len(t: int) -> int:
    # kernel 3, stride 2, pad 1
    return (t - 1) // 2 + 1


def subsampled_length(t: int) -> int:
    return _conv_out_len(_conv_out_len(t))


def _subsample_freq_dim(feat_dim: int) -> int:
    return _conv_out_len(_conv_out_len(feat_dim))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter path and its shape, in a stable order."""
    d = cfg.d_model
    ff = cfg.ff_expansion * d
    heads = cfg.num_heads
    dh = d // heads
    freq = _subsample_freq_dim(cfg.feat_dim)

    shapes: dict[str, tuple[int, ...]] = {
        "sub.conv1.weight": (d, 1, 3, 3),
        "sub.conv1.bias": (d,),
        "sub.conv2.weight": (d, d, 3, 3),
        "sub.conv2.bias": (d,),
        "sub.proj.weight": (d * freq, d),
        "sub.proj.bias": (d,),
    }

    def norm(prefix: str):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    for i in range(cfg.num_layers):
        p = f"layer.{i}"
        for half in ("ff1", "ff2"):
            norm(f"{p}.{half}.norm")
            shapes[f"{p}.{half}.w1.weight"] = (d, ff)
            shapes[f"{p}.{half}.w1.bias"] = (ff,)
            shapes[f"{p}.{half}.w2.weight"] = (ff, d)
            shapes[f"{p}.{half}.w2.bias"] = (d,)
        norm(f"{p}.attn.norm")
        for proj in ("q", "k", "v", "out"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.attn.pos.weight"] = (d, d)
        shapes[f"{p}.attn.content_bias"] = (heads, 1, dh)
        shapes[f"{p}.attn.pos_bias"] = (heads, 1, dh)
        norm(f"{p}.conv.norm")
        shapes[f"{p}.conv.pw1.weight"] = (d, 2 * d)
        shapes[f"{p}.conv.pw1.bias"] = (2 * d,)
        shapes[f"{p}.conv.depthwise.weight"] = (cfg.conv_kernel, d)
        shapes[f"{p}.conv.depthwise.bias"] = (d,)
        norm(f"{p}.conv.mid_norm")
        shapes[f"{p}.conv.pw2.weight"] = (d, d)
        shapes[f"{p}.conv.pw2.bias"] = (d,)
        norm(f"{p}.final_norm")

    shapes["head.weight"] = (d, cfg.vocab_out)
    shapes["head.bias"] = (cfg.vocab_out,)
    return shapes


def _fan(path: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:  # conv2d (out, in, kh, kw)
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    if path.endswith("depthwise.weight"):  # (k, channels), per-channel kernel
        return shape[0], shape[0]
    return shape[0], shape[1]  # linear (in, out)


def init_params(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for path, shape in param_shapes(cfg).items():
        if path.endswith(".gain"):
            data = np.ones(shape)
        elif path.endswith(("bias", ".content_bias", ".pos_bias")):
            data = np.zeros(shape)
        else:
            fan_in, fan_out = _fan(path, shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        params[path] = Tensor(data, requires_grad=True)
    return params


def count_params(params: ParameterSet) -> int:
    return sum(t.size for t in params.values())


def count_params_for_config(cfg: ModelConfig) -> int:
    """Parameter count by shape arithmetic alone."""
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


# ---------------------------------------------------------------------------
# forward pass


def _linear(x: Tensor, params: ParameterSet, name: str) -> Tensor:
    return ag.add(ag.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def _norm(x: Tensor, params: ParameterSet, name: str) -> Tensor:
    return ag.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def _dropout(x: Tensor, cfg: ModelConfig, train: bool, rng) -> Tensor:
    if not train:
        return x
    return ag.dropout(x, cfg.dropout, rng, train=True)


def _length_mask(lengths: Sequence[int], t: int) -> np.ndarray:
    # True at padded positions; shape (B, T)
    return np.arange(t)[None, :] >= np.asarray(lengths)[:, None]


def _zero_padding(x: Tensor, pad: np.ndarray) -> Tensor:
    return ag.masked_fill(x, pad[:, :, None], 0.0)


def subsample(features: Tensor, lengths: Sequence[int], params: ParameterSet,
              cfg: ModelConfig) -> tuple[Tensor, list[int]]:
    """Two stride-2 convolutions (4x time reduction) and projection to
    d_model. ``features``: (B, T, feat_dim)."""
    b, t, feat = features.shape
    if feat != cfg.feat_dim:
        raise ag.ShapeError(f"expected {cfg.feat_dim}-dim features, got {feat}")
    if t < 4:
        raise ag.ShapeError(f"need at least 4 frames to subsample, got {t}")
    x = ag.reshape(features, (b, 1, t, feat))
    x = ag.swish(ag.conv2d(x, params["sub.conv1.weight"], params["sub.conv1.bias"],
                           stride=2, padding=1))
    x = ag.swish(ag.conv2d(x, params["sub.conv2.weight"], params["sub.conv2.bias"],
                           stride=2, padding=1))
    _, d, t2, freq = x.shape
    x = ag.transpose(x, (0, 2, 1, 3))  # (B, T', d, freq)
    x = ag.reshape(x, (b, t2, d * freq))
    x = _linear(x, params, "sub.proj")
    return x, [subsampled_length(n) for n in lengths]


def _sinusoid_rel_embedding(t: int, d: int) -> Tensor:
    """Relative positions -(T-1)..(T-1) as fixed sinusoids, (2T-1, d)."""
    pos = np.arange(2 * t - 1) - (t - 1)
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d, 2) / d))
    angles = pos[:, None] * inv_freq[None, :]
    emb = np.zeros((2 * t - 1, d))
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles[:, : d - d // 2])
    return Tensor(emb)


def _attention(x: Tensor, params: ParameterSet, prefix: str, cfg: ModelConfig,
               pad: np.ndarray, train: bool, rng) -> Tensor:
    b, t, d = x.shape
    heads = cfg.num_heads
    dh = d // heads
    x = _norm(x, params, f"{prefix}.norm")

    def split_heads(v: Tensor) -> Tensor:
        return ag.transpose(ag.reshape(v, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split_heads(_linear(x, params, f"{prefix}.q"))
    k = split_heads(_linear(x, params, f"{prefix}.k"))
    v = split_heads(_linear(x, params, f"{prefix}.v"))

    rel = ag.matmul(_sinusoid_rel_embedding(t, d), params[f"{prefix}.pos.weight"])
    rel = ag.transpose(ag.reshape(rel, (2 * t - 1, heads, dh)), (1, 2, 0))  # (H, dh, 2T-1)

    q_content = ag.add(q, params[f"{prefix}.content_bias"])
    q_pos = ag.add(q, params[f"{prefix}.pos_bias"])
    content = ag.matmul(q_content, ag.transpose(k, (0, 1, 3, 2)))  # (B, H, T, T)
    position = ag.rel_shift(ag.matmul(q_pos, rel))  # (B, H, T, T)
    scores = ag.scale(ag.add(content, position), 1.0 / np.sqrt(dh))
    scores = ag.masked_fill(scores, pad[:, None, None, :], NEG_INF)

    weights = _dropout(ag.softmax(scores, axis=-1), cfg, train, rng)
    ctx = ag.matmul(weights, v)  # (B, H, T, dh)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return _dropout(_linear(ctx, params, f"{prefix}.out"), cfg, train, rng)


def _feed_forward(x: Tensor, params: ParameterSet, prefix: str, cfg: ModelConfig,
                  train: bool, rng) -> Tensor:
    y = _norm(x, params, f"{prefix}.norm")
    y = _dropout(ag.swish(_linear(y, params, f"{prefix}.w1")), cfg, train, rng)
    return _dropout(_linear(y, params, f"{prefix}.w2"), cfg, train, rng)


def _conv_module(x: Tensor, params: ParameterSet, prefix: str, cfg: ModelConfig,
                 pad: np.ndarray, train: bool, rng) -> Tensor:
    y = _norm(x, params, f"{prefix}.norm")
    y = ag.glu(_linear(y, params, f"{prefix}.pw1"), axis=-1)
    y = _zero_padding(y, pad)  # padded frames must not leak into the kernel
    y = ag.depthwise_conv1d(y, params[f"{prefix}.depthwise.weight"],
                            params[f"{prefix}.depthwise.bias"])
    y = ag.swish(_norm(y, params, f"{prefix}.mid_norm"))
    return _dropout(_linear(y, params, f"{prefix}.pw2"), cfg, train, rng)


def encoder_forward(
    features: Tensor,
    lengths: Sequence[int],
    params: ParameterSet,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Map (B, T, feat_dim) features to per-frame log-probabilities
    (B, T', vocab_out). ``mode`` is "train" or "eval"."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train mode requires an rng for dropout")
    expected = set(param_shapes(cfg))
    if set(params) != expected:
        missing = sorted(expected - set(params))[:3]
        extra = sorted(set(params) - expected)[:3]
        raise ValueError(f"params do not match config (missing={missing}, extra={extra})")

    x, out_lengths = subsample(features, lengths, params, cfg)
    t2 = x.shape[1]
    pad = _length_mask(out_lengths, t2)
    x = _zero_padding(x, pad)
    x = _dropout(x, cfg, train, rng)

    for i in range(cfg.num_layers):
        p = f"layer.{i}"
        x = ag.add(x, ag.scale(_feed_forward(x, params, f"{p}.ff1", cfg, train, rng), 0.5))
        x = ag.add(x, _attention(x, params, f"{p}.attn", cfg, pad, train, rng))
        x = ag.add(x, _conv_module(x, params, f"{p}.conv", cfg, pad, train, rng))
        x = ag.add(x, ag.scale(_feed_forward(x, params, f"{p}.ff2", cfg, train, rng), 0.5))
        x = _norm(x, params, f"{p}.final_norm")
        x = _zero_padding(x, pad)
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"non-finite activation after layer {i}")

    logits = _linear(x, params, "head")
    return EncoderOutput(log_probs=ag.log_softmax(logits, axis=-1), lengths=out_lengths)
