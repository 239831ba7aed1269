"""Encoder architecture: interleaved 1D convolution and multi-head self-attention.

A layer applies (default order) a 1D convolution over time, then a pre-norm
residual multi-head attention sublayer, then a pre-norm residual feed-forward
sublayer. Attention can be restricted to a per-layer time window [-l, r],
enforced by adding -inf to the attention logits before the softmax (which
makes the masked probabilities exactly zero).

Parameters live in an ordered dict keyed by dotted names; that insertion
order is also the checkpoint serialization order.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import (
    Tensor,
    add,
    concat_lastaxis,
    conv1d_same,
    dropout,
    dropout_rng,
    layer_norm,
    linear,
    matmul,
    relu,
    scale,
    slice_lastaxis,
    softmax_lastaxis,
    transpose,
)

INF = math.inf

CHECKPOINT_MAGIC = b"CATN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TimeWindow:
    """Attention restriction [-left, right]; INF means unrestricted."""

    left: float = INF
    right: float = INF

    def __post_init__(self):
        for v in (self.left, self.right):
            if v != INF and (v < 0 or int(v) != v):
                raise ConfigError(f"time window bounds must be non-negative integers "
                                  f"or inf, got [{-self.left}, {self.right}]")

    @property
    def is_full(self) -> bool:
        return self.left == INF and self.right == INF

    def __str__(self):
        l = "inf" if self.left == INF else str(int(self.left))
        r = "inf" if self.right == INF else str(int(self.right))
        return f"{l}:{r}"

    @classmethod
    def parse(cls, text: str) -> "TimeWindow":
        parts = text.strip().split(":")
        if len(parts) != 2:
            raise ConfigError(f"time window must look like 'left:right', got {text!r}")

        def one(s):
            s = s.strip()
            if s in ("inf", "Inf", "INF"):
                return INF
            try:
                return int(s)
            except ValueError:
                raise ConfigError(f"bad time window bound {s!r}") from None

        return cls(one(parts[0]), one(parts[1]))


FULL_WINDOW = TimeWindow(INF, INF)

BLOCK_ORDERS = ("conv_first", "attention_first")


@dataclass
class ModelConfig:
    num_layers: int = 6
    model_dim: int = 512
    num_heads: int = 8
    ffn_dim: int = 2048
    kernel_size: int = 3
    feature_dim: int = 80
    output_dim: int = 5768
    use_positional_encoding: bool = True
    pe_scale: float = 1.0
    use_conv: bool = True
    conv_residual: bool = False
    extra_final_norm: bool = False
    dropout_p: float = 0.0
    block_order: str = "conv_first"
    attention_window: Union[TimeWindow, Sequence[TimeWindow]] = FULL_WINDOW

    def validate(self) -> "ModelConfig":
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.block_order not in BLOCK_ORDERS:
            raise ConfigError(f"block_order must be one of {BLOCK_ORDERS}, "
                              f"got {self.block_order!r}")
        if min(self.feature_dim, self.output_dim, self.ffn_dim) < 1:
            raise ConfigError("feature_dim, output_dim and ffn_dim must be >= 1")
        windows = tuple(self.layer_windows())
        if len(windows) != self.num_layers:
            raise ConfigError(f"got {len(windows)} attention windows for "
                              f"{self.num_layers} layers")
        self.attention_window = windows  # normalize to one window per layer
        return self

    def layer_windows(self) -> list[TimeWindow]:
        w = self.attention_window
        if isinstance(w, TimeWindow):
            return [w] * self.num_layers
        return list(w)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def config_to_dict(config: ModelConfig) -> dict:
    d = {
        "num_layers": config.num_layers,
        "model_dim": config.model_dim,
        "num_heads": config.num_heads,
        "ffn_dim": config.ffn_dim,
        "kernel_size": config.kernel_size,
        "feature_dim": config.feature_dim,
        "output_dim": config.output_dim,
        "use_positional_encoding": config.use_positional_encoding,
        "pe_scale": config.pe_scale,
        "use_conv": config.use_conv,
        "conv_residual": config.conv_residual,
        "extra_final_norm": config.extra_final_norm,
        "dropout_p": config.dropout_p,
        "block_order": config.block_order,
        "attention_window": [str(w) for w in config.layer_windows()],
    }
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    windows = [TimeWindow.parse(s) for s in d.pop("attention_window")]
    return ModelConfig(attention_window=windows, **d).validate()


# ---------------------------------------------------------------------------
# Parameters

def param_names(config: ModelConfig) -> list[str]:
    """Checkpoint serialization order. Do not reorder: stored files depend on it."""
    names = ["input_linear.W", "input_linear.b"]
    for i in range(config.num_layers):
        p = f"layer{i}"
        if config.use_conv:
            names += [f"{p}.conv.kernel", f"{p}.conv.bias"]
        names += [f"{p}.attn_norm.gain", f"{p}.attn_norm.bias",
                  f"{p}.attn.Wq", f"{p}.attn.Wk", f"{p}.attn.Wv", f"{p}.attn.Wo",
                  f"{p}.ffn_norm.gain", f"{p}.ffn_norm.bias",
                  f"{p}.ffn.W1", f"{p}.ffn.b1", f"{p}.ffn.W2", f"{p}.ffn.b2"]
    if config.extra_final_norm:
        names += ["final_norm.gain", "final_norm.bias"]
    names += ["output_linear.W", "output_linear.b"]
    return names


def param_shape(config: ModelConfig, name: str) -> tuple:
    d, f = config.model_dim, config.ffn_dim
    k = config.kernel_size
    leaf = name.split(".", 1)[-1]
    if name == "input_linear.W":
        return (config.feature_dim, d)
    if name == "input_linear.b":
        return (d,)
    if name in ("final_norm.gain", "final_norm.bias"):
        return (d,)
    if name == "output_linear.W":
        return (d, config.output_dim)
    if name == "output_linear.b":
        return (config.output_dim,)
    if leaf == "conv.kernel":
        return (k, d, d)
    if leaf == "conv.bias" or leaf.endswith("norm.gain") \
            or leaf.endswith("norm.bias") or leaf == "ffn.b2":
        return (d,)
    if leaf in ("attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"):
        return (d, d)
    if leaf == "ffn.W1":
        return (d, f)
    if leaf == "ffn.b1":
        return (f,)
    if leaf == "ffn.W2":
        return (f, d)
    raise KeyError(name)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Glorot-uniform matrices, zero biases, unit norm gains; fixed draw order."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xC0,)))
    params: dict[str, Tensor] = {}
    for name in param_names(config):
        shape = param_shape(config, name)
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gain",):
            data = np.ones(shape)
        elif leaf in ("b", "bias", "b1", "b2"):
            data = np.zeros(shape)
        elif len(shape) == 3:  # conv kernel: fan-in counts every tap
            k, din, dout = shape
            limit = math.sqrt(6.0 / (k * din + dout))
            data = rng.uniform(-limit, limit, size=shape)
        else:
            fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data.astype(dtype), name=name)
    return params


def count_parameters(config: ModelConfig) -> dict[str, int]:
    """Closed-form per-component parameter counts; must equal the enumerated
    storage sizes exactly (see tests)."""
    d, L, f = config.model_dim, config.num_layers, config.ffn_dim
    k, D, C = config.kernel_size, config.feature_dim, config.output_dim
    counts = {
        "input_linear": D * d + d,
        "attention": L * 4 * d * d,
        "layer_norm": L * 2 * 2 * d + (2 * d if config.extra_final_norm else 0),
        "ffn": L * (d * f + f + f * d + d),
        "conv": L * (k * d * d + d) if config.use_conv else 0,
        "output_linear": d * C + C,
    }
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# Blocks

def positional_encoding(t_len: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal position table, [t_len, dim].

    Column j holds sin(t / 10000^(j/dim)) for even j and cos(t / 10000^(j/dim))
    for odd j: the cosine uses the odd index itself in the exponent, not the
    preceding even one.
    """
    if t_len < 1:
        raise ShapeError(f"positional encoding needs t_len >= 1, got {t_len}")
    t = np.arange(t_len, dtype=np.float64)[:, None]
    j = np.arange(dim, dtype=np.float64)[None, :]
    angle = t / np.power(10000.0, j / dim)
    pe = np.where(j % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def build_attention_mask(t_len: int, window: TimeWindow, valid_len: Optional[int] = None,
                         dtype=np.float32) -> np.ndarray:
    """Additive [t_len, t_len] mask: entry (t, s) is 0 when frame t may attend
    to frame s (t-left <= s <= t+right and s < valid_len), else -inf."""
    if valid_len is None:
        valid_len = t_len
    if valid_len > t_len or valid_len < 1:
        raise ShapeError(f"valid_len {valid_len} out of range for length {t_len}")
    t = np.arange(t_len)[:, None]
    s = np.arange(t_len)[None, :]
    visible = (s >= t - window.left) & (s <= t + window.right) & (s < valid_len)
    mask = np.where(visible, 0.0, -np.inf).astype(dtype)
    return mask


def accumulated_window(config: ModelConfig) -> tuple[float, float, int, float]:
    """(total_left, total_right, conv_lookahead, total_latency_frames).

    Per-layer attention windows compose additively across the stack; each
    convolution layer adds (kernel_size-1)/2 frames of lookahead on top.
    """
    total_left = 0.0
    total_right = 0.0
    for w in config.layer_windows():
        total_left += w.left
        total_right += w.right
    conv_lookahead = (config.num_layers * (config.kernel_size - 1) // 2
                      if config.use_conv else 0)
    return total_left, total_right, conv_lookahead, total_right + conv_lookahead


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax(q kᵀ / sqrt(head_dim)) v with additive masking."""
    if q.shape != k.shape or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    head_dim = q.shape[-1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(head_dim))
    probs = softmax_lastaxis(scores, additive_mask=mask)
    return matmul(probs, v)


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         num_heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Heads are column blocks of the combined projection matrices."""
    d = x.shape[-1]
    if d % num_heads != 0:
        raise ShapeError(f"dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    heads = []
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        heads.append(scaled_dot_attention(slice_lastaxis(q, lo, hi),
                                          slice_lastaxis(k, lo, hi),
                                          slice_lastaxis(v, lo, hi), mask))
    return matmul(concat_lastaxis(heads), wo)


class DropoutCtx:
    """Hands out one counter-based RNG per dropout site, so masks depend only
    on (seed, step, site index), never on evaluation order elsewhere."""

    def __init__(self, seed: int, step: int):
        self.seed = seed
        self.step = step
        self.count = 0

    def next_rng(self):
        rng = dropout_rng(self.seed, self.step, self.count)
        self.count += 1
        return rng


def _layer_param(params, i, leaf):
    return params[f"layer{i}.{leaf}"]


def encoder_layer(x: Tensor, config: ModelConfig, params: dict, layer_idx: int,
                  mask: Optional[np.ndarray] = None, training: bool = False,
                  dctx: Optional[DropoutCtx] = None) -> Tensor:
    """One interleaved block. conv_first: conv -> attention sublayer -> FFN
    sublayer; attention_first: attention -> FFN -> conv."""
    i = layer_idx
    p = config.dropout_p

    def conv_block(h):
        y = conv1d_same(h, _layer_param(params, i, "conv.kernel"),
                        _layer_param(params, i, "conv.bias"))
        return add(h, y) if config.conv_residual else y

    def attn_block(h):
        a = layer_norm(h, _layer_param(params, i, "attn_norm.gain"),
                       _layer_param(params, i, "attn_norm.bias"))
        a = multi_head_attention(a, _layer_param(params, i, "attn.Wq"),
                                 _layer_param(params, i, "attn.Wk"),
                                 _layer_param(params, i, "attn.Wv"),
                                 _layer_param(params, i, "attn.Wo"),
                                 config.num_heads, mask)
        if training and p > 0:
            a = dropout(a, p, training, dctx.next_rng())
        return add(h, a)

    def ffn_block(h):
        f = layer_norm(h, _layer_param(params, i, "ffn_norm.gain"),
                       _layer_param(params, i, "ffn_norm.bias"))
        f = linear(relu(linear(f, _layer_param(params, i, "ffn.W1"),
                               _layer_param(params, i, "ffn.b1"))),
                   _layer_param(params, i, "ffn.W2"),
                   _layer_param(params, i, "ffn.b2"))
        if training and p > 0:
            f = dropout(f, p, training, dctx.next_rng())
        return add(h, f)

    if config.block_order == "conv_first":
        if config.use_conv:
            x = conv_block(x)
        x = attn_block(x)
        x = ffn_block(x)
    else:
        x = attn_block(x)
        x = ffn_block(x)
        if config.use_conv:
            x = conv_block(x)
    return x


def encoder_forward(features, config: ModelConfig, params: dict,
                    valid_len: Optional[int] = None, training: bool = False,
                    dctx: Optional[DropoutCtx] = None) -> Tensor:
    """Features [T, feature_dim] -> frame logits [T, output_dim]."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim != 2:
        raise ShapeError(f"expected features [T, D], got shape {x.shape}")
    t_len = x.shape[0]
    if t_len < 1:
        raise ShapeError("cannot encode a length-0 sequence")
    if x.shape[1] != config.feature_dim:
        raise ShapeError(f"feature dim {x.shape[1]} does not match configured "
                         f"{config.feature_dim}")
    if training and config.dropout_p > 0 and dctx is None:
        raise ValueError("training forward with dropout requires a DropoutCtx")

    h = linear(x, params["input_linear.W"], params["input_linear.b"])
    if config.use_positional_encoding:
        pe = positional_encoding(t_len, config.model_dim, dtype=h.data.dtype)
        h = add(h, Tensor(pe * h.data.dtype.type(config.pe_scale)))

    dtype = params["input_linear.W"].data.dtype
    for i, window in enumerate(config.layer_windows()):
        mask = build_attention_mask(t_len, window, valid_len,
                                    dtype=np.float32 if dtype == np.float32 else np.float64)
        h = encoder_layer(h, config, params, i, mask=mask, training=training, dctx=dctx)

    if config.extra_final_norm:
        h = layer_norm(h, params["final_norm.gain"], params["final_norm.bias"])
    return linear(h, params["output_linear.W"], params["output_linear.b"])


# ---------------------------------------------------------------------------
# Checkpoint container

def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor]) -> None:
    """Header (magic, version, config JSON), then each parameter's payload as
    32-bit little-endian floats in param_names() order."""
    blob = json.dumps(config_to_dict(config), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for name in param_names(config):
        buf.write(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, blob_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + blob_len:
        raise DataError(f"{path}: truncated payload")
    try:
        config = config_from_dict(json.loads(raw[12:12 + blob_len].decode("utf-8")))
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed header: {e}") from e
    offset = 12 + blob_len
    params: dict[str, Tensor] = {}
    for name in param_names(config):
        shape = param_shape(config, name)
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(raw):
            raise DataError(f"{path}: truncated payload")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), name=name)
        offset += nbytes
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes after parameters")
    return config, params
