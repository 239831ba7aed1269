"""Independent numpy-only re-implementation of the encoder forward pass.

Deliberately written without the package's Tensor machinery so it can serve
as an oracle for the real implementation. Keep this file free of imports
from convattn.tensor.
"""

import numpy as np


def ref_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + eps) + bias


def ref_softmax(x):
    mx = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - mx)
    return e / e.sum(axis=-1, keepdims=True)


def ref_attention(q, k, v, mask=None):
    scores = q @ k.T / np.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores + mask
    return ref_softmax(scores) @ v


def ref_mha(x, wq, wk, wv, wo, num_heads, mask=None):
    d = x.shape[-1]
    dh = d // num_heads
    q, k, v = x @ wq, x @ wk, x @ wv
    heads = [ref_attention(q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh],
                           v[:, h * dh:(h + 1) * dh], mask)
             for h in range(num_heads)]
    return np.concatenate(heads, axis=-1) @ wo


def ref_conv1d_same(x, kernel, bias):
    k = kernel.shape[0]
    pad = (k - 1) // 2
    t_len = x.shape[0]
    xp = np.pad(x, ((pad, pad), (0, 0)))
    out = np.broadcast_to(bias, (t_len, kernel.shape[2])).copy()
    for t in range(t_len):
        for j in range(k):
            out[t] = out[t] + xp[t + j] @ kernel[j]
    return out


def ref_window_mask(t_len, left, right, valid_len=None):
    if valid_len is None:
        valid_len = t_len
    mask = np.full((t_len, t_len), -np.inf)
    for t in range(t_len):
        for s in range(t_len):
            if s >= t - left and s <= t + right and s < valid_len:
                mask[t, s] = 0.0
    return mask


def ref_encoder(features, config, params):
    """params: {name: np.ndarray} as produced by init_params (use .data)."""
    x = np.asarray(features, dtype=np.float64)
    h = x @ params["input_linear.W"] + params["input_linear.b"]
    if config.use_positional_encoding:
        t = np.arange(x.shape[0], dtype=np.float64)[:, None]
        j = np.arange(config.model_dim, dtype=np.float64)[None, :]
        angle = t / 10000.0 ** (j / config.model_dim)
        pe = np.where(j % 2 == 0, np.sin(angle), np.cos(angle))
        h = h + config.pe_scale * pe

    for i, w in enumerate(config.layer_windows()):
        mask = ref_window_mask(x.shape[0], w.left, w.right)
        p = f"layer{i}"

        def conv_block(hh):
            y = ref_conv1d_same(hh, params[f"{p}.conv.kernel"], params[f"{p}.conv.bias"])
            return hh + y if config.conv_residual else y

        def attn_block(hh):
            a = ref_layer_norm(hh, params[f"{p}.attn_norm.gain"], params[f"{p}.attn_norm.bias"])
            a = ref_mha(a, params[f"{p}.attn.Wq"], params[f"{p}.attn.Wk"],
                        params[f"{p}.attn.Wv"], params[f"{p}.attn.Wo"],
                        config.num_heads, mask)
            return hh + a

        def ffn_block(hh):
            f = ref_layer_norm(hh, params[f"{p}.ffn_norm.gain"], params[f"{p}.ffn_norm.bias"])
            f = np.maximum(f @ params[f"{p}.ffn.W1"] + params[f"{p}.ffn.b1"], 0.0)
            f = f @ params[f"{p}.ffn.W2"] + params[f"{p}.ffn.b2"]
            return hh + f

        if config.block_order == "conv_first":
            if config.use_conv:
                h = conv_block(h)
            h = attn_block(h)
            h = ffn_block(h)
        else:
            h = attn_block(h)
            h = ffn_block(h)
            if config.use_conv:
                h = conv_block(h)

    if config.extra_final_norm:
        h = ref_layer_norm(h, params["final_norm.gain"], params["final_norm.bias"])
    return h @ params["output_linear.W"] + params["output_linear.b"]
