"""Network layers on top of the autodiff tensors.

Each layer owns its ``Parameter`` objects and exposes a graph-building
``__call__``.  Layers used inside the autoregressive generation loop also
carry a raw-numpy fast path (``fwd_np`` / ``step``) driven under
``no_grad`` with key/value caching; tests pin both paths to agree.
"""

import numpy as np

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    gather_rows,
    matmul,
    relu,
    softmax,
    sqrt,
)

NEG_INF = -1e30  # additive mask value; finite, underflows to exactly 0 after softmax


def uniform_init(rng, shape, fan_in):
    """Scaled uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container with recursive discovery in attribute order."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, d_in, d_out, rng):
        self.weight = Parameter(uniform_init(rng, (d_in, d_out), d_in))
        self.bias = Parameter(uniform_init(rng, (d_out,), d_in))

    def __call__(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear expects {self.weight.shape[0]} features, got input {x.shape}")
        return matmul(x, self.weight) + self.bias

    def fwd_np(self, x):
        return x @ self.weight.data + self.bias.data


class Conv2d(Module):
    """3x3-style convolution over NCHW input, kernel flattened for im2col."""

    def __init__(self, c_in, c_out, kernel, stride, padding, rng):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(uniform_init(rng, (fan_in, c_out), fan_in))
        self.bias = Parameter(uniform_init(rng, (c_out,), fan_in))
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.c_in = c_in

    def __call__(self, x):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"conv2d expects {self.c_in} channels, got input {x.shape}")
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / sqrt(var + self.eps)
        return normed * self.gain + self.shift

    def fwd_np(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / np.sqrt(var + self.eps) * self.gain.data + self.shift.data


class Embedding(Module):
    def __init__(self, n_rows, dim, rng):
        self.table = Parameter(uniform_init(rng, (n_rows, dim), dim))

    def __call__(self, ids):
        return gather_rows(self.table, ids)

    def fwd_np(self, ids):
        return self.table.data[ids]


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.up = Linear(dim, hidden, rng)
        self.down = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.down(relu(self.up(x)))

    def fwd_np(self, x):
        return self.down.fwd_np(np.maximum(self.up.fwd_np(x), 0.0))


def _split_heads(x, heads):
    b, l, d = x.shape
    return x.reshape(b, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


class MultiHeadAttention(Module):
    """Self- or cross-attention; causal/padding constraints enter as an
    additive mask of 0 / NEG_INF."""

    def __init__(self, dim, heads, rng):
        if dim % heads != 0:
            raise ShapeError(f"heads must divide hidden dim: {heads} vs {dim}")
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim // heads)

    def __call__(self, x, memory=None, mask=None):
        src = x if memory is None else memory
        b, l, d = x.shape
        q = _split_heads_t(self.wq(x), self.heads)
        k = _split_heads_t(self.wk(src), self.heads)
        v = _split_heads_t(self.wv(src), self.heads)
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * self.scale
        if mask is not None:
            scores = scores + mask
        att = softmax(scores, axis=-1)
        out = matmul(att, v)
        merged = out.transpose(0, 2, 1, 3).reshape(b, l, d)
        return self.wo(merged)

    # -- numpy fast path -----------------------------------------------------
    def project_kv_np(self, src):
        k = _split_heads(self.wk.fwd_np(src), self.heads)
        v = _split_heads(self.wv.fwd_np(src), self.heads)
        return k, v

    def attend_np(self, x_new, k, v):
        """One query step against given keys/values; x_new is (B, 1, D)."""
        b, _, d = x_new.shape
        q = _split_heads(self.wq.fwd_np(x_new), self.heads)
        scores = (q @ np.swapaxes(k, -1, -2)) * self.scale
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        out = _merge_heads(att @ v)
        return self.wo.fwd_np(out)


def _split_heads_t(x, heads):
    b, l, d = x.shape
    return x.reshape(b, l, heads, d // heads).transpose(0, 2, 1, 3)


def causal_mask(length):
    """(1, 1, L, L) additive mask hiding positions j > i."""
    m = np.triu(np.full((length, length), NEG_INF), k=1)
    return Tensor(m[None, None, :, :])


def padding_mask(pad_bool):
    """(B, 1, 1, L) additive mask hiding padded key positions."""
    m = np.where(pad_bool, NEG_INF, 0.0)
    return Tensor(m[:, None, None, :])


class DecoderBlock(Module):
    """Pre-norm block: causal self-attention, cross-attention, feed-forward."""

    def __init__(self, dim, heads, ffn_hidden, rng):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_hidden, rng)

    def __call__(self, x, memory, mask):
        x = x + self.self_attn(self.ln1(x), mask=mask)
        x = x + self.cross_attn(self.ln2(x), memory=memory)
        x = x + self.ffn(self.ln3(x))
        return x

    def step(self, x_new, cache, memory_kv):
        """Incremental forward for one new position; cache holds past k/v."""
        h = self.ln1.fwd_np(x_new)
        k_new, v_new = self.self_attn.project_kv_np(h)
        if cache["k"] is None:
            cache["k"], cache["v"] = k_new, v_new
        else:
            cache["k"] = np.concatenate([cache["k"], k_new], axis=2)
            cache["v"] = np.concatenate([cache["v"], v_new], axis=2)
        x_new = x_new + self.self_attn.attend_np(h, cache["k"], cache["v"])
        h = self.ln2.fwd_np(x_new)
        x_new = x_new + self.cross_attn.attend_np(h, *memory_kv)
        x_new = x_new + self.ffn.fwd_np(self.ln3.fwd_np(x_new))
        return x_new


class EncoderBlock(Module):
    """Pre-norm bidirectional block: self-attention then feed-forward."""

    def __init__(self, dim, heads, ffn_hidden, rng):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_hidden, rng)

    def __call__(self, x, mask=None):
        x = x + self.self_attn(self.ln1(x), mask=mask)
        x = x + self.ffn(self.ln2(x))
        return x
