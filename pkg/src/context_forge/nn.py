"""Minimal layer containers over :mod:`context_forge.tensor`."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return dict(self.named_parameters())


def _xavier(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def param(values):
    return Tensor(np.asarray(values), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out):
        self.weight = param(_xavier(rng, d_in, d_out))
        self.bias = param(np.zeros(d_out))

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-6):
        self.weight = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Conv3x3(Module):
    def __init__(self, rng, c_in, c_out):
        self.weight = param(_xavier(rng, 9 * c_in, 9 * c_out, (3, 3, c_in, c_out)))
        self.bias = param(np.zeros(c_out))

    def __call__(self, x):
        return T.conv3x3(x, self.weight, self.bias)


def _split_heads(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attend(q, k, v):
    """Scaled dot-product attention on ``[B, heads, N, dh]`` operands."""
    dh = q.shape[-1]
    scores = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    return T.matmul(T.softmax(scores, axis=-1), v)


class SelfAttention(Module):
    def __init__(self, rng, d, heads):
        self.heads = heads
        self.qkv = Linear(rng, d, 3 * d)
        self.proj = Linear(rng, d, d)

    def __call__(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).transpose(2, 0, 3, 1, 4)
        out = attend(qkv[0], qkv[1], qkv[2])
        return self.proj(_merge_heads(out))


class CrossAttention(Module):
    """Queries from one token set, keys/values from another."""

    def __init__(self, rng, d, heads):
        self.heads = heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.out = Linear(rng, d, d)

    def __call__(self, x, context):
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(context), self.heads)
        v = _split_heads(self.v(context), self.heads)
        return self.out(_merge_heads(attend(q, k, v)))


class Mlp(Module):
    def __init__(self, rng, d, hidden):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, rng, d, heads, mlp_ratio=4.0):
        self.norm1 = LayerNorm(d)
        self.attn = SelfAttention(rng, d, heads)
        self.norm2 = LayerNorm(d)
        self.mlp = Mlp(rng, d, int(d * mlp_ratio))

    def __call__(self, x):
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))
