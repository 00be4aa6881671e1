"""Differentiable building blocks: conv stages, GDN/IGDN, relative-position MHSA
and the pre-norm ViT block.

All feature maps are NHWC. Every layer exposes ``cost(hwc)`` returning the
forward FLOPs for one image together with the output shape, which the codec
uses for its cost accounting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import truncated_normal
from .tensor import Tensor

BETA_FLOOR = 1e-6


class Module:
    """Parameter container. Parameters are ``Tensor`` attributes with
    ``requires_grad``; submodules may be attributes or lists of modules."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_params(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr):
    return Tensor(arr, requires_grad=True)


# -- layers ------------------------------------------------------------------
class Dense(Module):
    def __init__(self, din, dout, gen, bias=True, std=0.02):
        dt = T.default_dtype()
        self.weight = _param(truncated_normal(gen, (din, dout), std, dt))
        self.bias = _param(np.zeros(dout, dtype=dt)) if bias else None

    def forward(self, x):
        return T.dense(x, self.weight, self.bias)

    def cost(self, hwc):
        h, w, c = hwc
        dout = self.weight.shape[1]
        return 2 * h * w * c * dout, (h, w, dout)


class Conv2d(Module):
    def __init__(self, k, cin, cout, gen, stride=1):
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        dt = T.default_dtype()
        bound = 1.0 / math.sqrt(k * k * cin)
        self.kernel = _param(gen.uniform(-bound, bound, (k, k, cin, cout)).astype(dt))
        self.bias = _param(np.zeros(cout, dtype=dt))
        self.stride = stride

    def forward(self, x):
        return T.conv2d(x, self.kernel, self.bias, self.stride)

    def cost(self, hwc):
        h, w, _ = hwc
        k, _, cin, cout = self.kernel.shape
        ho, wo = -(-h // self.stride), -(-w // self.stride)
        return 2 * ho * wo * k * k * cin * cout, (ho, wo, cout)


@dataclass
class GDNParams:
    beta: Tensor
    gamma: Tensor

    @classmethod
    def init(cls, channels, dtype=None):
        dt = dtype or T.default_dtype()
        return cls(
            _param(np.ones(channels, dtype=dt)),
            _param((0.1 * np.eye(channels)).astype(dt)),
        )


def gdn(x, p, inverse=False):
    """Generalized divisive normalization over the channel axis.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``; ``inverse=True`` multiplies
    instead (IGDN). ``beta`` is clamped at ``1e-6`` and ``gamma`` at ``0``.
    """
    beta = lower_bound(p.beta, BETA_FLOOR)
    gamma = lower_bound(p.gamma, 0.0)
    norm = T.add(T.dense(T.square(x), T.transpose(gamma)), beta)
    root = T.sqrt(norm)
    return T.mul(x, root) if inverse else T.div(x, root)


def lower_bound(x, floor):
    """``max(x, floor)`` whose gradient still flows when it would push the value up."""
    d = x.data
    out = np.maximum(d, np.asarray(floor, dtype=d.dtype))

    def backward(g):
        return (g * ((d >= floor) | (g < 0)),)

    return T._make(out, (x,), backward)


class GDN(Module):
    def __init__(self, channels, inverse=False):
        self.params = GDNParams.init(channels)
        self.beta = self.params.beta
        self.gamma = self.params.gamma
        self.inverse = inverse

    def forward(self, x):
        return gdn(x, self.params, self.inverse)

    def cost(self, hwc):
        h, w, c = hwc
        return 2 * h * w * c * c, hwc


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-5):
        dt = T.default_dtype()
        self.gain = _param(np.ones(channels, dtype=dt))
        self.bias = _param(np.zeros(channels, dtype=dt))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


_ACTIVATIONS = {"relu": T.relu, "sigmoid": T.sigmoid, "none": lambda x: x}


# -- relative positions -------------------------------------------------------
def rel_pos_index(h, w):
    """Flat table index for every (query, key) pair of an ``h x w`` grid."""
    rows, cols = np.divmod(np.arange(h * w), w)
    dr = rows[:, None] - rows[None, :] + h - 1
    dc = cols[:, None] - cols[None, :] + w - 1
    return dr * (2 * w - 1) + dc


class RelPosTable(Module):
    """Learnable ``(2H-1) x (2W-1)`` relative-position bias per head, zero-initialised."""

    def __init__(self, h, w, heads=1):
        self.h, self.w = h, w
        self.table = _param(np.zeros((heads, (2 * h - 1) * (2 * w - 1)), dtype=T.default_dtype()))

    def lookup(self):
        return rel_pos_lookup(self.table, self.h, self.w)


def rel_pos_lookup(table, h, w):
    """Expand a relative-position table into the ``N x N`` bias matrix ``P``.

    ``table`` may be ``(2h-1, 2w-1)``, its flattened form, or stacked per head
    with a leading head axis. ``P[(r1,c1),(r2,c2)] = table[r1-r2+h-1, c1-c2+w-1]``.
    """
    if not isinstance(table, Tensor):
        table = Tensor(table)
    t = table
    size = (2 * h - 1) * (2 * w - 1)
    if t.ndim >= 2 and t.shape[-2:] == (2 * h - 1, 2 * w - 1):
        t = T.reshape(t, t.shape[:-2] + (size,))
    if t.shape[-1] != size:
        raise ValueError(f"table has {t.shape[-1]} cells, expected {size} for a {h}x{w} grid")
    return T.gather_rows(t, rel_pos_index(h, w))


# -- attention ------------------------------------------------------------------
@dataclass(frozen=True)
class ViTStageConfig:
    num_heads: int = 8
    dims_per_head: int = 32
    mlp_expansion: int = 4
    embed_dim: int = 256
    scale: str = "din"  # "din" divides scores by sqrt(D_in); "dh" by sqrt(D_h)

    def __post_init__(self):
        if self.num_heads * self.dims_per_head != self.embed_dim:
            raise ValueError(
                f"num_heads*dims_per_head ({self.num_heads}*{self.dims_per_head}) != embed_dim ({self.embed_dim})"
            )
        if self.scale not in ("din", "dh"):
            raise ValueError("scale must be 'din' or 'dh'")


def mhsa(x, w_qry, w_key, w_val, w_out, pos=None, num_heads=1, scale="din"):
    """Multi-head self-attention on tokens ``x`` of shape ``(B, N, Din)`` or ``(N, Din)``.

    Per head the scores are ``X Wq Wk^T X^T + P`` divided by ``sqrt(Din)`` (or
    ``sqrt(Dh)``), softmaxed, and applied to ``X Wv``; concatenated heads are
    projected by ``w_out``. ``pos`` is ``(heads, N, N)``, ``(N, N)`` or None.
    Returns ``(output, attention)`` with attention shaped ``(B, heads, N, N)``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, n, din = x.shape
    dout = w_qry.shape[1]
    if dout % num_heads:
        raise ValueError(f"output dim {dout} not divisible by {num_heads} heads")
    dh = dout // num_heads

    def heads(t):
        return T.transpose(T.reshape(t, (b, n, num_heads, dh)), (0, 2, 1, 3))

    flat = T.reshape(x, (b * n, din))
    q = heads(T.reshape(T.matmul(flat, w_qry), (b, n, dout)))
    k = heads(T.reshape(T.matmul(flat, w_key), (b, n, dout)))
    v = heads(T.reshape(T.matmul(flat, w_val), (b, n, dout)))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    if pos is not None:
        scores = T.add(scores, pos)
    norm = math.sqrt(din if scale == "din" else dh)
    attn = T.softmax(T.mul(scores, 1.0 / norm), axis=-1)
    y = T.matmul(attn, v)
    y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (b * n, dout))
    out = T.reshape(T.matmul(y, w_out), (b, n, w_out.shape[1]))
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out, attn


class MHSA(Module):
    def __init__(self, dim, cfg: ViTStageConfig, grid, gen):
        dt = T.default_dtype()
        self.cfg = cfg
        e = cfg.embed_dim
        self.w_qry = _param(truncated_normal(gen, (dim, e), 0.02, dt))
        self.w_key = _param(truncated_normal(gen, (dim, e), 0.02, dt))
        self.w_val = _param(truncated_normal(gen, (dim, e), 0.02, dt))
        self.w_out = _param(truncated_normal(gen, (e, e), 0.02, dt))
        self.pos = RelPosTable(grid[0], grid[1], cfg.num_heads)
        self.last_attention = None
        self.record = False

    def forward(self, tokens):
        y, attn = mhsa(
            tokens, self.w_qry, self.w_key, self.w_val, self.w_out,
            self.pos.lookup(), self.cfg.num_heads, self.cfg.scale,
        )
        if self.record:
            self.last_attention = attn.data
        return y

    def cost(self, n):
        d = self.w_qry.shape[0]
        e = self.cfg.embed_dim
        # qkv projections, scores, weighted sum, output projection
        return 2 * n * d * 3 * e + 2 * n * n * e + 2 * n * n * e + 2 * n * e * e


class ViTBlock(Module):
    """Pre-norm transformer block on an ``H x W`` grid: ``x + MHSA(LN(x))`` then ``+ MLP(LN(.))``."""

    def __init__(self, cfg: ViTStageConfig, grid, gen, activation="relu"):
        c = cfg.embed_dim
        self.cfg = cfg
        self.grid = tuple(grid)
        self.norm1 = LayerNorm(c)
        self.attn = MHSA(c, cfg, grid, gen)
        self.norm2 = LayerNorm(c)
        self.fc1 = Dense(c, cfg.mlp_expansion * c, gen)
        self.fc2 = Dense(cfg.mlp_expansion * c, c, gen)
        self.activation = activation

    def forward(self, x):
        b, h, w, c = x.shape
        if (h, w) != self.grid:
            raise ValueError(f"block built for grid {self.grid}, got {(h, w)}")
        tokens = T.reshape(x, (b, h * w, c))
        tokens = T.add(tokens, self.attn(self.norm1(tokens)))
        hidden = _ACTIVATIONS[self.activation](self.fc1(self.norm2(tokens)))
        tokens = T.add(tokens, self.fc2(hidden))
        return T.reshape(tokens, (b, h, w, c))

    def cost(self, hwc):
        h, w, c = hwc
        n = h * w
        e = self.cfg.mlp_expansion * c
        return self.attn.cost(n) + 2 * n * c * e * 2, hwc


def vit_block(x, block: ViTBlock):
    """Functional alias: apply a built :class:`ViTBlock` (shape-preserving)."""
    return block(x)


# -- stages ----------------------------------------------------------------------
@dataclass(frozen=True)
class ConvStageConfig:
    kernel_size: int
    in_channels: int
    out_channels: int
    resample: str = "none"  # down2 | up2 | none
    use_gdn: bool = False
    activation: str = "relu"
    depth: int = 1
    inverse_gdn: bool = False
    first_kernel_size: int | None = None

    def __post_init__(self):
        for k in (self.kernel_size, self.first_kernel_size or self.kernel_size):
            if k % 2 == 0 or k < 1:
                raise ValueError("kernel_size must be odd")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channels must be >= 1")
        if self.resample not in ("down2", "up2", "none"):
            raise ValueError(f"bad resample {self.resample!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"bad activation {self.activation!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


class ConvStage(Module):
    """``depth`` x (conv -> [I]GDN -> activation); the first conv carries the resampling."""

    def __init__(self, cfg: ConvStageConfig, gen):
        self.cfg = cfg
        self.convs, self.norms = [], []
        for i in range(cfg.depth):
            k = (cfg.first_kernel_size or cfg.kernel_size) if i == 0 else cfg.kernel_size
            cin = cfg.in_channels if i == 0 else cfg.out_channels
            stride = 2 if (i == 0 and cfg.resample == "down2") else 1
            self.convs.append(Conv2d(k, cin, cfg.out_channels, gen, stride))
            if cfg.use_gdn:
                self.norms.append(GDN(cfg.out_channels, inverse=cfg.inverse_gdn))

    def forward(self, x):
        if self.cfg.resample == "up2":
            x = T.upsample2(x)
        act = _ACTIVATIONS[self.cfg.activation]
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if self.norms:
                x = self.norms[i](x)
            x = act(x)
        return x

    def cost(self, hwc):
        h, w, c = hwc
        if self.cfg.resample == "up2":
            h, w = 2 * h, 2 * w
        total, shape = 0, (h, w, c)
        for i, conv in enumerate(self.convs):
            f, shape = conv.cost(shape)
            total += f
            if self.norms:
                total += self.norms[i].cost(shape)[0]
        return total, shape


class ViTStage(Module):
    """Optional resampling projection followed by ``depth`` ViT blocks.

    ``down2`` folds 2x2 blocks into channels then projects; ``up2`` repeats pixels
    then projects. A projection is also inserted when the width changes.
    """

    def __init__(self, in_channels, cfg: ViTStageConfig, grid, gen, resample="none", depth=1):
        self.resample = resample
        c = cfg.embed_dim
        proj_in = 4 * in_channels if resample == "down2" else in_channels
        self.proj = Dense(proj_in, c, gen) if (resample != "none" or in_channels != c) else None
        self.blocks = [ViTBlock(cfg, grid, gen) for _ in range(depth)]
        self.cfg = cfg

    def forward(self, x):
        if self.resample == "down2":
            x = T.space_to_depth2(x)
        elif self.resample == "up2":
            x = T.upsample2(x)
        if self.proj is not None:
            x = self.proj(x)
        for blk in self.blocks:
            x = blk(x)
        return x

    def cost(self, hwc):
        h, w, c = hwc
        if self.resample == "down2":
            h, w, c = h // 2, w // 2, 4 * c
        elif self.resample == "up2":
            h, w = 2 * h, 2 * w
        total, shape = 0, (h, w, c)
        if self.proj is not None:
            f, shape = self.proj.cost(shape)
            total += f
        for blk in self.blocks:
            f, shape = blk.cost(shape)
            total += f
        return total, shape

    def attention_layers(self):
        return [blk.attn for blk in self.blocks]
