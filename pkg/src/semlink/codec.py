"""JSCC autoencoder assembled from a six-letter C/V architecture string.

Layers 0-2 form the encoder (two stride-2 stages reach a quarter-resolution
grid), a per-position dense layer projects the features to interleaved I/Q
symbols, and layers 3-5 mirror the encoder with nearest-neighbour upsampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import checkpoint
from . import nn
from . import tensor as T
from .rng import INIT, RngStream
from .tensor import Tensor

_RESAMPLE = ("down2", "down2", "none", "none", "up2", "up2")
STANDARD_RATIOS = (Fraction(1, 12), Fraction(1, 6), Fraction(1, 4), Fraction(1, 3), Fraction(1, 2))

# The ten stage/normalization combinations compared by the sweep: (stages, gdn)
COMPARISON_ROWS = (
    ("CCCCCC", True),
    ("CCVCCC", True),
    ("CCVCCC", False),
    ("CVVCCC", True),
    ("CCCVCC", True),
    ("CCCVCC", False),
    ("CCCVVC", True),
    ("CVVVVC", True),
    ("CCVVCC", True),
    ("CCVVCC", False),
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    stages: str = "CCVVCC"
    use_gdn: bool = False
    widths: tuple = (256, 256, 256, 256, 256, 128)
    depths: tuple = (2, 2, 3, 3, 2, 2)
    kernel_size: int = 5
    stem_kernel: int = 9
    head_kernel: int = 9
    dims_per_head: int = 32
    mlp_expansion: int = 4
    attn_scale: str = "din"

    def __post_init__(self):
        stages = self.stages.replace("-", "").upper()
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if len(stages) != 6 or set(stages) - {"C", "V"}:
            raise ConfigError(f"architecture must be 6 letters over C/V, got {self.stages!r}")
        if len(self.widths) != 6 or len(self.depths) != 6:
            raise ConfigError("widths and depths need one entry per stage")
        for i, s in enumerate(stages):
            if s == "V" and self.widths[i] % self.dims_per_head:
                raise ConfigError(f"stage {i} width {self.widths[i]} not divisible by {self.dims_per_head} dims/head")

    @property
    def label(self):
        return "-".join(self.stages)

    @classmethod
    def full(cls, stages="CCVVCC", use_gdn=False, **kw):
        """Full-size configuration (32x32 input, 256-dim trunk)."""
        return cls(stages=stages, use_gdn=use_gdn, **kw)

    @classmethod
    def toy(cls, stages="CCVVCC", use_gdn=False, **kw):
        """Small configuration for desk-scale training on 8x8 or 16x16 images."""
        base = dict(
            widths=(16, 32, 32, 32, 32, 16),
            depths=(1, 1, 1, 1, 1, 1),
            kernel_size=3,
            stem_kernel=5,
            head_kernel=3,
            dims_per_head=8,
            mlp_expansion=2,
        )
        base.update(kw)
        return cls(stages=stages, use_gdn=use_gdn, **base)

    def vit_config(self, stage):
        w = self.widths[stage]
        return nn.ViTStageConfig(w // self.dims_per_head, self.dims_per_head, self.mlp_expansion, w, self.attn_scale)


def bandwidth_ratio(s, h, w):
    """Complex symbols per source pixel value, ``S / (H*W*3)``."""
    if min(s, h, w) <= 0:
        raise ValueError("all arguments must be positive")
    return Fraction(int(s), int(h) * int(w) * 3)


@dataclass
class SymbolBlock:
    """Complex baseband symbols stored as ``2S`` interleaved I/Q reals."""

    iq: np.ndarray
    source_dims: tuple = (0, 0)
    zero_power: bool = False

    def __post_init__(self):
        self.iq = np.asarray(self.iq, dtype=np.float64).reshape(-1)
        if self.iq.size % 2:
            raise ValueError("interleaved I/Q needs an even number of reals")

    @property
    def n_symbols(self):
        return self.iq.size // 2

    def __len__(self):
        return self.n_symbols

    @property
    def i(self):
        return self.iq[0::2]

    @property
    def q(self):
        return self.iq[1::2]

    def complex(self):
        return self.iq[0::2] + 1j * self.iq[1::2]

    @classmethod
    def from_complex(cls, z, source_dims=(0, 0)):
        z = np.asarray(z, dtype=np.complex128).reshape(-1)
        iq = np.empty(2 * z.size)
        iq[0::2], iq[1::2] = z.real, z.imag
        return cls(iq, source_dims)

    def mean_power(self):
        return float(np.mean(self.iq[0::2] ** 2 + self.iq[1::2] ** 2)) if self.iq.size else 0.0

    def with_iq(self, iq):
        return SymbolBlock(iq, self.source_dims)


def power_normalize(s):
    """Scale symbols to unit mean power, ``s * sqrt(S / sum|s_i|^2)``.

    Accepts a :class:`SymbolBlock`, a complex array, or a ``(..., S, 2)`` tensor
    (normalised per leading index, differentiable). Zero-power input returns zeros
    and sets ``zero_power`` on a SymbolBlock.
    """
    if isinstance(s, Tensor):
        return _power_normalize_tensor(s)
    if isinstance(s, SymbolBlock):
        iq = s.iq
        dims = s.source_dims
    else:
        blk = SymbolBlock.from_complex(s)
        iq, dims = blk.iq, blk.source_dims
    if iq.size < 2:
        raise ValueError("need at least one symbol")
    energy = float(np.sum(iq * iq))
    if energy == 0.0:
        out = SymbolBlock(np.zeros_like(iq), dims)
        out.zero_power = True
        return out
    return SymbolBlock(iq * math.sqrt((iq.size // 2) / energy), dims)


def _power_normalize_tensor(s):
    x = s.data
    n_sym = x.shape[-2]
    axes = (-2, -1)
    q = np.sum(x * x, axis=axes, keepdims=True)
    safe = np.where(q > 0, q, 1.0)
    r = np.where(q > 0, np.sqrt(n_sym / safe), 0.0).astype(x.dtype)
    out = x * r

    def backward(g):
        return (r * g - (r / safe) * x * np.sum(g * x, axis=axes, keepdims=True),)

    return T._make(out, (s,), backward)


@dataclass
class CostReport:
    param_count: int
    flop_count: int
    breakdown: list = field(default_factory=list)  # (name, params, flops)

    @property
    def gflops(self):
        return self.flop_count / 1e9

    @property
    def mparams(self):
        return self.param_count / 1e6


class Codec(nn.Module):
    def __init__(self, spec: ArchSpec, ratio, image_dims=(32, 32), seed=0):
        ratio = Fraction(ratio)
        h, w = image_dims
        if h % 4 or w % 4:
            raise ConfigError("image dims must be divisible by 4")
        self.spec = spec
        self.ratio = ratio
        self.image_dims = (h, w)
        self.grid = (h // 4, w // 4)
        s = ratio * h * w * 3
        if s.denominator != 1:
            raise ConfigError(f"ratio {ratio} gives a non-integral symbol count {s}")
        self.n_symbols = int(s)
        c_sym = Fraction(2 * self.n_symbols, self.grid[0] * self.grid[1])
        if c_sym.denominator != 1:
            raise ConfigError(f"ratio {ratio} gives non-integral symbol channels {c_sym}")
        self.symbol_channels = int(c_sym)
        self.seed = seed

        gen = RngStream(seed, INIT).generator()
        grids = [(h // 2, w // 2), (h // 4, w // 4), self.grid, self.grid, (h // 2, w // 2), (h, w)]
        ins = [3, spec.widths[0], spec.widths[1], spec.widths[3], spec.widths[3], spec.widths[4]]
        self.stages = []
        for i, kind in enumerate(spec.stages):
            if kind == "C":
                cfg = nn.ConvStageConfig(
                    kernel_size=spec.kernel_size,
                    first_kernel_size=spec.stem_kernel if i == 0 else None,
                    in_channels=ins[i],
                    out_channels=spec.widths[i],
                    resample=_RESAMPLE[i],
                    use_gdn=spec.use_gdn,
                    inverse_gdn=i >= 3,
                    depth=spec.depths[i],
                )
                self.stages.append(nn.ConvStage(cfg, gen))
            else:
                self.stages.append(
                    nn.ViTStage(ins[i], spec.vit_config(i), grids[i], gen, _RESAMPLE[i], spec.depths[i])
                )
        self.project = nn.Dense(spec.widths[2], self.symbol_channels, gen)
        self.deproject = nn.Dense(self.symbol_channels, spec.widths[3], gen)
        self.head = nn.Conv2d(spec.head_kernel, spec.widths[5], 3, gen)

    # -- forward paths ------------------------------------------------------
    def encoder_features(self, x):
        feats = []
        for stage in self.stages[:3]:
            x = stage(x)
            feats.append(x)
        return feats

    def symbols_tensor(self, features):
        b = features.shape[0]
        z = self.project(features)
        return power_normalize(T.reshape(z, (b, self.n_symbols, 2)))

    def decoder_features(self, y):
        b = y.shape[0]
        h, w = self.grid
        x = self.deproject(T.reshape(y, (b, h, w, self.symbol_channels)))
        feats = []
        for stage in self.stages[3:]:
            x = stage(x)
            feats.append(x)
        return feats

    def reconstruct(self, last_features):
        return T.sigmoid(self.head(last_features))

    def forward(self, images, channel=None):
        """Full differentiable pass. ``channel`` maps a ``(B, S, 2)`` symbol tensor
        to its received version. Returns ``(reconstruction, features)`` where
        ``features`` maps layer index 0-5 and ``"symbols"`` to tensors."""
        images = _as_batch(images)
        enc = self.encoder_features(images)
        sym = self.symbols_tensor(enc[-1])
        rx = channel(sym) if channel is not None else sym
        dec = self.decoder_features(rx)
        feats = {i: f for i, f in enumerate(enc + dec)}
        feats["symbols"] = sym
        return self.reconstruct(dec[-1]), feats

    def vit_stage(self, layer_id):
        stage = self.stages[layer_id]
        if not isinstance(stage, nn.ViTStage):
            raise ValueError(f"layer {layer_id} is convolutional, not a ViT stage")
        return stage

    def named_arrays(self):
        return [(name, p.data) for name, p in self.named_parameters()]

    def load_arrays(self, arrays):
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype)

    def save(self, path):
        checkpoint.save(path, self.named_arrays())

    def load(self, path):
        self.load_arrays(checkpoint.load(path))
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _as_batch(x):
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=T.default_dtype()))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    return x


def build_codec(spec: ArchSpec, bandwidth_ratio=Fraction(1, 6), image_dims=(32, 32), seed=0):
    return Codec(spec, bandwidth_ratio, image_dims, seed)


def encode(codec: Codec, x):
    """Encode one ``H x W x 3`` image in ``[0, 1]`` to a power-normalised SymbolBlock."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.shape != codec.image_dims + (3,):
        raise ValueError(f"expected image of shape {codec.image_dims + (3,)}, got {arr.shape}")
    with T.no_grad():
        feats = codec.encoder_features(_as_batch(arr.astype(T.default_dtype(), copy=False)))
        raw = T.reshape(codec.project(feats[-1]), (-1,))
    return power_normalize(SymbolBlock(raw.data, codec.image_dims))


def encode_batch(codec: Codec, images):
    """Encode ``(B, H, W, 3)`` images to a ``(B, S)`` complex array (unit power per row)."""
    with T.no_grad():
        sym = codec.symbols_tensor(codec.encoder_features(_as_batch(images))[-1]).data
    return sym[..., 0] + 1j * sym[..., 1]


def decode(codec: Codec, y):
    """Reconstruct an image from received symbols (SymbolBlock or complex array)."""
    if isinstance(y, SymbolBlock):
        z = y.complex()
    else:
        z = np.asarray(y).reshape(-1)
    if z.size != codec.n_symbols:
        raise ValueError(f"expected {codec.n_symbols} symbols, got {z.size}")
    return decode_batch(codec, z[None])[0]


def decode_batch(codec: Codec, z):
    z = np.asarray(z)
    iq = np.stack([z.real, z.imag], axis=-1).astype(T.default_dtype())
    with T.no_grad():
        dec = codec.decoder_features(Tensor(iq))
        return codec.reconstruct(dec[-1]).data


def count_cost(codec: Codec):
    """Parameter count and forward FLOPs (2 per multiply-accumulate) for one image."""
    h, w = codec.image_dims
    shape = (h, w, 3)
    rows = []
    for i, stage in enumerate(codec.stages[:3]):
        f, shape = stage.cost(shape)
        rows.append((f"stage{i}", stage.num_params(), f))
    f, shape = codec.project.cost(shape)
    rows.append(("projection", codec.project.num_params(), f))
    f, shape = codec.deproject.cost(shape)
    rows.append(("deprojection", codec.deproject.num_params(), f))
    for i, stage in enumerate(codec.stages[3:], start=3):
        f, shape = stage.cost(shape)
        rows.append((f"stage{i}", stage.num_params(), f))
    f, shape = codec.head.cost(shape)
    rows.append(("head", codec.head.num_params(), f))
    return CostReport(sum(r[1] for r in rows), sum(r[2] for r in rows), rows)


# -- config files ---------------------------------------------------------------
_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def parse_config(text):
    """Parse ``key = value`` lines (``#`` comments) into a dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        out[key.strip().lower().replace("-", "_")] = val.strip()
    return out


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())


def parse_bool(v):
    if isinstance(v, bool):
        return v
    try:
        return _BOOL[str(v).strip().lower()]
    except KeyError:
        raise ConfigError(f"not a boolean: {v!r}") from None


def parse_tuple(v):
    return tuple(int(p) for p in str(v).replace(",", " ").split())


def arch_from_config(cfg):
    preset = cfg.get("preset", "full")
    factory = {"full": ArchSpec.full, "toy": ArchSpec.toy}.get(preset)
    if factory is None:
        raise ConfigError(f"unknown preset {preset!r}")
    kw = {}
    if "widths" in cfg:
        kw["widths"] = parse_tuple(cfg["widths"])
    if "depths" in cfg:
        kw["depths"] = parse_tuple(cfg["depths"])
    for key in ("kernel_size", "stem_kernel", "head_kernel", "dims_per_head", "mlp_expansion"):
        if key in cfg:
            kw[key] = int(cfg[key])
    if "heads" in cfg and "dims_per_head" not in cfg:
        # heads given against the trunk width
        width = (kw.get("widths") or factory().widths)[2]
        kw["dims_per_head"] = width // int(cfg["heads"])
    if "attn_scale" in cfg:
        kw["attn_scale"] = cfg["attn_scale"]
    return factory(cfg.get("arch", "CCVVCC"), parse_bool(cfg.get("gdn", "false")), **kw)


def codec_config(codec: Codec, preset=None):
    s = codec.spec
    return {
        "arch": s.stages,
        "gdn": str(s.use_gdn).lower(),
        "ratio": str(codec.ratio),
        "image_size": f"{codec.image_dims[0]} {codec.image_dims[1]}",
        "widths": " ".join(map(str, s.widths)),
        "depths": " ".join(map(str, s.depths)),
        "kernel_size": str(s.kernel_size),
        "stem_kernel": str(s.stem_kernel),
        "head_kernel": str(s.head_kernel),
        "dims_per_head": str(s.dims_per_head),
        "mlp_expansion": str(s.mlp_expansion),
        "attn_scale": s.attn_scale,
        "seed": str(codec.seed),
    }


def codec_from_config(cfg):
    spec = arch_from_config(cfg)
    size = parse_tuple(cfg.get("image_size", "32"))
    dims = (size[0], size[-1])
    return build_codec(spec, Fraction(cfg.get("ratio", "1/6")), dims, int(cfg.get("seed", 0)))


def save_codec(codec, path):
    """Write parameters to ``path`` and the architecture to ``path + '.cfg'``."""
    codec.save(path)
    with open(str(path) + ".cfg", "w", encoding="utf-8") as fh:
        fh.write(format_config(codec_config(codec)))


def load_codec(path):
    cfg = read_config(str(path) + ".cfg")
    return codec_from_config(cfg).load(path)


def with_stages(spec: ArchSpec, stages, use_gdn=None):
    return replace(spec, stages=stages, use_gdn=spec.use_gdn if use_gdn is None else use_gdn)
