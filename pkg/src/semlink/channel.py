"""Channel and transmit-hardware impairment models for complex baseband symbols.

SNR is defined against unit mean symbol power: the complex noise has total
variance ``10**(-snr_db/10)``, split equally over I and Q. ``snr_db=inf`` is the
noiseless flag. Functions take SymbolBlocks (or complex arrays) plus a numpy
Generator; :class:`ChannelLayer` is the differentiable variant used in training,
where noise and fading gains are constants during backward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .codec import SymbolBlock
from .rng import CHANNEL, RngStream

DEEP_FADE = 1e-9


@dataclass
class ChannelConfig:
    kind: str = "awgn"  # awgn | rayleigh_slow | impaired
    snr_db: float = 10.0
    equalization: str = "none"  # none | perfect | pilot
    rng: RngStream = field(default_factory=lambda: RngStream(0, CHANNEL))

    def __post_init__(self):
        if self.kind not in ("awgn", "rayleigh_slow", "impaired"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.equalization not in ("none", "perfect", "pilot"):
            raise ValueError(f"unknown equalization {self.equalization!r}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError("snr_db must be finite (or +inf for noiseless)")


@dataclass
class ImpairmentConfig:
    clip_threshold: float = 3.0  # multiple of the nominal per-component RMS
    dac_bits: int = 12
    k_i: float = 0.0
    k_q: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if not 4 <= self.dac_bits <= 16:
            raise ValueError("dac_bits must be in [4, 16]")
        if not self.clip_threshold > 0:
            raise ValueError("clip_threshold must be positive")

    @property
    def full_scale(self):
        """Fixed DAC full scale: the clip level for a unit-power signal."""
        return self.clip_threshold * NOMINAL_RMS


NOMINAL_RMS = math.sqrt(0.5)  # per-component RMS of a unit-power complex signal


def _as_complex(s):
    if isinstance(s, SymbolBlock):
        return s.complex(), s.source_dims
    return np.asarray(s, dtype=np.complex128), (0, 0)


def _wrap(z, dims):
    return SymbolBlock.from_complex(z, dims)


def noise_variance(snr_db):
    return 0.0 if snr_db == math.inf else 10.0 ** (-snr_db / 10.0)


def complex_noise(gen, shape, snr_db):
    var = noise_variance(snr_db)
    if var == 0.0:
        return np.zeros(shape, dtype=np.complex128)
    sd = math.sqrt(var / 2.0)
    n = gen.standard_normal(tuple(np.atleast_1d(shape)) + (2,)) * sd
    return n[..., 0] + 1j * n[..., 1]


def awgn_apply(s, snr_db, gen):
    """``y = s + n`` with complex Gaussian noise of total variance ``10^(-snr/10)``."""
    z, dims = _as_complex(s)
    if snr_db == math.inf:
        return _wrap(z.copy(), dims)
    return _wrap(z + complex_noise(gen, z.shape, snr_db), dims)


@dataclass
class FadingResult:
    symbols: SymbolBlock
    h: complex
    deep_fade: bool


def draw_rayleigh(gen, size=None):
    """``h ~ CN(0, 1)``."""
    g = gen.standard_normal((2,) if size is None else (size, 2)) * math.sqrt(0.5)
    return complex(g[0], g[1]) if size is None else g[:, 0] + 1j * g[:, 1]


def rayleigh_apply(s, snr_db, gen, equalization="none", h=None):
    """Slow Rayleigh fading: one gain per image, ``y = h*s + n``.

    ``h`` may be forced (test hook). ``equalization='perfect'`` divides by the
    true gain; ``'none'`` passes the faded symbols through. Near-zero gains are
    kept and flagged as deep fades.
    """
    z, dims = _as_complex(s)
    if h is None:
        h = draw_rayleigh(gen)
    y = h * z + complex_noise(gen, z.shape, snr_db)
    deep = abs(h) < DEEP_FADE
    if equalization == "perfect" and not deep:
        y = y / h
    return FadingResult(_wrap(y, dims), complex(h), deep)


@dataclass
class ClipResult:
    symbols: SymbolBlock
    clip_fraction: float


def clip_symbols(s, threshold, rms=None):
    """Clamp I and Q independently to ``+-threshold * rms``.

    ``rms`` is the per-component RMS; by default it is measured from the input.
    The reported fraction counts clipped components over all ``2S`` components.
    """
    z, dims = _as_complex(s)
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if rms is None:
        rms = math.sqrt(np.mean(z.real**2 + z.imag**2) / 2.0) if z.size else 0.0
    level = threshold * rms
    if level == math.inf:
        return ClipResult(_wrap(z.copy(), dims), 0.0)
    re = np.clip(z.real, -level, level)
    im = np.clip(z.imag, -level, level)
    clipped = np.count_nonzero(np.abs(z.real) > level) + np.count_nonzero(np.abs(z.imag) > level)
    frac = clipped / (2 * z.size) if z.size else 0.0
    return ClipResult(_wrap(re + 1j * im, dims), frac)


def quantize_real(x, bits, full_scale):
    """Uniform mid-rise quantizer with ``2**bits`` levels across ``[-fs, fs]``."""
    levels = 2**bits
    step = 2.0 * full_scale / levels
    idx = np.clip(np.floor(np.asarray(x) / step), -levels // 2, levels // 2 - 1)
    return (idx + 0.5) * step


def quantize_dac(s, dac_bits, full_scale):
    """Quantize I and Q components with a mid-rise DAC model."""
    z, dims = _as_complex(s)
    return _wrap(quantize_real(z.real, dac_bits, full_scale) + 1j * quantize_real(z.imag, dac_bits, full_scale), dims)


def apply_iq_imbalance(s, k_i, k_q):
    """Cross-leakage between branches: ``i' = i + k_q q``, ``q' = k_i i + q``."""
    z, dims = _as_complex(s)
    i, q = z.real, z.imag
    return _wrap((i + k_q * q) + 1j * (k_i * i + q), dims)


def impairment_chain(s, imp: ImpairmentConfig, amplitude=1.0):
    """Transmit-side chain: clip, then DAC quantization, then I/Q imbalance.

    The clip level and DAC full scale are fixed hardware constants referred to
    a unit-power signal, so scaling ``amplitude`` down uses fewer DAC levels.
    """
    z, dims = _as_complex(s)
    z = z * amplitude
    if not imp.enabled:
        return _wrap(z, dims)
    z = clip_symbols(z, imp.clip_threshold, rms=NOMINAL_RMS).symbols.complex()
    z = quantize_dac(z, imp.dac_bits, imp.full_scale).complex()
    return apply_iq_imbalance(SymbolBlock.from_complex(z, dims), imp.k_i, imp.k_q)


def empirical_snr(clean, noisy):
    """``10 log10(sum|clean|^2 / sum|noisy - clean|^2)``; ``inf`` for identical input."""
    c, _ = _as_complex(clean)
    n, _ = _as_complex(noisy)
    if c.shape != n.shape:
        raise ValueError("length mismatch")
    err = float(np.sum(np.abs(n - c) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(np.abs(c) ** 2)) / err)


class ChannelLayer:
    """Differentiable channel over ``(B, S, 2)`` symbol tensors.

    Noise (and for Rayleigh the per-image gain) is drawn from ``gen`` on each call
    and treated as a constant in backward, so ``dy/ds`` is the identity (AWGN)
    or the complex gain ``h`` (Rayleigh).
    """

    def __init__(self, cfg: ChannelConfig, gen=None):
        self.cfg = cfg
        self.gen = gen if gen is not None else cfg.rng.generator()
        self.last_h = None

    def __call__(self, s):
        b, n, _ = s.shape
        var = noise_variance(self.cfg.snr_db)
        noise = None
        if var:
            noise = (self.gen.standard_normal(s.shape) * math.sqrt(var / 2.0)).astype(s.dtype)
        if self.cfg.kind == "rayleigh_slow":
            h = draw_rayleigh(self.gen, b)
            self.last_h = h
            y = rotate(s, h)
            if noise is not None:
                y = T.add(y, T.Tensor(noise))
            if self.cfg.equalization == "perfect":
                inv = np.where(np.abs(h) < DEEP_FADE, 1.0, 1.0 / np.where(h == 0, 1, h))
                y = rotate(y, inv)
            return y
        if noise is None:
            return s
        return T.add(s, T.Tensor(noise))


def rotate(s, h):
    """Multiply ``(B, S, 2)`` I/Q tensors by one complex gain per batch row."""
    hr = np.real(h).reshape(-1, 1).astype(s.dtype)
    hi = np.imag(h).reshape(-1, 1).astype(s.dtype)
    x = s.data
    out = np.empty_like(x)
    out[..., 0] = hr * x[..., 0] - hi * x[..., 1]
    out[..., 1] = hi * x[..., 0] + hr * x[..., 1]

    def backward(g):
        gx = np.empty_like(g)
        gx[..., 0] = hr * g[..., 0] + hi * g[..., 1]
        gx[..., 1] = -hi * g[..., 0] + hr * g[..., 1]
        return (gx,)

    return T._make(out, (s,), backward)
