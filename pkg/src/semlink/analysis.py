"""Feature-analysis instruments and image quality metrics.

* spatial average cosine similarity of a feature map,
* half-diagonal log-amplitude Fourier profile of channel-averaged features,
* attention maps of a ViT stage at a chosen query position,
* PSNR and SSIM.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .codec import Codec, _as_batch

LOG_EPS = 1e-12
ZERO_NORM = 1e-12


@dataclass
class FeatureMap:
    layer_id: object  # 0-5 or "symbols"
    values: np.ndarray  # H x W x C

    def __post_init__(self):
        v = self.values.data if isinstance(self.values, T.Tensor) else self.values
        self.values = np.asarray(v, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("feature map must be H x W x C")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map has non-finite values")

    @classmethod
    def from_symbols(cls, z, grid):
        """Treat complex symbols as an ``H x W`` grid of 2-vectors (I, Q)."""
        z = np.asarray(z).reshape(-1)
        h, w = grid
        if z.size % (h * w):
            raise ValueError("symbol count not divisible by grid size")
        iq = np.stack([z.real, z.imag], axis=-1).reshape(h, w, -1)
        return cls("symbols", iq)


@dataclass
class SimilarityReport:
    S: float
    layer_id: object
    n_positions: int
    n_excluded: int = 0


def avg_cosine_similarity(f):
    """Mean pairwise cosine similarity between all distinct spatial positions.

    Positions whose feature vector has (near) zero norm are excluded and counted.
    """
    if not isinstance(f, FeatureMap):
        f = FeatureMap(None, f)
    x = f.values.reshape(-1, f.values.shape[-1])
    norms = np.linalg.norm(x, axis=1)
    keep = norms > ZERO_NORM
    n = int(keep.sum())
    if n == 0:
        raise ValueError("all feature vectors are zero")
    if x.shape[0] < 2:
        raise ValueError("need at least two spatial positions")
    if n < 2:
        raise ValueError("fewer than two non-zero feature vectors")
    u = x[keep] / norms[keep, None]
    col = u.sum(axis=0)
    # sum over all ordered pairs minus the diagonal (each diagonal term is 1)
    total = float(col @ col) - float(np.sum(u * u))
    s = total / (n * (n - 1))
    return SimilarityReport(s, f.layer_id, n, int(x.shape[0] - n))


# -- Fourier profile ----------------------------------------------------------
@dataclass
class SpectrumProfile:
    y: np.ndarray
    layer_id: object = None


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft2(x):
    """2D DFT by the direct matrix method, ``F = D_H X D_W``."""
    x = np.asarray(x, dtype=np.float64 if not np.iscomplexobj(x) else np.complex128)
    h, w = x.shape
    return dft_matrix(h) @ x @ dft_matrix(w)


def fourier_profile(f):
    """Half-diagonal log-amplitude relative to DC of the channel-averaged map.

    Accepts an ``H x W x C`` FeatureMap or a plain ``H x W`` array.
    """
    layer = None
    if isinstance(f, FeatureMap):
        layer = f.layer_id
        x = f.values.mean(axis=-1)
    else:
        x = np.asarray(f, dtype=np.float64)
        if x.ndim == 3:
            x = x.mean(axis=-1)
    h, w = x.shape
    if h != w:
        raise ValueError("fourier_profile needs a square grid")
    amp = np.abs(np.diag(dft2(x)))
    yhat = np.log(amp + LOG_EPS) - np.log(amp[0] + LOG_EPS)
    return SpectrumProfile(yhat[: h // 2 + 1], layer)


def mean_profile(feature_batch, layer_id=None):
    """Per-image profiles of a ``(B, H, W, C)`` batch, averaged."""
    arr = feature_batch.data if isinstance(feature_batch, T.Tensor) else np.asarray(feature_batch)
    ys = [fourier_profile(FeatureMap(layer_id, a)).y for a in arr]
    return SpectrumProfile(np.mean(ys, axis=0), layer_id)


def mean_similarity(feature_batch, layer_id=None):
    """Average of per-image similarity over a ``(B, H, W, C)`` batch."""
    arr = feature_batch.data if isinstance(feature_batch, T.Tensor) else np.asarray(feature_batch)
    vals = [avg_cosine_similarity(FeatureMap(layer_id, a)).S for a in arr]
    return float(np.mean(vals))


# -- attention maps -----------------------------------------------------------
@dataclass
class AttentionMap:
    grid: np.ndarray
    query_index: tuple
    layer_id: int


def extract_attention_map(codec: Codec, layer_id, query, dataset, batch_size=64, block=0):
    """Softmaxed attention row of ``query`` (row, col), averaged over heads and images.

    Layer 2 is read on the encoder pass; layer 3 on the decoder pass fed with the
    noiseless encoded symbols.
    """
    stage = codec.vit_stage(layer_id)
    attn_layer = stage.attention_layers()[block]
    h, w = attn_layer.pos.h, attn_layer.pos.w
    r, c = query
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"query {query} outside {h}x{w} grid")
    qi = r * w + c
    images = np.asarray(dataset)
    if images.ndim == 3:
        images = images[None]
    total = np.zeros(h * w)
    count = 0
    attn_layer.record = True
    try:
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                batch = images[start:start + batch_size].astype(T.default_dtype())
                _forward_until(codec, layer_id, _as_batch(batch))
                a = attn_layer.last_attention  # (B, heads, N, N)
                total += a[:, :, qi, :].sum(axis=(0, 1))
                count += a.shape[0] * a.shape[1]
    finally:
        attn_layer.record = False
        attn_layer.last_attention = None
    return AttentionMap((total / count).reshape(h, w), (r, c), layer_id)


def _forward_until(codec, layer_id, x):
    for i, stage in enumerate(codec.stages[:3]):
        x = stage(x)
        if i == layer_id:
            return x
    sym = codec.symbols_tensor(x)
    b = sym.shape[0]
    gh, gw = codec.grid
    x = codec.deproject(T.reshape(sym, (b, gh, gw, codec.symbol_channels)))
    for i, stage in enumerate(codec.stages[3:], start=3):
        x = stage(x)
        if i == layer_id:
            return x
    return x


# -- image quality ------------------------------------------------------------
def psnr(a, b):
    """Peak SNR in dB for images in ``[0, 1]``; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(img, g):
    # separable 'valid' correlation: rows then columns
    k = g.size
    h, w = img.shape
    tmp = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * tmp[:, j:w - k + 1 + j] for j in range(k))


def _gray(x):
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=-1) if x.ndim == 3 else x


def ssim(a, b, win_size=11, sigma=1.5, data_range=1.0):
    """Mean SSIM over all valid Gaussian-window positions of the grayscale images."""
    a, b = _gray(a), _gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim_window_for(shape, preferred=11):
    """Largest odd window not above ``preferred`` that fits ``shape``; sigma scales with it."""
    size = min(preferred, min(shape[:2]))
    if size % 2 == 0:
        size -= 1
    return size, 1.5 * size / 11.0
