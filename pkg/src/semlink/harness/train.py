"""End-to-end training and evaluation loops."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .. import analysis
from .. import tensor as T
from ..channel import ChannelConfig, ChannelLayer
from ..codec import ArchSpec, build_codec, count_cost, save_codec
from ..rng import CHANNEL, DATA, RngStream

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    arch: ArchSpec = field(default_factory=ArchSpec.toy)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    bandwidth_ratio: Fraction = Fraction(1, 6)
    image_dims: tuple = (8, 8)
    epochs: int = 600
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    dtype: str = "float32"
    analysis_hooks: tuple = (0, 1, 2)  # encoder layers traced for cosine similarity
    probe_size: int = 16
    checkpoint_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.bandwidth_ratio = Fraction(self.bandwidth_ratio)

    def echo(self):
        """Flat, JSON-friendly view of the configuration."""
        return {
            "arch": self.arch.stages,
            "gdn": self.arch.use_gdn,
            "widths": list(self.arch.widths),
            "depths": list(self.arch.depths),
            "channel": self.channel.kind,
            "train_snr_db": self.channel.snr_db,
            "equalization": self.channel.equalization,
            "bandwidth_ratio": str(self.bandwidth_ratio),
            "image_dims": list(self.image_dims),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
            "dtype": self.dtype,
        }


@dataclass
class RunReport:
    config: dict
    loss: list = field(default_factory=list)
    val_psnr: list = field(default_factory=list)
    val_ssim: list = field(default_factory=list)
    similarity: dict = field(default_factory=dict)  # "layer<i>" -> per-epoch S
    profiles: dict = field(default_factory=dict)  # "layer<i>" -> half-diagonal profile
    initial_val_psnr: float | None = None
    test: dict | None = None
    cost: dict | None = None
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EvalResult:
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    psnr: list
    ssim: list
    snr_db: float

    def summary(self):
        return {
            "psnr_mean": self.psnr_mean,
            "psnr_std": self.psnr_std,
            "ssim_mean": self.ssim_mean,
            "ssim_std": self.ssim_std,
            "snr_db": self.snr_db,
            "n_images": len(self.psnr),
        }


def _dtype(name):
    return {"float32": np.float32, "float64": np.float64}[name]


def image_metrics(originals, recon):
    win, sigma = analysis.ssim_window_for(originals.shape[1:3])
    ps = [analysis.psnr(a, b) for a, b in zip(originals, recon)]
    ss = [analysis.ssim(a, b, win, sigma) for a, b in zip(originals, recon)]
    return ps, ss


def _finite_mean(vals):
    arr = np.asarray(vals, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    return float(arr.mean()) if arr.size else math.inf


def evaluate(codec, data, channel: ChannelConfig, n_images=None, seed=0, batch_size=64):
    """Mean/std PSNR and SSIM through ``channel``; deterministic given ``seed``.

    When ``n_images`` is smaller than the dataset a seeded random subset is used.
    """
    data = np.asarray(data)
    if n_images is not None and n_images < len(data):
        idx = np.sort(RngStream(seed, DATA).generator("eval").choice(len(data), n_images, replace=False))
        data = data[idx]
    layer = ChannelLayer(channel, RngStream(seed, CHANNEL).generator("eval"))
    dt = codec.parameters()[0].dtype
    recon = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            batch = T.Tensor(data[start:start + batch_size].astype(dt))
            out, _ = codec.forward(batch, layer)
            recon.append(out.data)
    recon = np.concatenate(recon) if recon else np.zeros_like(data)
    ps, ss = image_metrics(data, recon)
    finite = [p for p in ps if math.isfinite(p)]
    return EvalResult(
        _finite_mean(ps), float(np.std(finite)) if finite else 0.0,
        float(np.mean(ss)), float(np.std(ss)), ps, ss, channel.snr_db,
    )


def train(cfg: TrainConfig, data, val=None, progress=None):
    """Train a codec end to end through the channel. Returns ``(codec, RunReport)``.

    Each step runs encode -> channel -> decode -> MSE -> backward -> Adam. With
    ``analysis_hooks`` set, the mean cosine similarity of those encoder layers on a
    fixed probe batch is recorded after every epoch.
    """
    t0 = time.perf_counter()
    dt = _dtype(cfg.dtype)
    data = np.asarray(data, dtype=dt)
    val = data[: min(len(data), 64)] if val is None else np.asarray(val, dtype=dt)
    probe = T.Tensor(val[: cfg.probe_size])

    with T.precision(dt):
        codec = build_codec(cfg.arch, cfg.bandwidth_ratio, cfg.image_dims, cfg.seed)
    params = codec.parameters()
    state = T.AdamState.for_params(params, lr=cfg.lr)
    shuffle = RngStream(cfg.seed, DATA).generator("shuffle")
    channel = ChannelLayer(cfg.channel, RngStream(cfg.seed, CHANNEL).generator("train"))

    cost = count_cost(codec)
    report = RunReport(
        cfg.echo(),
        similarity={f"layer{i}": [] for i in cfg.analysis_hooks},
        cost={"params": cost.param_count, "flops": cost.flop_count},
    )
    val_seed = cfg.seed + 1
    report.initial_val_psnr = evaluate(codec, val, cfg.channel, seed=val_seed).psnr_mean
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None

    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = T.Tensor(data[order[start:start + cfg.batch_size]])
            recon, _ = codec.forward(batch, channel)
            loss = T.mse_loss(recon, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                ckpt = None
                if out_dir is not None:
                    out_dir.mkdir(parents=True, exist_ok=True)
                    ckpt = out_dir / f"diagnostic_epoch{epoch}.semw"
                    save_codec(codec, ckpt)
                raise TrainingAborted(f"non-finite loss {value} at epoch {epoch}, step {start // cfg.batch_size}", ckpt)
            loss.backward()
            T.adam_step(params, [p.grad for p in params], state)
            codec.zero_grad()
            total += value * len(batch)
            count += len(batch)
        report.loss.append(total / count)

        ev = evaluate(codec, val, cfg.channel, seed=val_seed)
        report.val_psnr.append(ev.psnr_mean)
        report.val_ssim.append(ev.ssim_mean)
        if cfg.analysis_hooks:
            with T.no_grad():
                feats = codec.encoder_features(probe)
            for i in cfg.analysis_hooks:
                report.similarity[f"layer{i}"].append(analysis.mean_similarity(feats[i], i))
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_codec(codec, out_dir / f"epoch{epoch}.semw")
        if progress is not None:
            progress(epoch, report)
        log.debug("epoch %d loss %.5f val psnr %.2f", epoch, report.loss[-1], ev.psnr_mean)

    with T.no_grad():
        _, feats = codec.forward(probe)
    for i in range(6):
        f = feats[i]
        if f.shape[1] == f.shape[2] and f.shape[1] >= 2:
            report.profiles[f"layer{i}"] = analysis.mean_profile(f, i).y.tolist()
    report.wall_clock = time.perf_counter() - t0
    return codec, report
