"""Experiment grids over SNR, bandwidth ratio and architecture."""
from __future__ import annotations

import dataclasses
import functools
import itertools
import logging
from dataclasses import dataclass
from fractions import Fraction

from ..channel import ChannelConfig
from ..codec import COMPARISON_ROWS, ArchSpec, build_codec, count_cost, with_stages
from ..rng import CHANNEL, RngStream
from .report import SWEEP_COLUMNS, write_csv
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cell:
    arch: ArchSpec
    snr_db: float
    ratio: Fraction


def grid(archs, snrs, ratios):
    """Cartesian product in (arch, snr, ratio) order."""
    return [Cell(a, float(s), Fraction(r)) for a, s, r in itertools.product(archs, snrs, ratios)]


def table_rows(base: ArchSpec | None = None):
    """The ten comparison architectures built on top of ``base``."""
    base = base or ArchSpec.toy()
    return [with_stages(base, stages, gdn) for stages, gdn in COMPARISON_ROWS]


@functools.lru_cache(maxsize=None)
def full_cost(arch: ArchSpec, ratio=Fraction(1, 6)):
    """Parameters (M) and GFLOPs of the full-size model with the same stage string."""
    c = count_cost(build_codec(ArchSpec.full(arch.stages, arch.use_gdn), ratio, (32, 32)))
    return c.mparams, c.gflops


def run_cell(cell: Cell, train_data, val_data, base: TrainConfig):
    """Train at the cell's SNR and evaluate at the same SNR; returns one row dict."""
    row = {"arch": cell.arch.label, "gdn": int(cell.arch.use_gdn), "snr_db": cell.snr_db,
           "bandwidth_ratio": str(cell.ratio)}
    try:
        row["full_params_m"], row["full_gflops"] = full_cost(cell.arch, cell.ratio)
    except Exception as exc:  # cost of the full-size model is informational only
        log.warning("full-size cost unavailable for %s: %s", cell.arch.label, exc)
    try:
        ch = ChannelConfig("awgn", cell.snr_db, rng=RngStream(base.seed, CHANNEL))
        cfg = dataclasses.replace(base, arch=cell.arch, channel=ch, bandwidth_ratio=cell.ratio)
        codec, rep = train(cfg, train_data, val_data)
        ev = evaluate(codec, val_data, ch, seed=base.seed + 1)
    except Exception as exc:
        log.warning("cell %s failed: %s", row, exc)
        row["status"] = f"error: {type(exc).__name__}: {exc}"
        return row
    cost = count_cost(codec)
    row.update(psnr=ev.psnr_mean, psnr_std=ev.psnr_std, ssim=ev.ssim_mean, ssim_std=ev.ssim_std,
               params=cost.param_count, gflops=cost.gflops, status="ok")
    for key, trace in rep.similarity.items():
        if trace:
            row[f"cossim_{key}"] = trace[-1]
    return row


def sweep(cells, train_data, val_data, base: TrainConfig | None = None, out=None, progress=None):
    """Run every cell in order; failures become ``status`` entries and the sweep continues."""
    base = base or TrainConfig()
    rows = []
    for i, cell in enumerate(cells):
        rows.append(run_cell(cell, train_data, val_data, base))
        if progress is not None:
            progress(i, rows[-1])
    if out is not None:
        write_csv(out, SWEEP_COLUMNS, rows)
    return rows
