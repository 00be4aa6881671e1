"""Report emission (JSON and CSV).

CSV schemas (version 1):

* ``<stem>_trace.csv``   one row per epoch:
  ``epoch,loss,val_psnr,val_ssim,cossim_layer0,cossim_layer1,cossim_layer2``
* ``<stem>_profile.csv`` one row per layer and frequency bin:
  ``layer,bin,freq_rad,rel_log_amplitude``
* sweep tables: see :data:`SWEEP_COLUMNS`.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .train import RunReport

SCHEMA_VERSION = 1
TRACE_COLUMNS = ["epoch", "loss", "val_psnr", "val_ssim", "cossim_layer0", "cossim_layer1", "cossim_layer2"]
PROFILE_COLUMNS = ["layer", "bin", "freq_rad", "rel_log_amplitude"]
SWEEP_COLUMNS = [
    "arch", "gdn", "snr_db", "bandwidth_ratio", "psnr", "psnr_std", "ssim", "ssim_std",
    "params", "gflops", "full_params_m", "full_gflops",
    "cossim_layer0", "cossim_layer1", "cossim_layer2", "status",
]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    return str(v)


def trace_rows(run: RunReport):
    for e in range(len(run.loss)):
        row = {"epoch": e + 1, "loss": run.loss[e], "val_psnr": run.val_psnr[e], "val_ssim": run.val_ssim[e]}
        for i in range(3):
            vals = run.similarity.get(f"layer{i}")
            row[f"cossim_layer{i}"] = vals[e] if vals else None
        yield row


def profile_rows(run: RunReport):
    for key, ys in sorted(run.profiles.items()):
        n = 2 * (len(ys) - 1) if len(ys) > 1 else 1
        for b, y in enumerate(ys):
            yield {"layer": key.removeprefix("layer"), "bin": b, "freq_rad": 2 * math.pi * b / n, "rel_log_amplitude": y}


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def emit_report(run: RunReport, fmt, out):
    """Write ``run`` as ``json`` or ``csv`` next to the ``out`` stem; returns the paths."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = out.with_suffix("")
    if fmt == "json":
        path = stem.with_suffix(".json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"schema_version": SCHEMA_VERSION, **run.to_dict()}, fh, indent=1)
        return [path]
    if fmt == "csv":
        trace = Path(f"{stem}_trace.csv")
        prof = Path(f"{stem}_profile.csv")
        write_csv(trace, TRACE_COLUMNS, trace_rows(run))
        write_csv(prof, PROFILE_COLUMNS, profile_rows(run))
        return [trace, prof]
    raise ValueError(f"unknown format {fmt!r}")


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    d.pop("schema_version", None)
    return RunReport.from_dict(d)
