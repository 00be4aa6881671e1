"""Command-line interface: ``semlink <verb> [options]``.

Options given on the command line override keys read from ``--config``
(``key = value`` lines, the same format written next to checkpoints).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis
from .channel import ChannelConfig, ImpairmentConfig
from .codec import ArchSpec, arch_from_config, build_codec, count_cost, load_codec, read_config, save_codec
from .frame import PilotConfig
from .rng import CHANNEL, RngStream

log = logging.getLogger("semlink")

_TRAIN_KEYS = ("epochs", "lr", "batch_size", "dtype", "snr_db", "channel", "equalization", "n_train", "n_val")


def _addr(text):
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


def _query(text):
    r, c = (int(v) for v in text.replace(",", " ").split())
    return r, c


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _common(p):
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path (directory for train, file for others)")
    p.add_argument("--snr-db", type=float)
    p.add_argument("--ratio", help="bandwidth ratio, e.g. 1/6")
    p.add_argument("--arch", help="six-letter stage string such as CCVVCC")


def _data_opts(p):
    p.add_argument("--data", choices=("auto", "toy", "cifar"), default=None,
                   help="image source; auto uses CIFAR when $SEMLINK_DATA_DIR has it")
    p.add_argument("--n-images", type=int)
    p.add_argument("--image-size", type=int, help="toy image side (CIFAR is always 32)")


def _checkpoint(p, required=True):
    p.add_argument("--checkpoint", required=required, help="codec weights (architecture read from <path>.cfg)")


def build_parser():
    ap = argparse.ArgumentParser(prog="semlink", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a codec end to end")
    _common(p)
    _data_opts(p)
    p.add_argument("--preset", choices=("toy", "full"))
    p.add_argument("--gdn", action="store_true", default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--channel", choices=("awgn", "rayleigh_slow"))
    p.add_argument("--format", choices=("json", "csv", "both"), default="both")

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint through a channel")
    _common(p)
    _data_opts(p)
    _checkpoint(p)
    p.add_argument("--channel", choices=("awgn", "rayleigh_slow"), default="awgn")
    p.add_argument("--equalization", choices=("none", "perfect"), default="none")

    p = sub.add_parser("analyze", help="feature analysis of a checkpoint")
    p.add_argument("what", choices=("cossim", "fourier", "attention"))
    _common(p)
    _data_opts(p)
    _checkpoint(p)
    p.add_argument("--layer", type=int, help="layer id (default: all for cossim/fourier, 2 for attention)")
    p.add_argument("--query", type=_query, default=None, help="attention query 'row,col' (default: grid centre)")

    p = sub.add_parser("linksim", help="framed transmission through the channel emulator")
    _common(p)
    _data_opts(p)
    _checkpoint(p)
    p.add_argument("--emulator", type=_addr, help="host:port of a running emulator (default: in-process)")
    p.add_argument("--amplitude", type=_floats, default=[1.0], help="one or more transmit amplitudes")
    _impairment_opts(p)

    p = sub.add_parser("emulate", help="run the UDP channel emulator")
    _common(p)
    p.add_argument("--bind", type=_addr, default=("127.0.0.1", 50007))
    p.add_argument("--channel", choices=("awgn", "rayleigh_slow"), default="awgn")
    _impairment_opts(p)

    p = sub.add_parser("sweep", help="train and evaluate over a grid")
    _common(p)
    _data_opts(p)
    p.add_argument("--archs", help="comma-separated stage strings (default: --arch)")
    p.add_argument("--table", action="store_true", help="use the ten comparison-table architectures")
    p.add_argument("--snrs", type=_floats, help="SNR grid in dB")
    p.add_argument("--ratios", help="comma-separated bandwidth ratios")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gdn", action="store_true", default=None)

    p = sub.add_parser("cost", help="parameter and FLOP counts")
    _common(p)
    p.add_argument("--preset", choices=("toy", "full"))
    p.add_argument("--gdn", action="store_true", default=None)
    p.add_argument("--image-size", type=int)
    p.add_argument("--table", action="store_true", help="all comparison-table architectures")
    p.add_argument("--breakdown", action="store_true")
    return ap


def _impairment_opts(p):
    p.add_argument("--clip", type=float, default=3.0, help="clip level in multiples of the nominal RMS")
    p.add_argument("--dac-bits", type=int, default=12)
    p.add_argument("--k-i", type=float, default=0.0)
    p.add_argument("--k-q", type=float, default=0.0)
    p.add_argument("--no-impairments", action="store_true")


# -- helpers ------------------------------------------------------------------
def _settings(args):
    """Config file values overlaid with explicit command-line options."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for key in ("seed", "snr_db", "ratio", "arch", "preset", "gdn", "image_size", *_TRAIN_KEYS):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = str(val).lower() if isinstance(val, bool) else str(val)
    return cfg


def _load_images(source, split, size, n, seed):
    from .harness import data

    source = source or "auto"
    path = data.find_cifar(split) if source in ("auto", "cifar") else None
    if source == "cifar" and path is None:
        raise SystemExit(f"CIFAR {split} batch not found; set ${data.DATA_DIR_ENV}")
    if path is not None:
        if size != 32:
            raise SystemExit("CIFAR images are 32x32; use --image-size 32 / the full preset")
        imgs = data.load_cifar_array(path, limit=n)
        log.info("loaded %d CIFAR images from %s", len(imgs), path)
        return imgs
    n = n or 264
    offset = 0 if split == "train" else 10_000
    return data.toy_images(n, size, seed + offset)


def _dump(obj, out=None):
    text = json.dumps(obj, indent=1, default=_jsonable)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (Fraction, complex)):
        return str(v)
    raise TypeError(f"not serialisable: {type(v).__name__}")


def _channel(kind, snr, seed, equalization="none"):
    return ChannelConfig(kind, snr, equalization, RngStream(seed, CHANNEL))


def _impairments(args):
    return ImpairmentConfig(args.clip, args.dac_bits, args.k_i, args.k_q, enabled=not args.no_impairments)


# -- verbs ----------------------------------------------------------------------
def cmd_train(args):
    from .harness.report import emit_report
    from .harness.train import TrainConfig, train

    cfg = _settings(args)
    cfg.setdefault("preset", "toy")
    spec = arch_from_config(cfg)
    seed = int(cfg.get("seed", 0))
    size = int(cfg.get("image_size", 8 if cfg["preset"] == "toy" else 32))
    tc = TrainConfig(
        arch=spec,
        channel=_channel(cfg.get("channel", "awgn"), float(cfg.get("snr_db", 10.0)), seed,
                         cfg.get("equalization", "none")),
        bandwidth_ratio=Fraction(cfg.get("ratio", "1/6")),
        image_dims=(size, size),
        epochs=int(cfg.get("epochs", 50)),
        batch_size=int(cfg.get("batch_size", 64)),
        lr=float(cfg.get("lr", 1e-3 if cfg["preset"] == "toy" else 1e-4)),
        seed=seed,
        dtype=cfg.get("dtype", "float32"),
        out_dir=args.out,
    )
    n = args.n_images
    train_x = _load_images(args.data, "train", size, n or int(cfg.get("n_train", 200)), seed)
    val_x = _load_images(args.data, "test", size, int(cfg.get("n_val", 64)), seed)

    def progress(epoch, rep):
        log.info("epoch %d  loss %.5f  val psnr %.2f dB", epoch, rep.loss[-1], rep.val_psnr[-1])

    codec, rep = train(tc, train_x, val_x, progress)
    out = Path(args.out or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out / "codec.semw")
    formats = ("json", "csv") if args.format == "both" else (args.format,)
    paths = [p for f in formats for p in emit_report(rep, f, out / "report")]
    print(f"initial val PSNR {rep.initial_val_psnr:.2f} dB -> final {rep.val_psnr[-1]:.2f} dB "
          f"({rep.wall_clock:.1f} s)")
    for p in [out / "codec.semw", *paths]:
        print(f"wrote {p}")
    return 0


def _codec_and_images(args, cfg):
    codec = load_codec(args.checkpoint)
    seed = int(cfg.get("seed", 0))
    imgs = _load_images(args.data, "test", codec.image_dims[0], args.n_images or 64, seed)
    return codec, imgs, seed


def cmd_eval(args):
    from .harness.train import evaluate

    cfg = _settings(args)
    codec, imgs, seed = _codec_and_images(args, cfg)
    snr = float(cfg.get("snr_db", 10.0))
    ev = evaluate(codec, imgs, _channel(args.channel, snr, seed, args.equalization), seed=seed)
    _dump({"checkpoint": args.checkpoint, "channel": args.channel, **ev.summary()}, args.out)
    return 0


def cmd_analyze(args):
    from . import tensor as T

    cfg = _settings(args)
    codec, imgs, _ = _codec_and_images(args, cfg)
    if args.what == "attention":
        layer = 2 if args.layer is None else args.layer
        stage = codec.vit_stage(layer)
        a = stage.attention_layers()[0].pos
        query = args.query or (a.h // 2, a.w // 2)
        amap = analysis.extract_attention_map(codec, layer, query, imgs)
        _dump({"layer": layer, "query": list(query), "grid": amap.grid}, args.out)
        return 0
    with T.no_grad():
        _, feats = codec.forward(T.Tensor(imgs.astype(codec.parameters()[0].dtype)))
    layers = range(6) if args.layer is None else [args.layer]
    result = {}
    for i in layers:
        f = feats[i]
        if args.what == "cossim":
            result[f"layer{i}"] = analysis.mean_similarity(f, i)
        elif f.shape[1] == f.shape[2]:
            result[f"layer{i}"] = analysis.mean_profile(f, i).y
    _dump({"analysis": args.what, "n_images": len(imgs), "layers": result}, args.out)
    return 0


def cmd_linksim(args):
    from .harness.emulator import EmulatorSettings, InProcessTransport, UdpTransport
    from .harness.linksim import linksim

    cfg = _settings(args)
    codec, imgs, seed = _codec_and_images(args, cfg)
    snr = float(cfg.get("snr_db", 10.0))
    if args.emulator:
        transport = UdpTransport(args.emulator)
    else:
        transport = InProcessTransport(EmulatorSettings(_channel("awgn", snr, seed), _impairments(args)))
    results = []
    try:
        for k, amp in enumerate(args.amplitude):
            rep = linksim(codec, imgs, transport, PilotConfig(seed=seed), amp, start_sequence=k * len(imgs))
            results.append({"amplitude": amp, "psnr": rep.psnr_mean, "ssim": rep.ssim_mean,
                            "symbol_snr_db": rep.symbol_snr_mean, "failures": len(rep.failures)})
            log.info("amplitude %.3g: %s", amp, results[-1])
    finally:
        transport.close()
    _dump({"checkpoint": args.checkpoint, "configured_snr_db": snr, "runs": results}, args.out)
    return 0


def cmd_emulate(args):
    from .harness.emulator import emulator_serve

    cfg = _settings(args)
    snr = float(cfg.get("snr_db", 10.0))
    ch = _channel(args.channel, snr, int(cfg.get("seed", 0)))
    print(f"emulator on {args.bind[0]}:{args.bind[1]}  {args.channel} {snr} dB", flush=True)
    try:
        emulator_serve(args.bind, ch, _impairments(args))
    except KeyboardInterrupt:
        pass
    return 0


def cmd_sweep(args):
    from .harness.sweep import grid, sweep, table_rows
    from .harness.train import TrainConfig

    cfg = _settings(args)
    cfg.setdefault("preset", "toy")
    base_arch = arch_from_config(cfg)
    if args.table:
        archs = table_rows(base_arch)
    else:
        names = (args.archs or base_arch.stages).split(",")
        archs = [ArchSpec(**{**base_arch.__dict__, "stages": s.strip()}) for s in names]
    snrs = args.snrs or [float(cfg.get("snr_db", 10.0))]
    ratios = [Fraction(r.strip()) for r in (args.ratios or cfg.get("ratio", "1/6")).split(",")]
    seed = int(cfg.get("seed", 0))
    size = int(cfg.get("image_size", 8))
    base = TrainConfig(image_dims=(size, size), epochs=int(cfg.get("epochs", 20)),
                       lr=float(cfg.get("lr", 1e-3)), seed=seed)
    train_x = _load_images(args.data, "train", size, args.n_images or 200, seed)
    val_x = _load_images(args.data, "test", size, 64, seed)
    out = args.out or "sweep.csv"
    rows = sweep(grid(archs, snrs, ratios), train_x, val_x, base, out,
                 progress=lambda i, r: log.info("cell %d: %s", i, r))
    for r in rows:
        psnr = r.get("psnr")
        print(f"{r['arch']:<12} gdn={r['gdn']} snr={r['snr_db']:>5} ratio={r['bandwidth_ratio']:<5} "
              f"psnr={'-' if psnr is None else f'{psnr:.2f}'}  {r['status']}")
    print(f"wrote {out}")
    return 0


def cmd_cost(args):
    from .codec import COMPARISON_ROWS

    cfg = _settings(args)
    cfg.setdefault("preset", "full")
    base = arch_from_config(cfg)
    size = int(cfg.get("image_size", 32 if cfg["preset"] == "full" else 8))
    ratio = Fraction(cfg.get("ratio", "1/6"))
    rows = COMPARISON_ROWS if args.table else [(base.stages, base.use_gdn)]
    out = []
    for stages, gdn in rows:
        spec = ArchSpec(**{**base.__dict__, "stages": stages, "use_gdn": gdn})
        c = count_cost(build_codec(spec, ratio, (size, size)))
        out.append({"arch": spec.label, "gdn": gdn, "params_m": round(c.mparams, 3), "gflops": round(c.gflops, 4)})
        if args.breakdown:
            out[-1]["breakdown"] = [{"block": n, "params": p, "flops": f} for n, p, f in c.breakdown]
    if args.out:
        _dump(out, args.out)
    else:
        for r in out:
            print(f"{r['arch']:<12} gdn={str(r['gdn']):<5} params {r['params_m']:8.3f} M   FLOPs {r['gflops']:8.4f} G")
            for b in r.get("breakdown", []):
                print(f"    {b['block']:<14} {b['params']:>10d} {b['flops']:>14d}")
    return 0


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "linksim": cmd_linksim,
    "emulate": cmd_emulate, "sweep": cmd_sweep, "cost": cmd_cost,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
