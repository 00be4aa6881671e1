"""Long CIFAR-10 run with the full-size codec (informational, not part of the test suite).

    SEMLINK_DATA_DIR=/path/to/cifar python3 scripts/full_scale.py --out runs/full

Trains C-C-V-V-C-C at bandwidth ratio 1/6 over AWGN at 10 dB for 600 epochs on the
five training batches, then evaluates on the test batch. A finished run is expected
to land around 31-32 dB PSNR. Expect days of CPU time; ``--epochs`` and ``--limit``
give a shorter smoke run.
"""
import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from semlink.channel import ChannelConfig
from semlink.codec import ArchSpec
from semlink.harness.data import DATA_DIR_ENV, find_cifar, load_cifar_array
from semlink.harness.report import emit_report
from semlink.harness.train import TrainConfig, evaluate, train


def training_batches(root):
    base = Path(root)
    if (base / "cifar-10-batches-bin").is_dir():
        base = base / "cifar-10-batches-bin"
    return sorted(base.glob("data_batch_*.bin"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=600)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--snr-db", type=float, default=10.0)
    ap.add_argument("--arch", default="CCVVCC")
    ap.add_argument("--gdn", action="store_true")
    ap.add_argument("--limit", type=int, help="images per training batch (smoke runs)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/full_scale")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    test_path = find_cifar("test")
    batches = training_batches(os.environ.get(DATA_DIR_ENV, ""))
    if test_path is None or not batches:
        print(f"CIFAR-10 binaries not found; set {DATA_DIR_ENV} to the directory holding data_batch_*.bin")
        return 1
    train_x = np.concatenate([load_cifar_array(p, args.limit) for p in batches])
    test_x = load_cifar_array(test_path)
    val_x = test_x[:256]

    cfg = TrainConfig(
        arch=ArchSpec.full(args.arch, args.gdn),
        channel=ChannelConfig("awgn", args.snr_db),
        bandwidth_ratio=Fraction(1, 6),
        image_dims=(32, 32),
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        checkpoint_every=10,
        out_dir=args.out,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(epoch, rep):
        logging.info("epoch %d  loss %.5f  val psnr %.2f dB", epoch, rep.loss[-1], rep.val_psnr[-1])

    codec, rep = train(cfg, train_x, val_x, progress)
    ev = evaluate(codec, test_x, cfg.channel, seed=args.seed)
    rep.test = ev.summary()
    emit_report(rep, "json", out / "report")
    emit_report(rep, "csv", out / "report")
    print(json.dumps(rep.test, indent=2))
    print(f"test PSNR {ev.psnr_mean:.2f} dB (a full 600-epoch run is expected near 31-32 dB)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
