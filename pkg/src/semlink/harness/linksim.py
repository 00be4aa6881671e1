"""Full link simulation: encode, frame, transmit, recover, decode, score."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..channel import empirical_snr
from ..codec import decode_batch, encode_batch
from ..frame import FrameError, PilotConfig, assemble_frame, recover_symbols
from .train import image_metrics

log = logging.getLogger(__name__)


@dataclass
class LinkReport:
    amplitude: float
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    symbol_snr_db: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (image index, message)
    calibration: list = field(default_factory=list)  # (offset, gain, k_i, k_q)

    @property
    def psnr_mean(self):
        vals = [p for p in self.psnr if math.isfinite(p)]
        return float(np.mean(vals)) if vals else math.inf

    @property
    def ssim_mean(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def symbol_snr_mean(self):
        """SNR of all recovered payloads pooled (signal and error energy summed)."""
        return self._pooled_snr

    _pooled_snr: float = math.inf

    def to_dict(self):
        d = asdict(self)
        d.update(psnr_mean=self.psnr_mean, ssim_mean=self.ssim_mean, symbol_snr_mean=self.symbol_snr_mean)
        return d


def linksim(codec, images, transport, pilot: PilotConfig | None = None, amplitude=1.0, start_sequence=0):
    """Send every image through ``transport`` and score the reconstructions.

    The whole frame is scaled by ``amplitude`` before transmission, emulating
    SNR control by attenuating the transmitted signal; the receiver's gain
    estimate undoes the scaling.
    """
    pilot = pilot or PilotConfig()
    images = np.asarray(images)
    sent = encode_batch(codec, images)
    report = LinkReport(amplitude)
    ok_idx, received = [], []
    sig = err = 0.0
    for i, z in enumerate(sent):
        frame = assemble_frame(z, pilot).serialize() * amplitude
        try:
            rx = transport.transmit(frame, start_sequence + i)
            sym, cal = recover_symbols(rx, pilot, codec.n_symbols, return_calibration=True)
        except (FrameError, TimeoutError) as exc:
            log.warning("image %d failed: %s", i, exc)
            report.failures.append((i, str(exc)))
            continue
        y = sym.complex()
        report.symbol_snr_db.append(empirical_snr(z, y))
        report.calibration.append((cal.offset, cal.gain, cal.k_i, cal.k_q))
        sig += float(np.sum(np.abs(z) ** 2))
        err += float(np.sum(np.abs(y - z) ** 2))
        ok_idx.append(i)
        received.append(y)
    if ok_idx:
        recon = decode_batch(codec, np.stack(received))
        report.psnr, report.ssim = image_metrics(images[ok_idx], recon)
    report._pooled_snr = math.inf if err == 0 else 10 * math.log10(sig / err)
    return report
