"""UDP request/reply channel emulator standing in for the radio front end.

Wire format (little-endian)::

    b"SEMC" | version:u8 | flags:u8 | sequence:u32 | n_symbols:u32 | n_symbols x (I:f32, Q:f32)

The server applies the transmit impairment chain and the channel to the payload
and replies with the same sequence number. Noise for a message is drawn from a
stream keyed by its sequence number, so processing is stateless per datagram
and an in-process call with the same sequence gives identical samples.
"""
from __future__ import annotations

import logging
import math
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from ..channel import ChannelConfig, ImpairmentConfig, complex_noise, draw_rayleigh, impairment_chain
from ..rng import EMULATOR

log = logging.getLogger(__name__)

MAGIC = b"SEMC"
VERSION = 1
HEADER = struct.Struct("<4sBBII")
MAX_SYMBOLS = 4096
MAX_DATAGRAM = HEADER.size + 8 * MAX_SYMBOLS

FLAG_REPLY = 0x01
FLAG_BYPASS = 0x02  # skip impairments and channel (loopback)


class MessageError(ValueError):
    pass


@dataclass
class EmulatorMessage:
    sequence: int
    payload: np.ndarray  # complex samples
    flags: int = 0
    version: int = VERSION

    @property
    def n_symbols(self):
        return len(self.payload)

    def encode(self):
        z = np.asarray(self.payload, dtype=np.complex128)
        if z.size > MAX_SYMBOLS:
            raise MessageError(f"{z.size} symbols exceed the {MAX_SYMBOLS} per-datagram limit")
        iq = np.empty(2 * z.size, dtype="<f4")
        iq[0::2], iq[1::2] = z.real, z.imag
        return HEADER.pack(MAGIC, self.version, self.flags, self.sequence & 0xFFFFFFFF, z.size) + iq.tobytes()

    @classmethod
    def decode(cls, buf):
        if len(buf) < HEADER.size:
            raise MessageError("datagram shorter than header")
        magic, version, flags, seq, n = HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise MessageError("bad magic")
        if version != VERSION:
            raise MessageError(f"unsupported version {version}")
        if n > MAX_SYMBOLS:
            raise MessageError("symbol count above limit")
        if len(buf) != HEADER.size + 8 * n:
            raise MessageError(f"payload length {len(buf) - HEADER.size} != {8 * n}")
        iq = np.frombuffer(buf, dtype="<f4", offset=HEADER.size).astype(np.float64)
        return cls(seq, iq[0::2] + 1j * iq[1::2], flags, version)


@dataclass
class EmulatorSettings:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    impairments: ImpairmentConfig = field(default_factory=ImpairmentConfig)
    max_lead: int = 32  # random count of noise-only samples before the frame
    tail: int = 16


def process_samples(z, sequence, settings: EmulatorSettings):
    """Impairments, flat channel and random framing offset for one message."""
    gen = settings.channel.rng.child(EMULATOR).generator(sequence)
    tx = impairment_chain(z, settings.impairments).complex()
    lead = int(gen.integers(0, settings.max_lead + 1)) if settings.max_lead else 0
    buf = np.concatenate([np.zeros(lead, complex), tx, np.zeros(settings.tail, complex)])
    if settings.channel.kind == "rayleigh_slow":
        buf = draw_rayleigh(gen) * buf
    return buf + complex_noise(gen, buf.shape, settings.channel.snr_db)


def handle_datagram(data, settings: EmulatorSettings):
    """Process one request datagram into its reply bytes (raises MessageError)."""
    msg = EmulatorMessage.decode(data)
    if msg.flags & FLAG_BYPASS:
        out = msg.payload
    else:
        out = process_samples(msg.payload, msg.sequence, settings)
        if out.size > MAX_SYMBOLS:
            raise MessageError("reply would exceed the datagram symbol limit")
    return EmulatorMessage(msg.sequence, out, msg.flags | FLAG_REPLY).encode()


class EmulatorServer:
    """Sequential UDP request/reply loop; malformed or oversize datagrams are dropped."""

    def __init__(self, bind_addr=("127.0.0.1", 0), settings: EmulatorSettings | None = None):
        self.settings = settings or EmulatorSettings()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind_addr)
        self.sock.settimeout(0.2)
        self.counters = {"received": 0, "replied": 0, "malformed": 0, "oversize": 0}
        self._stop = threading.Event()
        self._thread = None

    @property
    def address(self):
        return self.sock.getsockname()

    def serve_forever(self):
        while not self._stop.is_set():
            try:
                data, peer = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            self.counters["received"] += 1
            if len(data) > MAX_DATAGRAM:
                self.counters["oversize"] += 1
                continue
            try:
                reply = handle_datagram(data, self.settings)
            except MessageError as exc:
                self.counters["malformed"] += 1
                log.debug("dropped datagram from %s: %s", peer, exc)
                continue
            self.sock.sendto(reply, peer)
            self.counters["replied"] += 1

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def close(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        self.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def emulator_serve(bind_addr, channel: ChannelConfig, impairments: ImpairmentConfig):
    """Run the emulator in the foreground until interrupted."""
    server = EmulatorServer(bind_addr, EmulatorSettings(channel, impairments))
    log.info("emulator listening on %s:%d", *server.address)
    try:
        server.serve_forever()
    finally:
        server.sock.close()


class UdpTransport:
    """Client side: send samples, wait for the matching reply."""

    def __init__(self, addr, timeout=2.0, retries=0):
        self.addr = addr
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.settimeout(timeout)
        self.retries = retries

    def transmit(self, samples, sequence, flags=0):
        req = EmulatorMessage(sequence, samples, flags).encode()
        for _ in range(self.retries + 1):
            self.sock.sendto(req, self.addr)
            try:
                while True:
                    data, _ = self.sock.recvfrom(65535)
                    msg = EmulatorMessage.decode(data)
                    if msg.sequence == sequence & 0xFFFFFFFF:
                        return msg.payload
            except socket.timeout:
                continue
        raise TimeoutError(f"no reply for sequence {sequence}")

    def close(self):
        self.sock.close()


class InProcessTransport:
    """Same byte-level processing as the UDP server, without a socket."""

    def __init__(self, settings: EmulatorSettings):
        self.settings = settings

    def transmit(self, samples, sequence, flags=0):
        req = EmulatorMessage(sequence, samples, flags).encode()
        return EmulatorMessage.decode(handle_datagram(req, self.settings)).payload

    def close(self):
        pass


def loopback_settings(snr_db=math.inf):
    return EmulatorSettings(
        ChannelConfig("awgn", snr_db),
        ImpairmentConfig(enabled=False),
        max_lead=0,
        tail=0,
    )
