"""Datagram sender and echo server for running the policies over real sockets.

Wire format, 21 bytes, network byte order::

    magic "ACP1" | version u8 | seq u32 | gen_time u64 (ns, sender clock) | payload 4 bytes

All timestamps come from the sender's monotonic clock, so sender and echo
server need no clock synchronization. Only the sender-side age estimate and
RTTs are available in live runs.
"""

from __future__ import annotations

import heapq
import logging
import queue
import select
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .policies import InitAbort, PolicyConfig
from .sender import EpochRecord, Sender

log = logging.getLogger(__name__)

MAGIC = b"ACP1"
VERSION = 1
_WIRE = struct.Struct("!4sBIQ4s")
WIRE_SIZE = _WIRE.size  # 21
DEFAULT_PAYLOAD = b"\x00\x00\x00\x00"


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class WirePacket:
    seq: int
    gen_time: int
    payload: bytes = DEFAULT_PAYLOAD

    def __post_init__(self):
        if not 0 <= self.seq < 2**32:
            raise WireError(f"seq {self.seq} does not fit in 32 bits")
        if not 0 <= self.gen_time < 2**64:
            raise WireError(f"gen_time {self.gen_time} does not fit in 64 bits")
        if len(self.payload) != 4:
            raise WireError("payload must be exactly 4 bytes")

    def pack(self) -> bytes:
        return _WIRE.pack(MAGIC, VERSION, self.seq, self.gen_time, self.payload)

    @classmethod
    def unpack(cls, data: bytes) -> "WirePacket":
        if len(data) != WIRE_SIZE:
            raise WireError(f"expected {WIRE_SIZE} bytes, got {len(data)}")
        magic, version, seq, gen, payload = _WIRE.unpack(data)
        if magic != MAGIC:
            raise WireError(f"bad magic {magic!r}")
        if version != VERSION:
            raise WireError(f"unsupported version {version}")
        return cls(seq, gen, payload)


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected ADDR:PORT, got {text!r}")
    return host.strip("[]") or "0.0.0.0", int(port)


# -- echo server -------------------------------------------------------------

class EchoServer:
    """Reflect every well-formed packet to its sender; count and drop the rest.

    ``delay_ns`` holds each reply back by a fixed time, emulating a link with a
    real propagation delay; raw loopback round trips are shorter than a Python
    sender can pace.
    """

    def __init__(self, bind: tuple[str, int], delay_ns: int = 0):
        if delay_ns < 0:
            raise ValueError("delay_ns must be non-negative")
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.delay_ns = delay_ns
        self.received = 0
        self.replied = 0
        self.dropped = 0
        self._pending: list[tuple[int, int, bytes, Any]] = []
        self._n = 0

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def handle(self, data: bytes, addr) -> None:
        self.received += 1
        try:
            WirePacket.unpack(data)
        except WireError:
            self.dropped += 1
            return
        if self.delay_ns:
            self._n += 1
            heapq.heappush(self._pending, (time.monotonic_ns() + self.delay_ns, self._n, data, addr))
        else:
            self._reply(data, addr)

    def _reply(self, data: bytes, addr) -> None:
        self.sock.sendto(data, addr)
        self.replied += 1

    def _flush_due(self) -> None:
        now = time.monotonic_ns()
        while self._pending and self._pending[0][0] <= now:
            _, _, data, addr = heapq.heappop(self._pending)
            self._reply(data, addr)

    def serve(self, stop: Optional[threading.Event] = None, poll_s: float = 0.1) -> None:
        while stop is None or not stop.is_set():
            self._flush_due()
            timeout = poll_s
            if self._pending:
                timeout = min(poll_s, max(0.0, (self._pending[0][0] - time.monotonic_ns()) / 1e9))
            readable, _, _ = select.select([self.sock], [], [], timeout)
            if not readable:
                continue
            try:
                data, addr = self.sock.recvfrom(2048)
            except OSError:
                if stop is not None and stop.is_set():
                    break
                raise
            self.handle(data, addr)

    def close(self) -> None:
        self.sock.close()


def run_echo(bind: tuple[str, int], stop: Optional[threading.Event] = None, delay_ns: int = 0) -> EchoServer:
    server = EchoServer(bind, delay_ns)
    try:
        server.serve(stop)
    finally:
        server.close()
    return server


# -- sender ------------------------------------------------------------------

@dataclass
class SessionTrace:
    records: list[EpochRecord]
    sent: int
    acked: int
    lost: int
    in_flight: int
    rtts: list[int] = field(default_factory=list)
    duplicate_acks: int = 0
    malformed_acks: int = 0

    @property
    def conserved(self) -> bool:
        return self.sent == self.acked + self.lost + self.in_flight


class _AckReader(threading.Thread):
    """Receive ACKs and hand them, stamped, to the owner of the policy state."""

    def __init__(self, sock: socket.socket, out: "queue.Queue", clock: Callable[[], int]):
        super().__init__(daemon=True)
        self.sock = sock
        self.out = out
        self.clock = clock
        self.stop = threading.Event()
        self.malformed = 0

    def run(self) -> None:
        self.sock.settimeout(0.05)
        while not self.stop.is_set():
            try:
                data = self.sock.recv(2048)
            except socket.timeout:
                continue
            except ConnectionRefusedError:
                continue  # ICMP port unreachable; the init timeout handles it
            except OSError:
                break
            now = self.clock()
            try:
                pkt = WirePacket.unpack(data)
            except WireError:
                self.malformed += 1
                continue
            self.out.put((pkt.seq, pkt.gen_time, now))


def run_sender(
    peer: tuple[str, int],
    config: PolicyConfig,
    packets: int,
    drain_ns: int = 500_000_000,
    clock: Callable[[], int] = time.monotonic_ns,
) -> SessionTrace:
    """Drive ``config``'s policy against an echo server for ``packets`` updates.

    A transmitter loop paces sends and epoch boundaries while a reader thread
    feeds ACKs through a queue, so the :class:`Sender` is only ever touched
    from one thread. After the budget is spent the run ends at the next epoch
    boundary and keeps listening for ``drain_ns`` for stragglers.
    """
    sender = Sender(config)
    if packets <= 0:
        return SessionTrace([], 0, 0, 0, 0)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.connect(peer)
    acks: queue.Queue = queue.Queue()
    base = clock()

    def now() -> int:
        # relative to session start so gen_time fits comfortably and the
        # sender never sees its clock step backwards
        return max(clock() - base, sender.now)

    reader = _AckReader(sock, acks, lambda: clock() - base)
    reader.start()
    rtts: list[int] = []

    def send_one() -> int:
        seq, gen = sender.send(now())
        try:
            sock.send(WirePacket(seq, gen).pack())
        except ConnectionRefusedError:
            pass  # reported on a later datagram; the packet simply goes unanswered
        return gen

    def pump(deadline: int, until_drained: bool = False) -> None:
        """Process ACKs until the session clock reaches ``deadline``."""
        while not (until_drained and sender.backlog == 0):
            remaining = deadline - now()
            try:
                seq, gen, t = acks.get(timeout=max(remaining, 0) / 1e9) if remaining > 0 else acks.get_nowait()
            except queue.Empty:
                if now() >= deadline:
                    return
                continue
            ack = sender.on_ack(seq, gen, max(t, sender.now))
            if ack is not None:
                rtts.append(ack.rtt)

    try:
        # initialization rounds
        rounds = 0
        while True:
            rounds += 1
            sender.reset_init_round()
            start = now()
            n = min(config.init_packets, packets - sender.sent)
            for i in range(n):
                pump(start + i * config.init_spacing_ns)
                send_one()
            end = start + max(n - 1, 0) * config.init_spacing_ns + config.init_timeout_ns
            while now() < end and not sender.init_complete():
                pump(min(end, now() + 10_000_000))
            if sender.init_rtts:
                break
            if rounds > config.init_retries or sender.sent >= packets:
                raise InitAbort(f"no ACK from {peer[0]}:{peer[1]} after {rounds} init round(s)")

        boundary = now() + sender.start_epochs(now())
        next_send = now()
        last_send: Optional[int] = None
        while True:
            if sender.sent < packets and next_send < boundary:
                pump(next_send)
                last_send = send_one()
                next_send = last_send + sender.period_ns
                continue
            # the last epoch ends early once every packet is accounted for
            pump(boundary, until_drained=sender.sent >= packets)
            sender.end_epoch(now())
            if sender.sent >= packets:
                break
            boundary = sender.epoch_start + sender.epoch_len
            if last_send is not None:
                next_send = last_send + sender.period_ns
        pump(now() + drain_ns)
    finally:
        reader.stop.set()
        reader.join(timeout=1.0)
        sock.close()

    return SessionTrace(
        records=list(sender.records),
        sent=sender.sent,
        acked=len(sender.acked),
        lost=len(sender.declared_lost),
        in_flight=len(sender.outstanding),
        rtts=rtts,
        duplicate_acks=sender.duplicate_acks,
        malformed_acks=reader.malformed,
    )
