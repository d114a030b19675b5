"""Deterministic discrete-event model of the two-node testbed.

A source runs a :class:`~agectl.sender.Sender`, packets cross a channel with
a FIFO bottleneck, propagation delay, jitter and loss, and land in the
receiver buffer. While the coalescing fault is active that buffer holds
packets until ``hold_count`` have piled up or the oldest has waited
``flush_timeout_ns``. The monitor echoes every packet it processes back
through an independent return channel.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Any, Optional

from .age import AgeTracker, DeliveryEvent, EpochAgeSummary
from .policies import InitAbort
from .sender import EpochRecord, Sender

# event priorities at equal timestamps: measurements before control
CHANNEL_DELIVER = 0
ACK_DELIVER = 1
COALESCE_FLUSH = 2
FAULT_TOGGLE = 3
EPOCH_BOUNDARY = 4
SEND_UPDATE = 5

EVENT_NAMES = {
    CHANNEL_DELIVER: "ChannelDeliver",
    ACK_DELIVER: "AckDeliver",
    COALESCE_FLUSH: "CoalesceFlush",
    FAULT_TOGGLE: "FaultToggle",
    EPOCH_BOUNDARY: "EpochBoundary",
    SEND_UPDATE: "SendUpdate",
}

# per-subsystem RNG streams
STREAM_FORWARD = 1
STREAM_RETURN = 2
STREAM_SERVICE = 3
STREAM_FAULT = 4

JITTER_KINDS = ("constant", "exponential", "lognormal")


class SimulationError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelModel:
    base_delay_ns: int = 10_000_000
    jitter: str = "exponential"
    jitter_mean_ns: int = 5_000_000
    jitter_sigma: float = 0.5  # lognormal shape only
    loss_prob: float = 0.005
    service_mean_ns: int = 10_000_000  # sender-side bottleneck, 0 disables it
    service: str = "constant"

    def __post_init__(self):
        if self.base_delay_ns < 0 or self.jitter_mean_ns < 0 or self.service_mean_ns < 0:
            raise ConfigError("channel delays must be non-negative")
        if self.jitter not in JITTER_KINDS:
            raise ConfigError(f"unknown jitter distribution {self.jitter!r}")
        if self.service not in ("constant", "exponential"):
            raise ConfigError(f"unknown service distribution {self.service!r}")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ConfigError(f"loss_prob must lie in [0, 1], got {self.loss_prob}")
        if self.jitter_sigma <= 0:
            raise ConfigError("jitter_sigma must be positive")


@dataclass(frozen=True)
class CoalesceFault:
    active: bool = False  # state at t=0
    hold_count: int = 5
    flush_timeout_ns: int = 500_000_000
    enabled: bool = False  # random episodes
    mean_interval_ns: int = 60_000_000_000
    duration_ns: int = 5_000_000_000
    start_ns: int = -1  # one scripted episode, -1 for none

    def __post_init__(self):
        if self.hold_count < 1:
            raise ConfigError("hold_count must be at least 1")
        if self.flush_timeout_ns <= 0 or self.duration_ns <= 0:
            raise ConfigError("fault timeout and duration must be positive")
        if self.mean_interval_ns <= 0:
            raise ConfigError("mean_interval_ns must be positive")


def _draw(rng: random.Random, kind: str, mean: int, sigma: float = 0.5) -> int:
    if mean == 0:
        return 0
    if kind == "constant":
        return mean
    if kind == "exponential":
        return int(rng.expovariate(1.0 / mean))
    mu = math.log(mean) - sigma * sigma / 2.0
    return int(rng.lognormvariate(mu, sigma))


class Channel:
    """One direction of the link. Draws are made for every packet, lost or not,
    so the random streams stay aligned across runs that only differ in fate."""

    def __init__(self, model: ChannelModel, rng: random.Random,
                 service_rng: Optional[random.Random] = None, bottleneck: bool = True):
        self.model = model
        self.rng = rng
        self.service_rng = service_rng or rng
        self.bottleneck = bottleneck and model.service_mean_ns > 0
        self.free_at = 0

    def transit(self, now: int) -> Optional[int]:
        """Arrival time at the far end, or None if the packet is lost."""
        m = self.model
        depart = now
        if self.bottleneck:
            depart = max(now, self.free_at) + _draw(self.service_rng, m.service, m.service_mean_ns)
            self.free_at = depart
        lost = self.rng.random() < m.loss_prob
        jitter = _draw(self.rng, m.jitter, m.jitter_mean_ns, m.jitter_sigma)
        if lost:
            return None
        return depart + m.base_delay_ns + jitter


class CoalescingBuffer:
    """Receiver buffer with the hold-until-N pathology.

    :meth:`arrive` and :meth:`flush` return the packets released, each paired
    with its release time; held packets always leave in arrival order.
    """

    def __init__(self, fault: CoalesceFault):
        self.fault = fault
        self.active = fault.active
        self.held: list[Any] = []
        self.held_since: Optional[int] = None
        self.generation = 0

    def arrive(self, pkt: Any, now: int) -> tuple[list[tuple[Any, int]], Optional[int]]:
        """Returns (released, flush_deadline); a deadline is set when a new hold starts."""
        if not self.active:
            return [(pkt, now)], None
        self.held.append(pkt)
        if len(self.held) >= self.fault.hold_count:
            return self._release(now), None
        if len(self.held) == 1:
            self.held_since = now
            return [], now + self.fault.flush_timeout_ns
        return [], None

    def flush(self, now: int, generation: int) -> list[tuple[Any, int]]:
        if generation != self.generation or not self.held:
            return []
        return self._release(now)

    def set_active(self, active: bool, now: int) -> list[tuple[Any, int]]:
        self.active = active
        if not active and self.held:
            return self._release(now)
        return []

    def _release(self, now: int) -> list[tuple[Any, int]]:
        out = [(p, now) for p in self.held]
        self.held = []
        self.held_since = None
        self.generation += 1
        return out


def channel_transit(channel: Channel, buffer: CoalescingBuffer, pkt: Any, now: int):
    """Push one packet through the channel; returns its arrival time at the
    receiver buffer (None if lost). Buffer release is handled on arrival."""
    return channel.transit(now)


def echo_monitor(pkt: tuple[int, int]) -> tuple[int, int]:
    """The monitor reflects (seq, gen_time) unchanged."""
    seq, gen = pkt
    return seq, gen


@dataclass
class PacketLog:
    seq: list[int] = field(default_factory=list)
    send: list[int] = field(default_factory=list)
    recv: list[int] = field(default_factory=list)  # monitor processing time, -1 if never
    ack: list[int] = field(default_factory=list)  # ACK arrival at sender, -1 if never
    fate: list[str] = field(default_factory=list)  # forward, return, acked, lost

    def add(self, seq: int, t: int) -> None:
        self.seq.append(seq)
        self.send.append(t)
        self.recv.append(-1)
        self.ack.append(-1)
        self.fate.append("forward")

    def counts(self) -> dict[str, int]:
        out = {"sent": len(self.seq), "acked": 0, "lost": 0, "in_flight": 0}
        for f in self.fate:
            if f == "acked":
                out["acked"] += 1
            elif f == "lost":
                out["lost"] += 1
            else:
                out["in_flight"] += 1
        return out


@dataclass
class SimResult:
    config: Any
    seed: int
    records: list[EpochRecord]
    monitor_epoch_ages: list[float]
    monitor_summary: Optional[EpochAgeSummary]
    sender_summary: Optional[EpochAgeSummary]
    packets: PacketLog
    counts: dict[str, int]
    fault_windows: list[tuple[int, int]]
    end_time: int
    aggregates: dict[str, float]


def aggregate(records: list[EpochRecord], threshold_ns: int) -> dict[str, float]:
    if not records:
        return {"epochs": 0}
    ages = [r.avg_age for r in records]
    lengths = [r.epoch_len for r in records]
    n = len(ages)
    mean_u = sum(ages) / n
    srt = sorted(ages)
    median = srt[n // 2] if n % 2 else 0.5 * (srt[n // 2 - 1] + srt[n // 2])
    var = sum((a - mean_u) ** 2 for a in ages) / (n - 1) if n > 1 else 0.0
    updates = [r for r in records if r.action is not None]
    return {
        "epochs": n,
        "mean_age_weighted_ns": sum(a * l for a, l in zip(ages, lengths)) / sum(lengths),
        "mean_age_ns": mean_u,
        "median_age_ns": median,
        "var_age_ns2": var,
        "clamp_fraction": (sum(r.clamped for r in updates) / len(updates)) if updates else 0.0,
        "violations": sum(a > threshold_ns for a in ages),
    }


class Simulation:
    def __init__(self, config, seed: int):
        self.config = config
        self.seed = seed
        chan = config.channel
        self.forward = Channel(chan, self._rng(STREAM_FORWARD), self._rng(STREAM_SERVICE))
        self.backward = Channel(chan, self._rng(STREAM_RETURN), bottleneck=False)
        self.fault_rng = self._rng(STREAM_FAULT)
        self.buffer = CoalescingBuffer(config.fault)
        self.sender = Sender(config.policy)
        self.monitor = AgeTracker()
        self.monitor_run = AgeTracker()
        self.monitor_epoch_ages: list[float] = []
        self.log = PacketLog()
        self.queue: list = []
        self.counter = 0
        self.now = 0
        self.send_token = 0
        self.last_send: Optional[int] = None
        self.init_round = 0
        self.done = False
        self.fault_windows: list[tuple[int, int]] = []
        self.fault_on_at: Optional[int] = None
        self.trace: list[tuple[int, str, int]] = []
        self.record_events = False

    def _rng(self, stream: int) -> random.Random:
        return random.Random(f"agectl:{self.seed}:{stream}")

    def push(self, t: int, prio: int, key: int, payload: Any) -> None:
        self.counter += 1
        heapq.heappush(self.queue, (t, prio, key, self.counter, payload))

    # -- sending ---------------------------------------------------------
    def _send_packet(self) -> None:
        now = self.now
        seq, gen = self.sender.send(now)
        self.log.add(seq, now)
        self.last_send = now
        arrival = channel_transit(self.forward, self.buffer, (seq, gen), now)
        if arrival is None:
            self.log.fate[seq] = "lost"
        else:
            self.push(arrival, CHANNEL_DELIVER, seq, (seq, gen))

    def _budget_left(self) -> bool:
        return self.sender.sent < self.config.packets

    def _drained(self) -> bool:
        return (self.sender.phase == "epochs" and not self._budget_left()
                and self.sender.backlog == 0 and self.now > self.sender.epoch_start)

    def _schedule_next_send(self) -> None:
        self.send_token += 1
        if not self._budget_left():
            return
        period = self.sender.period_ns
        t = self.now if self.last_send is None else max(self.now, self.last_send + period)
        self.push(t, SEND_UPDATE, 0, ("send", self.send_token))

    def _start_init_round(self) -> None:
        cfg = self.config.policy
        self.init_round += 1
        self.sender.reset_init_round()
        t = self.now
        n = 0
        for i in range(cfg.init_packets):
            if self.sender.sent + n >= self.config.packets:
                break
            self.push(t + i * cfg.init_spacing_ns, SEND_UPDATE, 0, ("init", self.init_round))
            n += 1
        last = t + max(n - 1, 0) * cfg.init_spacing_ns
        self.push(last + cfg.init_timeout_ns, EPOCH_BOUNDARY, 0, ("init-timeout", self.init_round))

    def _finish_init(self) -> None:
        epoch_len = self.sender.start_epochs(self.now)
        if self.now > self.monitor.window_start:
            self.monitor.close_window(self.now)
        self.push(self.now + epoch_len, EPOCH_BOUNDARY, 0, ("epoch",))
        self._schedule_next_send()

    # -- receiver side ---------------------------------------------------
    def _monitor_receive(self, seq: int, gen: int, t: int) -> None:
        self.log.recv[seq] = t
        ev = DeliveryEvent(gen, t, seq)
        self.monitor.deliver(ev)
        self.monitor_run.deliver(ev)
        aseq, agen = echo_monitor((seq, gen))
        arrival = self.backward.transit(t)
        if arrival is None:
            self.log.fate[seq] = "lost"
        else:
            self.log.fate[seq] = "return"
            self.push(arrival, ACK_DELIVER, aseq, (aseq, agen))

    def _release(self, released) -> None:
        for (seq, gen), t in released:
            self._monitor_receive(seq, gen, t)

    def _set_fault(self, active: bool) -> None:
        if active == self.buffer.active:
            return
        if active:
            self.fault_on_at = self.now
        else:
            self.fault_windows.append((self.fault_on_at, self.now))
            self.fault_on_at = None
        self._release(self.buffer.set_active(active, self.now))

    def _schedule_fault_onset(self) -> None:
        fault = self.config.fault
        if fault.enabled:
            gap = int(self.fault_rng.expovariate(1.0 / fault.mean_interval_ns))
            self.push(self.now + gap, FAULT_TOGGLE, 0, ("on", True))

    # -- main loop -------------------------------------------------------
    def run(self) -> SimResult:
        cfg = self.config
        fault = cfg.fault
        if fault.active:
            self.fault_on_at = 0
        if fault.start_ns >= 0:
            self.push(fault.start_ns, FAULT_TOGGLE, 0, ("on", False))
        self._schedule_fault_onset()
        if cfg.packets > 0:
            self._start_init_round()
        else:
            self.done = True

        max_time = getattr(cfg, "max_sim_time_ns", 0) or 0
        while self.queue and not self.done:
            t, prio, key, _, payload = heapq.heappop(self.queue)
            self.now = t
            if self.record_events:
                self.trace.append((t, EVENT_NAMES[prio], key))
            if prio == CHANNEL_DELIVER:
                released, deadline = self.buffer.arrive(payload, t)
                if deadline is not None:
                    self.push(deadline, COALESCE_FLUSH, 0, self.buffer.generation)
                self._release(released)
            elif prio == ACK_DELIVER:
                seq, gen = payload
                self.log.ack[seq] = t
                self.log.fate[seq] = "acked"
                self.sender.on_ack(seq, gen, t)
                if self.sender.phase == "init" and self.sender.init_complete():
                    self._finish_init()
                elif self._drained():
                    # budget spent and nothing left in flight: close the last epoch now
                    self._on_boundary(("epoch",), max_time)
            elif prio == COALESCE_FLUSH:
                self._release(self.buffer.flush(t, payload))
            elif prio == FAULT_TOGGLE:
                what, random_episode = payload
                if what == "on":
                    self._set_fault(True)
                    self.push(t + fault.duration_ns, FAULT_TOGGLE, 0, ("off", random_episode))
                else:
                    self._set_fault(False)
                    if random_episode:
                        self._schedule_fault_onset()
            elif prio == EPOCH_BOUNDARY:
                self._on_boundary(payload, max_time)
            elif prio == SEND_UPDATE:
                what, token = payload
                if what == "init":
                    if token == self.init_round and self.sender.phase == "init":
                        self._send_packet()
                elif token == self.send_token and self._budget_left():
                    self._send_packet()
                    self.push(t + self.sender.period_ns, SEND_UPDATE, 0, ("send", token))
        if not self.done and self.sender.sent:
            raise SimulationError(f"event queue drained at t={self.now} before the run completed")
        return self._result()

    def _on_boundary(self, payload, max_time: int) -> None:
        if payload[0] == "init-timeout":
            if payload[1] != self.init_round or self.sender.phase != "init":
                return
            if self.sender.init_rtts:
                self._finish_init()
            elif self.init_round <= self.config.policy.init_retries and self._budget_left():
                self._start_init_round()
            else:
                raise InitAbort(
                    f"no ACK after {self.init_round} init round(s) of "
                    f"{self.config.policy.init_packets} packets"
                )
            return
        self.sender.end_epoch(self.now)
        self.monitor_epoch_ages.append(self.monitor.close_window(self.now).avg_age_ns)
        if not self._budget_left() or (max_time and self.now >= max_time):
            self.done = True
            return
        self.push(self.now + self.sender.epoch_len, EPOCH_BOUNDARY, 0, ("epoch",))
        self._schedule_next_send()

    def _result(self) -> SimResult:
        end = self.now
        monitor_summary = sender_summary = None
        if end > 0:
            monitor_summary = self.monitor_run.close_window(end)
            sender_run = AgeTracker()
            for seq in sorted(range(len(self.log.seq)), key=lambda s: (self.log.ack[s], s)):
                if self.log.ack[seq] >= 0 and self.log.ack[seq] <= end:
                    sender_run.deliver(DeliveryEvent(self.log.send[seq], self.log.ack[seq], seq))
            sender_summary = sender_run.close_window(end)
        if self.fault_on_at is not None:
            self.fault_windows.append((self.fault_on_at, end))
        records = self.sender.records
        return SimResult(
            config=self.config,
            seed=self.seed,
            records=records,
            monitor_epoch_ages=self.monitor_epoch_ages,
            monitor_summary=monitor_summary,
            sender_summary=sender_summary,
            packets=self.log,
            counts=self.log.counts(),
            fault_windows=self.fault_windows,
            end_time=end,
            aggregates=aggregate(records, self.config.policy.peak_age_threshold_ns),
        )


def run_simulation(config, seed: Optional[int] = None) -> SimResult:
    """Run one seeded simulation of ``config`` (an :class:`~agectl.config.ExperimentConfig`)."""
    if seed is None:
        seed = config.seeds[0]
    return Simulation(config, seed).run()


@dataclass(frozen=True)
class Recovery:
    fault_end: int
    epochs: Optional[int]  # epochs closed after the fault ended until age dropped below threshold
    time_ns: Optional[int]
    first_violation: Optional[int]  # index of the first epoch over threshold


def recovery(result: SimResult, fault_end: int, threshold_ns: int) -> Recovery:
    first_violation = next((i for i, r in enumerate(result.records) if r.avg_age > threshold_ns), None)
    after = [r for r in result.records if r.t_end > fault_end]
    for i, r in enumerate(after):
        if r.avg_age < threshold_ns:
            return Recovery(fault_end, i, r.t_end - fault_end, first_violation)
    return Recovery(fault_end, None, None, first_violation)


def issue3_scenario(config, seed: Optional[int] = None) -> tuple[SimResult, Recovery]:
    """Run ``config`` with its scripted coalescing-fault episode and measure recovery."""
    fault = config.fault
    if fault.start_ns < 0:
        raise ConfigError("issue3_scenario needs fault.start_ns set to a scripted onset")
    result = run_simulation(config, seed)
    fault_end = fault.start_ns + fault.duration_ns
    return result, recovery(result, fault_end, config.policy.peak_age_threshold_ns)
