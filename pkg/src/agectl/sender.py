"""Transport-agnostic sender: bookkeeping plus the policy, driven by an adapter.

The simulator and the UDP runner both own one :class:`Sender` and call
:meth:`Sender.send`, :meth:`Sender.on_ack` and :meth:`Sender.end_epoch` from a
single logical thread; nothing here touches a clock or a socket.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .age import AgeTracker, DeliveryEvent
from .estimators import AckRecord, LinkEstimators
from .policies import (
    NS_PER_S,
    Action,
    InitAbort,
    PolicyConfig,
    PolicyKind,
    PolicyState,
    epoch_transition,
    init_phase,
    next_epoch_length,
)


@dataclass(frozen=True)
class EpochRecord:
    """One closed epoch: measurements over [t_start, t_end] and the reaction to them."""

    k: int
    t_start: int
    t_end: int
    avg_age: float  # ns, sender-side estimate
    peak_age: int
    avg_backlog: float
    lam: float  # rate in force during the epoch
    action: Optional[Action]
    next_lam: float
    next_epoch_len: int
    rtt_bar: float
    z_bar: float
    clamped: bool
    zeta: int
    feedback_applied: bool
    n_acks: int

    @property
    def epoch_len(self) -> int:
        return self.t_end - self.t_start


class Sender:
    def __init__(self, config: PolicyConfig):
        self.config = config
        self.est = LinkEstimators.create(config.ewma_alpha, config.feedback, config.peak_age_threshold_ns)
        self.state = PolicyState(config)
        self.age = AgeTracker()
        self.next_seq = 0
        self.send_time: dict[int, int] = {}
        self.outstanding: dict[int, int] = {}
        self.acked: set[int] = set()
        self.declared_lost: set[int] = set()
        self.init_rtts: list[int] = []
        self.init_seqs: set[int] = set()
        self.records: list[EpochRecord] = []
        self.epoch_start: Optional[int] = None
        self.epoch_len: Optional[int] = None
        self._bl_area = 0
        self._bl_t = 0
        self._epoch_acks = 0
        self.duplicate_acks = 0
        self.now = 0

    @property
    def phase(self) -> str:
        return self.state.phase

    @property
    def lam(self) -> float:
        return self.state.lam

    @property
    def sent(self) -> int:
        return self.next_seq

    @property
    def backlog(self) -> int:
        return len(self.outstanding)

    @property
    def period_ns(self) -> int:
        return max(1, round(NS_PER_S / self.state.lam))

    def _tick(self, now: int) -> None:
        if now < self.now:
            raise ValueError(f"sender clock went backwards: {now} < {self.now}")
        self._bl_area += len(self.outstanding) * (now - self._bl_t)
        self._bl_t = now
        self.now = now

    def send(self, now: int) -> tuple[int, int]:
        """Register a new update generated and sent at ``now``; returns (seq, gen_time)."""
        self._tick(now)
        seq = self.next_seq
        self.next_seq += 1
        self.send_time[seq] = now
        self.outstanding[seq] = now
        if self.state.phase == "init":
            self.init_seqs.add(seq)
        return seq, now

    def on_ack(self, seq: int, gen_time: int, now: int) -> Optional[AckRecord]:
        self._tick(now)
        sent_at = self.send_time.get(seq)
        if sent_at is None or seq in self.acked:
            self.duplicate_acks += 1
            return None
        ack = AckRecord(seq, gen_time, now, max(1, now - sent_at))
        self.acked.add(seq)
        self.outstanding.pop(seq, None)
        self.declared_lost.discard(seq)
        self.est.on_ack(ack)
        if seq in self.init_seqs and self.state.phase == "init":
            self.init_rtts.append(ack.rtt)
        self.age.deliver(DeliveryEvent(gen_time, now, seq))
        self._epoch_acks += 1
        # anything sent well before an acked packet is presumed lost
        horizon = seq - self.config.loss_reorder_threshold
        while self.outstanding:
            old = next(iter(self.outstanding))
            if old > horizon:
                break
            del self.outstanding[old]
            self.declared_lost.add(old)
        return ack

    def init_complete(self) -> bool:
        return bool(self.init_seqs) and self.init_seqs <= self.acked

    def reset_init_round(self) -> None:
        self.init_seqs.clear()

    def start_epochs(self, now: int) -> int:
        """Leave the init phase; returns the length of epoch 0."""
        self._tick(now)
        cfg = self.config
        if cfg.kind is PolicyKind.FIXED:
            if not self.init_rtts:
                raise InitAbort("no ACK received during the initialization phase")
            lam = cfg.fixed_rate
            rtt_bar = sum(self.init_rtts) / len(self.init_rtts)
        else:
            lam, rtt_bar = init_phase(self.init_rtts, cfg)
        self.est.rtt.seed(rtt_bar)
        # init packets are spaced artificially; start Z from the chosen rate instead
        self.est.z.seed(NS_PER_S / lam)
        self.est.feedback.rtt_min_epoch = None
        self.state.lam = lam
        self.state.phase = "epochs"
        if now > self.age.window_start:
            self.age.close_window(now)
        self._bl_area = 0
        self.epoch_start = now
        self.epoch_len = next_epoch_length(cfg, self.est.z.current, self.est.rtt.current, lam)
        self._epoch_acks = 0
        return self.epoch_len

    def end_epoch(self, now: int) -> EpochRecord:
        self._tick(now)
        summary = self.age.close_window(now)
        length = now - self.epoch_start
        avg_backlog = self._bl_area / length
        avg_age = summary.avg_age_ns
        applied = self.est.epoch_end(avg_age)
        lam_used = self.state.lam
        k = self.state.k
        tr = epoch_transition(self.state, avg_age, avg_backlog, self.est.rtt.current, self.est.z.current)
        rec = EpochRecord(
            k=k,
            t_start=self.epoch_start,
            t_end=now,
            avg_age=avg_age,
            peak_age=summary.peak_age,
            avg_backlog=avg_backlog,
            lam=lam_used,
            action=tr.action,
            next_lam=tr.lam,
            next_epoch_len=tr.epoch_len,
            rtt_bar=self.est.rtt.current,
            z_bar=self.est.z.current,
            clamped=tr.clamped,
            zeta=self.est.feedback.zeta,
            feedback_applied=applied,
            n_acks=self._epoch_acks,
        )
        self.records.append(rec)
        self._bl_area = 0
        self._epoch_acks = 0
        self.epoch_start = now
        self.epoch_len = tr.epoch_len
        return rec
