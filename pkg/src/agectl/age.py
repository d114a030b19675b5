"""Exact age-of-information bookkeeping.

All times are integer nanoseconds. The area under the age curve is kept as
twice its value (``area2``) so every trapezoid stays an integer and window
averages can be reported as exact fractions.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence


class AgeError(ValueError):
    pass


def _check_ts(value: int, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise AgeError(f"{name} must be an integer nanosecond timestamp, got {value!r}")
    if value < 0:
        raise AgeError(f"{name} must be non-negative, got {value}")
    return value


def trapezoid2(t_a: int, t_b: int, gen: int) -> int:
    """Twice the area under ``t - gen`` between ``t_a`` and ``t_b``."""
    return (t_a + t_b - 2 * gen) * (t_b - t_a)


@dataclass(frozen=True)
class DeliveryEvent:
    gen_time: int
    recv_time: int
    seq: int = 0

    def __post_init__(self):
        _check_ts(self.gen_time, "gen_time")
        _check_ts(self.recv_time, "recv_time")
        if self.recv_time < self.gen_time:
            raise AgeError(
                f"update {self.seq} received at {self.recv_time} before it was generated at {self.gen_time}"
            )


@dataclass(frozen=True)
class EpochAgeSummary:
    avg_age: Fraction  # ns, exact
    peak_age: int  # ns
    window: tuple[int, int]
    n_deliveries: int
    area2: int  # twice the integral of age over the window, ns^2

    @property
    def avg_age_ns(self) -> float:
        return float(self.avg_age)

    @property
    def length(self) -> int:
        return self.window[1] - self.window[0]


class AgeTracker:
    """Piecewise-linear age sample path with exact area accumulation.

    Age carries across window boundaries: :meth:`close_window` starts the next
    window at ``t_final`` with the current freshness untouched.
    """

    def __init__(self, start: int = 0, freshest_gen_time: int = 0):
        _check_ts(start, "start")
        _check_ts(freshest_gen_time, "freshest_gen_time")
        if freshest_gen_time > start:
            raise AgeError("freshest_gen_time cannot lie in the future of the tracker start")
        self.last_event_time = start
        self.freshest_gen_time = freshest_gen_time
        self.window_start = start
        self.area2 = 0
        self.peak_age_in_window = start - freshest_gen_time
        self.n_deliveries = 0

    def copy(self) -> "AgeTracker":
        new = AgeTracker.__new__(AgeTracker)
        new.__dict__.update(self.__dict__)
        return new

    def age_at(self, t: int) -> int:
        if t < self.last_event_time:
            raise AgeError(f"cannot query age at {t}, tracker already at {self.last_event_time}")
        return t - self.freshest_gen_time

    @property
    def accumulated_area(self) -> Fraction:
        return Fraction(self.area2, 2)

    def advance(self, t: int) -> None:
        _check_ts(t, "t")
        if t < self.last_event_time:
            raise AgeError(f"time went backwards: {t} < {self.last_event_time}")
        self.area2 += trapezoid2(self.last_event_time, t, self.freshest_gen_time)
        self.last_event_time = t

    def deliver(self, ev: DeliveryEvent) -> "AgeTracker":
        """Advance to ``ev.recv_time`` and apply the delivery.

        A delivery that is not fresher than what the monitor already holds only
        moves time forward.
        """
        if ev.recv_time < self.last_event_time:
            raise AgeError(
                f"out-of-order delivery: recv_time {ev.recv_time} < last event {self.last_event_time}"
            )
        self.advance(ev.recv_time)
        if ev.gen_time > self.freshest_gen_time:
            pre_reset = ev.recv_time - self.freshest_gen_time
            if pre_reset > self.peak_age_in_window:
                self.peak_age_in_window = pre_reset
            self.freshest_gen_time = ev.gen_time
            self.n_deliveries += 1
        return self

    def close_window(self, t_final: int) -> EpochAgeSummary:
        _check_ts(t_final, "t_final")
        if t_final < self.last_event_time:
            raise AgeError(f"t_final {t_final} precedes last event {self.last_event_time}")
        if t_final <= self.window_start:
            raise AgeError(f"zero-length window at {self.window_start}")
        self.advance(t_final)
        peak = max(self.peak_age_in_window, t_final - self.freshest_gen_time)
        length = t_final - self.window_start
        summary = EpochAgeSummary(
            avg_age=Fraction(self.area2, 2 * length),
            peak_age=peak,
            window=(self.window_start, t_final),
            n_deliveries=self.n_deliveries,
            area2=self.area2,
        )
        self.window_start = t_final
        self.area2 = 0
        self.peak_age_in_window = t_final - self.freshest_gen_time
        self.n_deliveries = 0
        return summary


def advance_and_deliver(tracker: AgeTracker, ev: DeliveryEvent) -> AgeTracker:
    return tracker.deliver(ev)


def close_window(tracker: AgeTracker, t_final: int) -> EpochAgeSummary:
    return tracker.close_window(t_final)


def replay(
    events: Iterable[DeliveryEvent],
    window: tuple[int, int],
    freshest_gen_time: int = 0,
) -> EpochAgeSummary:
    """Age summary of a time-ordered delivery trace over ``window``.

    Deliveries before the window start only set the initial freshness;
    deliveries after the window end are ignored.
    """
    start, end = window
    fresh = freshest_gen_time
    inside = []
    for ev in events:
        if ev.recv_time < start:
            fresh = max(fresh, ev.gen_time)
        elif ev.recv_time <= end:
            inside.append(ev)
    tracker = AgeTracker(start, fresh)
    for ev in inside:
        tracker.deliver(ev)
    return tracker.close_window(end)


def sender_side_age_estimate(
    acks: Sequence, window: tuple[int, int], freshest_gen_time: int = 0
) -> EpochAgeSummary:
    """Age as the sender sees it: every ACK arrival is a delivery of the acked update.

    ``acks`` are :class:`~agectl.estimators.AckRecord`-like objects ordered by
    ``ack_recv_time``.
    """
    events = [DeliveryEvent(a.gen_time, a.ack_recv_time, a.seq) for a in acks]
    return replay(events, window, freshest_gen_time)


def min_system_time(events: Iterable[DeliveryEvent]) -> Optional[int]:
    times = [ev.recv_time - ev.gen_time for ev in events]
    return min(times) if times else None
