"""RTT / inter-ACK estimators and the peak-age feedback mechanism."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

DEFAULT_ALPHA = 0.125
DEFAULT_PEAK_AGE_THRESHOLD_NS = 200_000_000


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class AckRecord:
    seq: int
    gen_time: int
    ack_recv_time: int
    rtt: int

    def __post_init__(self):
        if self.rtt <= 0:
            raise EstimatorError(f"ACK for seq {self.seq} has non-positive rtt {self.rtt}")


@dataclass
class EwmaEstimator:
    alpha: float = DEFAULT_ALPHA
    current: Optional[float] = None  # ns

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise EstimatorError(f"alpha must lie in (0, 1], got {self.alpha}")

    @property
    def initialized(self) -> bool:
        return self.current is not None

    def update(self, sample: float) -> "EwmaEstimator":
        if sample <= 0:
            raise EstimatorError(f"EWMA sample must be positive, got {sample}")
        if self.current is None:
            self.current = float(sample)
        else:
            self.current = (1.0 - self.alpha) * self.current + self.alpha * sample
        return self

    def seed(self, value: float) -> None:
        if value <= 0:
            raise EstimatorError(f"cannot seed estimator with {value}")
        self.current = float(value)


def ewma_update(est: EwmaEstimator, sample: float) -> EwmaEstimator:
    return est.update(sample)


@dataclass
class FeedbackState:
    """Counter and per-epoch RTT floor for the peak-age feedback.

    Only meaningful for a single client talking to a single server over one
    hop; with more traffic a violation cannot be attributed to the receiver.
    """

    peak_age_threshold: int = DEFAULT_PEAK_AGE_THRESHOLD_NS
    enabled: bool = False
    zeta: int = 0
    rtt_min_epoch: Optional[int] = None

    def observe_rtt(self, rtt: int) -> None:
        if self.rtt_min_epoch is None or rtt < self.rtt_min_epoch:
            self.rtt_min_epoch = rtt


def feedback_epoch_end(fb: FeedbackState, est_rtt: EwmaEstimator, avg_age: float) -> bool:
    """Apply one round of the feedback rule at an epoch boundary.

    Returns True when a violation pulled the RTT estimate toward the epoch
    minimum. Epochs without any RTT sample leave both zeta and the estimate
    alone.
    """
    rtt_min, fb.rtt_min_epoch = fb.rtt_min_epoch, None
    if not fb.enabled or rtt_min is None or not est_rtt.initialized:
        return False
    if avg_age > fb.peak_age_threshold:
        fb.zeta += 1
        est_rtt.current = (est_rtt.current + fb.zeta * rtt_min) / (fb.zeta + 1)
        return True
    fb.zeta = 0
    return False


@dataclass
class LinkEstimators:
    rtt: EwmaEstimator = field(default_factory=EwmaEstimator)
    z: EwmaEstimator = field(default_factory=EwmaEstimator)
    feedback: FeedbackState = field(default_factory=FeedbackState)
    prev_ack_time: Optional[int] = None
    seen: set = field(default_factory=set)

    @classmethod
    def create(cls, alpha: float = DEFAULT_ALPHA, feedback: bool = False,
               threshold: int = DEFAULT_PEAK_AGE_THRESHOLD_NS) -> "LinkEstimators":
        return cls(EwmaEstimator(alpha), EwmaEstimator(alpha),
                   FeedbackState(peak_age_threshold=threshold, enabled=feedback))

    def on_ack(self, ack: AckRecord) -> bool:
        """Feed one ACK. Returns False if it was a duplicate and got discarded."""
        if ack.seq in self.seen:
            return False
        self.seen.add(ack.seq)
        self.rtt.update(ack.rtt)
        self.feedback.observe_rtt(ack.rtt)
        if self.prev_ack_time is not None and ack.ack_recv_time > self.prev_ack_time:
            self.z.update(ack.ack_recv_time - self.prev_ack_time)
        if self.prev_ack_time is None or ack.ack_recv_time > self.prev_ack_time:
            self.prev_ack_time = ack.ack_recv_time
        return True

    def epoch_end(self, avg_age: float) -> bool:
        return feedback_epoch_end(self.feedback, self.rtt, avg_age)


def on_ack(est: LinkEstimators, ack: AckRecord) -> bool:
    return est.on_ack(ack)
