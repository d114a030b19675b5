import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agectl.estimators import (
    AckRecord,
    EstimatorError,
    EwmaEstimator,
    FeedbackState,
    LinkEstimators,
    ewma_update,
    feedback_epoch_end,
)

MS = 1_000_000


def test_first_sample_sets_estimate():
    assert ewma_update(EwmaEstimator(), 50 * MS).current == 50 * MS


def test_ewma_step():
    est = EwmaEstimator(0.125, 100 * MS)
    assert est.update(200 * MS).current == pytest.approx(112.5 * MS)


def test_constant_samples_never_overshoot():
    est = EwmaEstimator(0.125, 10.0)
    for _ in range(500):
        est.update(30.0)
        assert est.current <= 30.0
    assert est.current == pytest.approx(30.0)


def test_rejects_non_positive_sample_and_alpha():
    with pytest.raises(EstimatorError):
        EwmaEstimator().update(0)
    with pytest.raises(EstimatorError):
        EwmaEstimator(alpha=0.0)


@settings(max_examples=200)
@given(st.lists(st.floats(min_value=1e-3, max_value=1e9), min_size=1, max_size=50),
       st.floats(min_value=0.01, max_value=1.0))
def test_ewma_stays_within_sample_range(samples, alpha):
    est = EwmaEstimator(alpha)
    for s in samples:
        est.update(s)
    assert min(samples) * (1 - 1e-12) <= est.current <= max(samples) * (1 + 1e-12)


def test_first_ack_updates_only_rtt():
    est = LinkEstimators.create()
    est.on_ack(AckRecord(0, 0, 40 * MS, 40 * MS))
    assert est.rtt.current == 40 * MS
    assert est.z.current is None


def test_inter_ack_sample():
    est = LinkEstimators.create()
    est.on_ack(AckRecord(0, 0, 40 * MS, 40 * MS))
    est.on_ack(AckRecord(1, 80 * MS, 120 * MS, 40 * MS))
    assert est.z.current == 80 * MS


def test_duplicate_ack_discarded():
    est = LinkEstimators.create()
    assert est.on_ack(AckRecord(0, 0, 40 * MS, 40 * MS))
    assert not est.on_ack(AckRecord(0, 0, 90 * MS, 90 * MS))
    assert est.rtt.current == 40 * MS
    assert est.z.current is None


def test_rtt_min_tracks_epoch_minimum():
    rng = random.Random(2)
    est = LinkEstimators.create(feedback=True)
    rtts = [rng.randrange(1, 10**8) for _ in range(300)]
    t = 0
    for i, r in enumerate(rtts):
        t += rng.randrange(1, 10**6)
        est.on_ack(AckRecord(i, max(0, t - r), t, r))
    assert est.feedback.rtt_min_epoch == min(rtts)


def _fb(rtt_bar, rtt_min, zeta=0):
    fb = FeedbackState(200 * MS, enabled=True, zeta=zeta, rtt_min_epoch=rtt_min)
    return fb, EwmaEstimator(current=rtt_bar)


def test_identity_when_no_violation():
    fb, est = _fb(201.4 * MS, 128.64 * MS)
    assert not feedback_epoch_end(fb, est, 150 * MS)
    assert fb.zeta == 0
    assert est.current == 201.4 * MS
    assert fb.rtt_min_epoch is None


def test_worked_point():
    fb, est = _fb(201.4, 128.64)
    assert feedback_epoch_end(fb, est, 250 * MS)
    assert fb.zeta == 1
    assert est.current == pytest.approx(165.02, abs=1e-9)


def test_consecutive_violations_approach_floor():
    m = 50.0
    est = EwmaEstimator(current=200.0)
    fb = FeedbackState(200 * MS, enabled=True)
    prev = est.current
    for z in range(1, 4):
        fb.rtt_min_epoch = m
        feedback_epoch_end(fb, est, 300 * MS)
        assert fb.zeta == z
        assert m < est.current < prev
        prev = est.current
    # (200+50)/2 = 125; (125+100)/3 = 75; (75+150)/4 = 56.25
    assert est.current == pytest.approx(56.25)


def test_no_rtt_sample_is_a_no_op():
    fb, est = _fb(100.0, None, zeta=3)
    assert not feedback_epoch_end(fb, est, 500 * MS)
    assert fb.zeta == 3 and est.current == 100.0


def test_disabled_feedback_does_nothing():
    fb = FeedbackState(200 * MS, enabled=False, rtt_min_epoch=10)
    est = EwmaEstimator(current=100.0)
    assert not feedback_epoch_end(fb, est, 500 * MS)
    assert est.current == 100.0 and fb.zeta == 0


@settings(max_examples=200)
@given(st.lists(st.tuples(st.booleans(), st.floats(min_value=1.0, max_value=1e6)), min_size=1, max_size=30),
       st.floats(min_value=1.0, max_value=1e6))
def test_zeta_counts_current_violation_run_and_stays_between(epochs, start):
    fb = FeedbackState(200 * MS, enabled=True)
    est = EwmaEstimator(current=start)
    run = 0
    for violated, rtt_min in epochs:
        fb.rtt_min_epoch = rtt_min
        old = est.current
        feedback_epoch_end(fb, est, (300 if violated else 100) * MS)
        run = run + 1 if violated else 0
        assert fb.zeta == run
        if violated and rtt_min < old:
            assert rtt_min < est.current < old or est.current == pytest.approx(rtt_min)
