import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agectl.age import (
    AgeError,
    AgeTracker,
    DeliveryEvent,
    advance_and_deliver,
    close_window,
    min_system_time,
    replay,
    sender_side_age_estimate,
    trapezoid2,
)
from agectl.estimators import AckRecord

from oracles import numeric_age_average, random_trace, trapezoid_oracle

S = 1_000_000_000
MS = 1_000_000


def run_tracker(t_init, t_final, t0, events):
    tr = AgeTracker(t_init, t0)
    for gen, recv in events:
        tr.deliver(DeliveryEvent(gen, recv))
    return tr.close_window(t_final)


def test_single_delivery_area_and_reset():
    tr = AgeTracker()
    advance_and_deliver(tr, DeliveryEvent(1 * S, 2 * S))
    assert tr.accumulated_area == 2 * S * S
    assert tr.age_at(2 * S) == 1 * S


def test_stale_delivery_only_advances_time():
    tr = AgeTracker()
    tr.deliver(DeliveryEvent(1 * S, 2 * S))
    tr.deliver(DeliveryEvent(1 * S, 3 * S))
    assert tr.freshest_gen_time == 1 * S
    assert tr.age_at(3 * S) == 2 * S
    assert tr.accumulated_area == 2 * S * S + Fraction((1 + 2) * S * S, 2)
    assert tr.n_deliveries == 1


def test_empty_window_is_linear_growth():
    s = close_window(AgeTracker(), 2 * S)
    assert s.avg_age == 1 * S
    assert s.peak_age == 2 * S
    assert s.n_deliveries == 0


def test_three_event_trace_matches_trapezoid_sum():
    # T_init = 0 with an update generated at 0; deliveries (gen, recv) in ms
    events = [(10 * MS, 40 * MS), (50 * MS, 70 * MS), (80 * MS, 95 * MS)]
    s = run_tracker(0, 120 * MS, 0, events)
    q1 = Fraction((0 + 40 - 0) * (40 - 0), 2)
    q2 = Fraction((70 + 40 - 2 * 10) * (70 - 40), 2)
    q3 = Fraction((95 + 70 - 2 * 50) * (95 - 70), 2)
    qn = Fraction((120 + 95 - 2 * 80) * (120 - 95), 2)
    assert s.avg_age == (q1 + q2 + q3 + qn) / 120 * MS
    assert s.peak_age == 60 * MS  # 70 ms - 10 ms, just before the second reset


def test_delivery_at_window_end_has_zero_fringe():
    s = run_tracker(0, 100, 0, [(60, 100)])
    assert s.area2 == trapezoid2(0, 100, 0)
    assert s.peak_age == 100


def test_out_of_order_delivery_rejected():
    tr = AgeTracker()
    tr.deliver(DeliveryEvent(5, 10))
    with pytest.raises(AgeError, match="out-of-order"):
        tr.deliver(DeliveryEvent(6, 9))


def test_zero_length_window_rejected():
    tr = AgeTracker(start=50)
    with pytest.raises(AgeError, match="zero-length"):
        tr.close_window(50)


def test_receive_before_generation_rejected():
    with pytest.raises(AgeError):
        DeliveryEvent(10, 5)


def test_age_carries_across_windows():
    tr = AgeTracker()
    tr.deliver(DeliveryEvent(10, 30))
    first = tr.close_window(50)
    second = tr.close_window(100)
    # no delivery in the second window: age keeps growing from 40 to 90
    assert second.avg_age == Fraction(40 + 90, 2)
    both = run_tracker(0, 100, 0, [(10, 30)])
    assert (first.area2 + second.area2) == both.area2


def test_sender_side_estimate_from_acks():
    acks = [AckRecord(0, 10 * MS, 40 * MS, 30 * MS)]
    s = sender_side_age_estimate(acks, (0, 40 * MS))
    assert s.peak_age == 40 * MS
    tr = AgeTracker()
    tr.deliver(DeliveryEvent(10 * MS, 40 * MS))
    assert tr.age_at(40 * MS) == 30 * MS


def test_duplicate_ack_leaves_freshness_alone():
    a = AckRecord(3, 10, 40, 30)
    once = sender_side_age_estimate([a], (0, 100))
    twice = sender_side_age_estimate([a, AckRecord(3, 10, 60, 50)], (0, 100))
    assert once.avg_age == twice.avg_age


def test_interleaved_acks_match_max_gen_replay():
    rng = random.Random(4)
    for _ in range(200):
        recvs = sorted(rng.randrange(1, 10_000) for _ in range(30))
        acks = [AckRecord(i, max(0, r - rng.randrange(1, 500)), r, 1) for i, r in enumerate(recvs)]
        est = sender_side_age_estimate(acks, (0, 10_000))
        assert est.avg_age == trapezoid_oracle(0, 10_000, 0, [(a.gen_time, a.ack_recv_time) for a in acks])


def test_replay_uses_events_before_window_for_freshness():
    events = [DeliveryEvent(5, 8), DeliveryEvent(20, 30), DeliveryEvent(40, 200)]
    s = replay(events, (10, 100))
    assert s.avg_age == trapezoid_oracle(10, 100, 5, [(20, 30)])


def test_min_system_time():
    assert min_system_time([DeliveryEvent(0, 7), DeliveryEvent(3, 5)]) == 2
    assert min_system_time([]) is None


def test_random_traces_match_trapezoid_oracle_exactly():
    rng = random.Random(11)
    for _ in range(300):
        t_init, t_final, t0, events = random_trace(rng, max_events=50)
        assert run_tracker(t_init, t_final, t0, events).avg_age == trapezoid_oracle(t_init, t_final, t0, events)


def test_random_50_event_trace_matches_numeric_integration():
    rng = random.Random(5)
    us = 1_000
    for _ in range(20):
        t_init, t_final, t0, events = random_trace(rng, max_events=50, unit=us, span=50_000)
        exact = float(run_tracker(t_init, t_final, t0, events).avg_age)
        numeric = numeric_age_average(t_init, t_final, t0, events, us)
        assert numeric == pytest.approx(exact, rel=1e-6)


traces = st.integers(min_value=0, max_value=10_000).flatmap(
    lambda seed: st.just(random_trace(random.Random(seed), max_events=40, span=5_000))
)


@settings(max_examples=200, deadline=None)
@given(traces)
def test_peak_bounds_average_bounds_min_system_time(trace):
    t_init, t_final, t0, events = trace
    s = run_tracker(t_init, t_final, t0, events)
    assert s.avg_age <= s.peak_age
    inside = [DeliveryEvent(g, r) for g, r in events]
    m = min_system_time(inside)
    if m is not None:
        assert s.avg_age >= min(m, t_init - t0)


@settings(max_examples=200, deadline=None)
@given(traces, st.randoms(use_true_random=False))
def test_stale_deliveries_can_be_permuted(trace, rnd):
    t_init, t_final, t0, events = trace
    base = run_tracker(t_init, t_final, t0, events).avg_age
    # swap the gen times of stale deliveries among themselves, keeping each stale
    held, stale_idx = t0, []
    for i, (g, r) in enumerate(events):
        if g > held:
            held = g
        else:
            stale_idx.append(i)
    gens = [events[i][0] for i in stale_idx]
    rnd.shuffle(gens)
    permuted = list(events)
    held, j = t0, 0
    for i, (g, r) in enumerate(events):
        if i in stale_idx:
            cand = min(gens[j], held)
            permuted[i] = (cand, r)
            j += 1
        else:
            held = max(held, g)
    assert run_tracker(t_init, t_final, t0, permuted).avg_age == base


@settings(max_examples=100, deadline=None)
@given(traces, st.integers(min_value=1, max_value=4))
def test_splitting_window_preserves_area(trace, pieces):
    t_init, t_final, t0, events = trace
    whole = run_tracker(t_init, t_final, t0, events)
    cuts = sorted({t_init + (t_final - t_init) * i // pieces for i in range(1, pieces)} - {t_init})
    tr = AgeTracker(t_init, t0)
    area2 = 0
    it = iter(events)
    pending = next(it, None)
    for cut in cuts + [t_final]:
        while pending is not None and pending[1] <= cut:
            tr.deliver(DeliveryEvent(*pending))
            pending = next(it, None)
        if cut > tr.window_start:
            area2 += tr.close_window(cut).area2
    assert area2 == whole.area2
