import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agectl.age import DeliveryEvent, replay
from agectl.config import ExperimentConfig
from agectl.harness import render_trace, trace_rows
from agectl.netsim import (
    Channel,
    ChannelModel,
    CoalesceFault,
    CoalescingBuffer,
    ConfigError,
    Simulation,
    echo_monitor,
    issue3_scenario,
    run_simulation,
)
from agectl.policies import InitAbort

MS = 1_000_000


def quiet_channel(delay="25ms", **extra):
    return {"channel.base_delay_ns": delay, "channel.jitter": "constant", "channel.jitter_mean_ns": 0,
            "channel.loss_prob": 0.0, "channel.service_mean_ns": 0, **extra}


def test_fixed_rate_constant_delay_mean_age():
    cfg = ExperimentConfig().replace(**quiet_channel(), **{
        "policy.kind": "fixed", "policy.fixed_rate": 10.0, "packets": 1000})
    res = run_simulation(cfg, 1)
    assert float(res.monitor_summary.avg_age) == pytest.approx(75 * MS, abs=1 * MS)
    # steady-state epochs sit exactly on the sawtooth average
    assert res.monitor_epoch_ages[-2] == pytest.approx(75 * MS, abs=1)


def test_every_rtt_is_twice_the_delay():
    cfg = ExperimentConfig().replace(**quiet_channel("10ms"), **{"policy.kind": "acp", "packets": 500})
    res = run_simulation(cfg, 3)
    log = res.packets
    rtts = {log.ack[i] - log.send[i] for i in range(len(log.seq)) if log.ack[i] >= 0}
    assert rtts == {20 * MS}


def test_total_loss_aborts_init():
    cfg = ExperimentConfig().replace(**{"channel.loss_prob": 1.0, "packets": 100})
    with pytest.raises(InitAbort):
        run_simulation(cfg, 1)


@pytest.mark.parametrize("kind", ["lazy", "acp", "acp+", "acp+mod", "fixed"])
def test_same_seed_same_bytes(kind):
    cfg = ExperimentConfig().replace(**{"policy.kind": kind, "packets": 1500, "fault.enabled": True,
                                        "fault.mean_interval_ns": "5s"})
    a = run_simulation(cfg, 7)
    b = run_simulation(cfg, 7)
    assert render_trace(trace_rows(a, "r"), cfg, 7, "r") == render_trace(trace_rows(b, "r"), cfg, 7, "r")
    assert a.packets == b.packets


def test_different_seeds_differ():
    cfg = ExperimentConfig().replace(packets=1000)
    a, b = run_simulation(cfg, 1), run_simulation(cfg, 2)
    assert a.packets.ack != b.packets.ack
    assert a.packets.seq == b.packets.seq[: len(a.packets.seq)] or b.packets.seq == a.packets.seq[: len(b.packets.seq)]


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_conservation_and_offline_monitor_recompute(seed):
    cfg = ExperimentConfig().replace(**{"policy.kind": "acp+", "packets": 2000, "fault.enabled": True,
                                        "fault.mean_interval_ns": "10s"})
    res = run_simulation(cfg, seed)
    c = res.counts
    assert c["sent"] == c["acked"] + c["lost"] + c["in_flight"]
    assert c["sent"] == cfg.packets
    log = res.packets
    arrivals = sorted((log.recv[i], i) for i in range(len(log.seq)) if 0 <= log.recv[i] <= res.end_time)
    offline = replay([DeliveryEvent(log.send[i], t, i) for t, i in arrivals], (0, res.end_time))
    assert offline.avg_age == res.monitor_summary.avg_age


def test_epoch_rows_are_contiguous_and_ordered():
    res = run_simulation(ExperimentConfig().replace(**{"policy.kind": "acp", "packets": 2000}), 4)
    recs = res.records
    assert all(r.k == i for i, r in enumerate(recs))
    assert all(a.t_end == b.t_start for a, b in zip(recs, recs[1:]))
    assert all(r.epoch_len >= ExperimentConfig().policy.min_epoch_ns for r in recs)


def test_events_processed_in_priority_order():
    sim = Simulation(ExperimentConfig().replace(**{"packets": 800, "fault.enabled": True,
                                                   "fault.mean_interval_ns": "3s"}), 5)
    sim.record_events = True
    sim.run()
    from agectl.netsim import EVENT_NAMES
    prio = {v: k for k, v in EVENT_NAMES.items()}
    keys = [(t, prio[name]) for t, name, _ in sim.trace]
    assert keys == sorted(keys)


def test_channel_without_jitter_is_exact():
    ch = Channel(ChannelModel(base_delay_ns=10 * MS, jitter="constant", jitter_mean_ns=0, loss_prob=0.0,
                              service_mean_ns=0), random.Random(1))
    assert [ch.transit(t) for t in (0, 5, 100)] == [10 * MS, 10 * MS + 5, 10 * MS + 100]


def test_bottleneck_queues_back_to_back_packets():
    ch = Channel(ChannelModel(base_delay_ns=0, jitter="constant", jitter_mean_ns=0, loss_prob=0.0,
                              service_mean_ns=10 * MS), random.Random(1))
    assert [ch.transit(0) for _ in range(3)] == [10 * MS, 20 * MS, 30 * MS]


def test_hold_until_count():
    buf = CoalescingBuffer(CoalesceFault(active=True, hold_count=5))
    out = []
    for i, t in enumerate(range(0, 50 * MS, 10 * MS)):
        released, _ = buf.arrive(i, t)
        out.extend(released)
    assert out == [(i, 40 * MS) for i in range(5)]


def test_hold_until_timeout():
    buf = CoalescingBuffer(CoalesceFault(active=True, hold_count=5, flush_timeout_ns=500 * MS))
    released, deadline = buf.arrive("p", 0)
    assert released == [] and deadline == 500 * MS
    assert buf.flush(deadline, buf.generation) == [("p", 500 * MS)]
    assert buf.flush(deadline, buf.generation - 1) == []  # stale timer


def test_fault_end_releases_held_packets():
    buf = CoalescingBuffer(CoalesceFault(active=True, hold_count=5))
    buf.arrive("a", 0)
    buf.arrive("b", 1)
    assert buf.set_active(False, 7) == [("a", 7), ("b", 7)]
    assert buf.arrive("c", 9) == ([("c", 9)], None)


@settings(max_examples=200)
@given(st.integers(1, 8), st.lists(st.tuples(st.integers(0, 10**9), st.booleans()), max_size=60))
def test_buffer_never_reorders_or_drops(n, ops):
    buf = CoalescingBuffer(CoalesceFault(active=True, hold_count=n, flush_timeout_ns=10**6))
    out = []
    t = 0
    sent = 0
    for dt, do_flush in ops:
        t += dt
        if do_flush:
            out.extend(buf.flush(t, buf.generation))
        else:
            out.extend(buf.arrive(sent, t)[0])
            sent += 1
    out.extend(buf.set_active(False, t + 1))
    assert [p for p, _ in out] == list(range(sent))


def test_echo_reflects_unchanged():
    assert echo_monitor((7, 123)) == (7, 123)


def test_invalid_channel_rejected():
    with pytest.raises(ConfigError):
        ChannelModel(jitter="pareto")
    with pytest.raises(ConfigError):
        ChannelModel(loss_prob=1.5)


def test_no_fault_means_feedback_never_fires():
    cfg = ExperimentConfig().replace(**{"policy.kind": "lazy", "policy.feedback": True, "packets": 3000})
    res = run_simulation(cfg, 1)
    assert all(r.zeta == 0 and not r.feedback_applied for r in res.records)


def test_issue3_needs_a_scripted_fault():
    with pytest.raises(ConfigError):
        issue3_scenario(ExperimentConfig().replace(packets=100), 1)


def test_scripted_fault_window_is_recorded():
    cfg = ExperimentConfig().replace(**{"policy.kind": "lazy", "fault.start_ns": "5s", "fault.duration_ns": "3s",
                                        "packets": 2000})
    res, rec = issue3_scenario(cfg, 1)
    assert res.fault_windows == [(5_000_000_000, 8_000_000_000)]
    assert rec.fault_end == 8_000_000_000
