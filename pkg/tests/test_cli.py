import threading

from agectl.cli import build_parser, main
from agectl.harness import read_trace
from agectl.udp import EchoServer


def test_help_lists_commands():
    text = build_parser().format_help()
    for cmd in ("udp-echo", "udp-send", "simulate", "sweep-kappa", "compare-acpplus", "feedback-test", "analyze"):
        assert cmd in text


def test_simulate_and_analyze(tmp_path, capsys):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("policy.kind = acp+mod\npackets = 400\nruns = 2\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    traces = sorted((tmp_path / "o" / "acp+mod").glob("*.csv"))
    assert len(traces) == 2
    assert main(["simulate", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "one")]) == 0
    assert [p.name for p in (tmp_path / "one" / "acp+mod").glob("*.csv")] == ["acp+mod-s9.csv"]
    assert main(["analyze", *map(str, traces), "--report", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "summary.txt").exists()
    assert "mean_age_ns" in capsys.readouterr().out


def test_unknown_key_is_an_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("policy.speed = 3\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_sweep_and_compare(tmp_path):
    assert main(["sweep-kappa", "--values", "0.1,1", "--runs", "1", "--packets", "200", "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "plots" / "kappa-sweep.dat").exists()
    assert main(["compare-acpplus", "--epochs", "30", "--runs", "1", "--packets", "200", "--out", str(tmp_path / "c")]) == 0
    assert sorted(p.name for p in (tmp_path / "c").iterdir() if p.name != "plots") == ["acp+-T30", "acp+mod-T30"]


def test_feedback_test_command(tmp_path, capsys):
    assert main(["feedback-test", "--threshold-ms", "200", "--seeds", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "recovery.txt").exists()
    assert read_trace(tmp_path / "feedback-s1.csv").config.policy.feedback
    assert "feedback helped in" in capsys.readouterr().out


def test_udp_send_writes_trace(tmp_path):
    server = EchoServer(("127.0.0.1", 0))
    stop = threading.Event()
    th = threading.Thread(target=server.serve, args=(stop,), daemon=True)
    th.start()
    try:
        host, port = server.address
        out = tmp_path / "t.csv"
        assert main(["udp-send", "--peer", f"{host}:{port}", "--policy", "acp", "--packets", "200",
                     "--out", str(out)]) == 0
    finally:
        stop.set()
        th.join(2)
        server.close()
    t = read_trace(out)
    assert t.rows and t.meta["sent"] == "200" and all(r.monitor_age_ns is None for r in t.rows)
