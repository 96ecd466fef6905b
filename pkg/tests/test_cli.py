import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from splitaudit.cli import main
from splitaudit.sim import read_events

SCHEDULE = "0:idle,5:intrusion,8:idle"


def _port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _spawn(*args, **kw):
    return subprocess.Popen([sys.executable, "-m", "splitaudit.cli", *args], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True, **kw)


def _wait_listening(port, timeout=10.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        try:
            socket.create_connection(("127.0.0.1", port), 0.2).close()
            return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(port)


def test_gen_weights_deterministic(tmp_path):
    a, b = tmp_path / "a.daud", tmp_path / "b.daud"
    assert main(["gen", "weights", "--seed", "42", "--out", str(a)]) == 0
    assert main(["gen", "weights", "--seed", "42", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_trace(tmp_path):
    out = tmp_path / "r.trace"
    assert main(["gen", "trace", "--class", "reboot", "--seconds", "10", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# sampling_rate=1700" and len(lines) - 1 == 17000


def test_gen_trace_unknown_class(tmp_path, capsys):
    assert main(["gen", "trace", "--class", "party", "--out", str(tmp_path / "x")]) == 2
    assert "unknown class" in capsys.readouterr().err


def test_usage_errors():
    with pytest.raises(SystemExit) as e:
        main(["verify", "nonsense"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_verify_complexity_and_wire(capsys):
    assert main(["verify", "complexity"]) == 0
    out = capsys.readouterr().out.splitlines()
    summary = json.loads(out[-1])
    assert summary == {"suite": "complexity", "pass": True, "checks": len(out) - 1}
    assert main(["verify", "wire", "--seed", "3"]) == 0


def test_verify_oracle_small(capsys):
    assert main(["verify", "oracle", "--cases", "5", "--seed", "2"]) == 0
    assert '"5/5"' in capsys.readouterr().out


def test_verify_failure_exit_code(monkeypatch):
    from splitaudit import cli
    from splitaudit.verify import Check

    monkeypatch.setattr(cli, "run_suite", lambda *a: [Check("x", False)])
    assert cli.main(["verify", "masks"]) == 1


def test_sim_zero_duration(tmp_path):
    assert main(["sim", "--duration", "0", "--out", str(tmp_path)]) == 0
    assert "predictions 0" in (tmp_path / "summary.txt").read_text()
    assert (tmp_path / "events.jsonl").read_text() == ""


def test_sim_bad_plan(tmp_path):
    assert main(["sim", "--auditors", "0", "--out", str(tmp_path)]) == 2
    assert main(["sim", "--schedule", "0:party", "--out", str(tmp_path)]) == 2


def test_sim_burst_timeline(tmp_path):
    assert main(["sim", "--schedule", SCHEDULE, "--duration", "15", "--speed", "10", "--out", str(tmp_path)]) == 0
    events = read_events(tmp_path / "events.jsonl")
    assert len(events) == 28
    intrusion = [e.window_id for e in events if e.label == 3]
    # windows lying wholly inside the 5..8 s burst (samples 8500..13600) must be flagged
    inside = [k for k in range(28) if 8500 <= 850 * k and 850 * k + 2550 <= 13600]
    assert inside and set(inside) <= set(intrusion)
    # nothing is flagged that does not overlap the burst
    assert all(850 * k < 13600 and 850 * k + 2550 > 8500 for k in intrusion)
    summary = (tmp_path / "summary.txt").read_text()
    for key in ("timeline", "latency_ms step2", "throughput_pred_per_s", "dropped_windows", "auditor_bytes_in"):
        assert key in summary


def test_config_file(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# unknown keys are config errors\nduration = 0\nbogus = 1\n")
    assert main(["sim", "--config", str(conf), "--out", str(tmp_path)]) == 2
    conf.write_text("duration = 0\nauditors = 3\n")
    assert main(["sim", "--config", str(conf), "--out", str(tmp_path)]) == 0
    assert "auditors 3" in (tmp_path / "summary.txt").read_text()
    # the command line wins over the file
    assert main(["sim", "--config", str(conf), "--auditors", "2", "--out", str(tmp_path)]) == 0
    assert "auditors 2" in (tmp_path / "summary.txt").read_text()


def test_inferencer_without_cloud_exits_zero_on_signal(tmp_path):
    port = _port()
    metrics = tmp_path / "m.txt"
    p = _spawn("run", "inferencer", "--listen", f"127.0.0.1:{port}", "--cloud", f"127.0.0.1:{_port()}",
               "--metrics-file", str(metrics))
    try:
        _wait_listening(port)
        assert p.poll() is None
        p.send_signal(signal.SIGTERM)
        assert p.wait(15) == 0
    finally:
        p.kill()
    assert "cloud_connect_failures" in metrics.read_text()


def test_auditor_cadence(tmp_path):
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    port = srv.getsockname()[1]
    p = _spawn("run", "auditor", "--synth-class", "idle", "--seed", "7", "--connect", f"127.0.0.1:{port}",
               "--packets", "5")
    conn, _ = srv.accept()
    conn.settimeout(10)
    stamps, buf = [], b""
    while len(stamps) < 5:
        chunk = conn.recv(65536)
        if not chunk:
            break
        buf += chunk
        while b"\n" in buf:
            line, buf = buf.split(b"\n", 1)
            stamps.append(time.monotonic())
            assert json.loads(line)["num_data_points"] == 850
    assert p.wait(10) == 0
    conn.close()
    srv.close()
    gaps = [b - a for a, b in zip(stamps, stamps[1:])]
    assert len(stamps) == 5 and all(0.4 < g < 0.6 for g in gaps)


def test_networked_roles_match_sim(tmp_path):
    weights = tmp_path / "w.daud"
    assert main(["gen", "weights", "--detector", "--preset", "single", "--out", str(weights)]) == 0
    assert main(["sim", "--schedule", SCHEDULE, "--duration", "10", "--seed", "4", "--speed", "10",
                 "--params", str(weights), "--out", str(tmp_path / "sim")]) == 0
    sim_labels = [e.label for e in read_events(tmp_path / "sim" / "events.jsonl")]

    cport, iport = _port(), _port()
    events = tmp_path / "net.jsonl"
    cloud = _spawn("run", "cloud", "--params", str(weights), "--listen", f"127.0.0.1:{cport}")
    inf = None
    try:
        _wait_listening(cport)
        inf = _spawn("run", "inferencer", "--preset", "single", "--listen", f"127.0.0.1:{iport}",
                     "--cloud", f"127.0.0.1:{cport}", "--event-log", str(events))
        _wait_listening(iport)
        aud = subprocess.run([sys.executable, "-m", "splitaudit.cli", "run", "auditor", "--host", "auditor0",
                              "--schedule", SCHEDULE, "--seed", "4", "--packets", "20", "--speed", "10",
                              "--connect", f"127.0.0.1:{iport}"], capture_output=True, text=True, timeout=60)
        assert aud.returncode == 0, aud.stderr
        end = time.monotonic() + 20
        while time.monotonic() < end and (not events.exists() or len(events.read_text().splitlines()) < 18):
            time.sleep(0.05)
        for proc in (inf, cloud):
            proc.send_signal(signal.SIGINT)
        assert inf.wait(15) == 0 and cloud.wait(15) == 0
    finally:
        for proc in (inf, cloud):
            if proc is not None:
                proc.kill()
    net_labels = [e.label for e in read_events(events)]
    assert len(sim_labels) == 18
    assert net_labels == sim_labels
    assert 3 in sim_labels
