import csv
import io
import subprocess
import sys

import pytest

from multirail.bench import HEADER, BenchConfig, FailureInjection, run_benchmark
from multirail.bench.cli import _forward_args, main
from multirail.config import ConfigError, format_size, load_rails, parse_size, parse_sizes
from multirail.simnet.calibration import CalibratedProfile

MB = 1 << 20

TWO_RAILS = """
[[rails]]
protocol = "tcp"
t_setup_us = 200
bandwidth_bps = 1e8

[[rails]]
protocol = "tcp"
t_setup_us = 200
bandwidth_bps = 1e8
"""

ONE_RAIL = TWO_RAILS.split("[[rails]]", 2)
ONE_RAIL = "[[rails]]" + ONE_RAIL[1]


def rows(text):
    return list(csv.reader(io.StringIO(text)))


# --- config parsing -------------------------------------------------------------------------

@pytest.mark.parametrize("text,want", [("64KB", 65536), ("1kb", 1024), ("8MB", 8 * MB), ("1GB", 1 << 30),
                                       ("4", 4), ("0.5KB", 512), (12, 12)])
def test_parse_size(text, want):
    assert parse_size(text) == want


@pytest.mark.parametrize("bad", ["", "KB", "-1KB", "0", "1.3B", "3XB"])
def test_parse_size_rejects(bad):
    with pytest.raises(ConfigError):
        parse_size(bad)


def test_parse_sizes_and_format():
    assert parse_sizes("2KB:16KB") == [2048, 4096, 8192, 16384]
    assert parse_sizes("1KB,8MB") == [1024, 8 * MB]
    with pytest.raises(ConfigError):
        parse_sizes("8MB:1KB")
    assert [format_size(s) for s in (1024, 8 * MB, 1 << 30, 12)] == ["1KB", "8MB", "1GB", "12B"]


def test_load_rails(tmp_path):
    p = tmp_path / "r.toml"
    p.write_text(TWO_RAILS + '\n[[rails]]\nprotocol = "sharp"\ncalibration = [["1KB", 9], ["64MB", 181484]]\n')
    rails = load_rails(p)
    assert [r.rail_id for r in rails[:2]] == [0, 1] and rails[0].bandwidth == 1e8
    assert isinstance(rails[2], CalibratedProfile) and rails[2].profile.rail_id == 2
    p.write_text('[[rails]]\nprotocol = "tcp"\nt_setup_us = 1\nbandwidth_bps = 1\nspeed = 3\n')
    with pytest.raises(ConfigError, match="unknown keys"):
        load_rails(p)
    p.write_text('[[rails]]\nprotocol = "tcp"\n')
    with pytest.raises(ConfigError):
        load_rails(p)
    with pytest.raises(ConfigError):
        load_rails(tmp_path / "missing.toml")


def test_bench_config_validation():
    with pytest.raises(ConfigError):
        BenchConfig(world_size=1)
    with pytest.raises(ConfigError):
        BenchConfig(sizes=[6])
    with pytest.raises(ConfigError):
        BenchConfig(transport="udp")
    assert BenchConfig().clock == "virtual" and BenchConfig(transport="shaped").clock == "wall"
    assert BenchConfig(iters=10, warmup=100).measured_iters == 1
    assert FailureInjection.parse("1@250ms", 2) == FailureInjection(1, 250.0, 2)
    with pytest.raises(ConfigError):
        FailureInjection.parse("1-250")


def test_forward_args_drops_rank():
    assert _forward_args(["--ranks", "2", "--rank", "1", "--rank=0", "--sizes", "1KB"]) == [
        "--ranks", "2", "--sizes", "1KB"]


# --- live runs in memory --------------------------------------------------------------------

def test_two_ranks_one_size(capsys):
    assert main(["--ranks", "2", "--sizes", "1KB", "--iters", "20", "--warmup", "5"]) == 0
    out = rows(capsys.readouterr().out)
    assert out[0] == HEADER and len(out) == 2
    rec = dict(zip(HEADER, out[1]))
    assert rec["size"] == "1024" and rec["ranks"] == "2" and rec["clock"] == "virtual"
    assert float(rec["latency_us"]) > 0


def test_csv_is_reproducible(tmp_path):
    paths = [tmp_path / f"run{i}.csv" for i in range(2)]
    for p in paths:
        assert main(["--ranks", "4", "--sizes", "64KB,1MB", "--iters", "150", "--warmup", "20",
                     "--output", str(p), "--seed", "3"]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_dual_rail_beats_single(tmp_path):
    one, two = tmp_path / "one.toml", tmp_path / "two.toml"
    one.write_text(ONE_RAIL)
    two.write_text(TWO_RAILS)
    lat = {}
    for name, path in (("single", one), ("dual", two)):
        recs = run_benchmark(BenchConfig(world_size=4, sizes=[8 * MB], iters=300, warmup=100, rails=str(path)))
        lat[name] = recs[0].latency_us
    assert lat["single"] / lat["dual"] >= 1.5


def test_balancer_state_round_trip(tmp_path):
    state = tmp_path / "alloc.json"
    args = ["--ranks", "2", "--sizes", "1MB", "--iters", "250", "--warmup", "10", "--balancer-state", str(state)]
    assert main(args) == 0
    assert state.exists()
    assert main(args) == 0


# --- presets and errors ------------------------------------------------------------------------

@pytest.mark.parametrize("preset", ["table1", "failover-trace"])
def test_preset_writes_csv_and_plot(tmp_path, capsys, preset):
    assert main(["--preset", preset, "--quick", "--output", str(tmp_path)]) == 0
    files = sorted(p.name for p in tmp_path.iterdir())
    assert f"{preset}.csv" in files and any(f.startswith("plot_") for f in files)
    assert rows(capsys.readouterr().out)[0] == rows((tmp_path / f"{preset}.csv").read_text())[0]
    plot = next(tmp_path.glob("plot_*.py"))
    compile(plot.read_text(), str(plot), "exec")


def test_unknown_preset_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--preset", "nope"])
    assert exc.value.code == 2
    assert "unknown preset" in capsys.readouterr().err


def test_missing_rails_exits_1(tmp_path, capsys):
    assert main(["--rails", str(tmp_path / "nope.toml"), "--sizes", "1KB"]) == 1
    assert "not found" in capsys.readouterr().err


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "multirail.bench.cli", "--ranks", "2", "--sizes", "4KB",
                           "--iters", "5", "--warmup", "1"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert len(rows(proc.stdout)) == 2
