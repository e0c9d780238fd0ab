"""Rendering and schema validation, including the flow-control timeline
produced by the protocol kit's own CLI."""

import subprocess
import sys
from pathlib import Path

import pytest

from ringplots.render import BenchCsv, PlotSpec, SchemaError, load_csv, render
from ringplots.cli import main as plot_main

HEADER = ("ts_s,msgs_per_s,mbits_per_s,p50_us,p99_us,window,drops,"
          "cpu_pct,rss_mb,efficiency")


def write_csv(path, rows, meta="protocol=mring msg_size=1024 receivers=3 "
              "nominal_mbps=1000 seed=1 mode=simnet slow_learner=5"):
    lines = [f"# ringpaxos-bench v1 {meta}", HEADER]
    lines += rows
    lines.append(f"{len(rows)},,,,,,,,,0.01")
    path.write_text("\n".join(lines) + "\n")
    return path


def simple_rows(n=10, rate=100):
    return [f"{t},{rate},{rate * 8 / 1e6:.3f},500,900,16,0,10.0,50.0,"
            for t in range(n)]


@pytest.fixture(scope="session")
def flow_csv(tmp_path_factory):
    """The flow-control CSV, produced through the protocol kit's CLI."""
    out = tmp_path_factory.mktemp("flow") / "flow_control.csv"
    res = subprocess.run(
        [sys.executable, "-m", "ringpaxos.cli", "bench", "--simnet",
         "--protocol", "mring", "--f", "1", "--msg-size", "1024",
         "--rate", "1000", "--duration", "60", "--seed", "5",
         "--window", "16", "--learner-slots", "1000",
         "--slow-learner", "20:40:30", "--csv-out", str(out)],
        capture_output=True, text=True, timeout=300,
    )
    assert res.returncode == 0, res.stderr
    return out


def test_flow_timeline_slow_interval_visibly_below_neighbors(flow_csv,
                                                             tmp_path):
    out = tmp_path / "flow.png"
    (ds,) = render(PlotSpec("flowcontrol-timeline", (str(flow_csv),),
                            str(out)))
    assert out.exists() and out.stat().st_size > 4000
    rate = {r["ts_s"]: r["msgs_per_s"] for r in ds.rows}
    pre = [rate[t] for t in range(8, 19)]
    slow = [rate[t] for t in range(24, 39)]
    post = [rate[t] for t in range(45, 55)]
    pre_mean = sum(pre) / len(pre)
    slow_mean = sum(slow) / len(slow)
    post_mean = sum(post) / len(post)
    assert slow_mean < 0.75 * pre_mean
    assert slow_mean < 0.75 * post_mean


def test_column_rename_is_reported_with_the_column_name(flow_csv, tmp_path):
    text = flow_csv.read_text().replace("mbits_per_s", "megabits")
    renamed = tmp_path / "renamed.csv"
    renamed.write_text(text)
    with pytest.raises(SchemaError) as err:
        render(PlotSpec("flowcontrol-timeline", (str(renamed),),
                        str(tmp_path / "x.png")))
    assert "mbits_per_s" in str(err.value)
    assert "megabits" in str(err.value)


def test_cli_reports_schema_error_and_exit_code(flow_csv, tmp_path, capsys):
    text = flow_csv.read_text().replace("p99_us", "tail_us")
    renamed = tmp_path / "renamed.csv"
    renamed.write_text(text)
    rc = plot_main(["--kind", "flowcontrol-timeline", "--in", str(renamed),
                    "--out", str(tmp_path / "x.png")])
    assert rc == 2
    assert "p99_us" in capsys.readouterr().err


def test_identical_inputs_give_identical_figures(tmp_path):
    src = write_csv(tmp_path / "a.csv", simple_rows())
    out1, out2 = tmp_path / "one.png", tmp_path / "two.png"
    render(PlotSpec("flowcontrol-timeline", (str(src),), str(out1)))
    render(PlotSpec("flowcontrol-timeline", (str(src),), str(out2)))
    assert out1.read_bytes() == out2.read_bytes()


def test_empty_csv_renders_warning_figure(tmp_path):
    src = write_csv(tmp_path / "empty.csv", [])
    out = tmp_path / "empty.png"
    (ds,) = render(PlotSpec("flowcontrol-timeline", (str(src),), str(out)))
    assert ds.rows == []
    assert out.exists() and out.stat().st_size > 1000


def test_two_inputs_overlay(tmp_path):
    a = write_csv(tmp_path / "a.csv", simple_rows(rate=100),
                  meta="protocol=mring msg_size=1024 receivers=3 mode=simnet")
    b = write_csv(tmp_path / "b.csv", simple_rows(rate=200),
                  meta="protocol=uring msg_size=1024 receivers=3 mode=simnet")
    out = tmp_path / "overlay.png"
    datasets = render(PlotSpec("flowcontrol-timeline", (str(a), str(b)),
                               str(out)))
    assert {d.label for d in datasets} == {"mring", "uring"}
    assert out.exists()


def test_throughput_vs_n_and_latency_vs_size(tmp_path):
    inputs = []
    for n, size in ((3, 1024), (5, 8192)):
        p = write_csv(
            tmp_path / f"r{n}.csv", simple_rows(rate=n * 50),
            meta=f"protocol=mring msg_size={size} receivers={n} mode=simnet",
        )
        inputs.append(str(p))
    out = tmp_path / "tn.png"
    render(PlotSpec("throughput-vs-n", tuple(inputs), str(out), log_y=True))
    assert out.exists()
    out2 = tmp_path / "ls.svg"
    render(PlotSpec("latency-vs-size", tuple(inputs), str(out2)))
    assert out2.exists()


def test_unknown_kind_rejected(tmp_path):
    with pytest.raises(SchemaError):
        PlotSpec("pie", ("x.csv",), "out.png")


def test_monotone_timestamp_validation(tmp_path):
    rows = simple_rows(5)
    rows[2], rows[3] = rows[3], rows[2]
    src = write_csv(tmp_path / "bad.csv", rows)
    with pytest.raises(SchemaError) as err:
        load_csv(src)
    assert "monotone" in str(err.value)


def test_inputs_never_mutated(tmp_path):
    src = write_csv(tmp_path / "a.csv", simple_rows())
    before = src.read_bytes()
    render(PlotSpec("flowcontrol-timeline", (str(src),),
                    str(tmp_path / "o.png")))
    assert src.read_bytes() == before
