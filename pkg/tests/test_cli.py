import csv
import subprocess
import sys

import pytest

from frugalmap import cli
from frugalmap.bench import NATURAL_PARTITIONS
from frugalmap.relevance import read_table

from conftest import TWO_NODE_BIF

ALARM_EVIDENCE = ",".join(f"{v}=0" for v in NATURAL_PARTITIONS["alarm"][1])


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def tiny_bif(tmp_path):
    p = tmp_path / "tiny.bif"
    p.write_text(TWO_NODE_BIF)
    return p


def parse_kv(text):
    return dict(line.split(": ", 1) for line in text.strip().splitlines())


def test_convert_alarm(capsys, tmp_path):
    out = tmp_path / "alarm.fg"
    assert run(capsys, "convert", "alarm", str(out))[0] == 0
    text = out.read_text()
    assert text.splitlines()[0] == "37"
    assert run(capsys, "convert", "alarm", str(tmp_path / "again.fg"))[0] == 0
    assert (tmp_path / "again.fg").read_text() == text


def test_convert_patch_identity_on_positive_net(capsys, tiny_bif, tmp_path):
    a, b = tmp_path / "a.fg", tmp_path / "b.fg"
    run(capsys, "convert", str(tiny_bif), str(a))
    run(capsys, "convert", str(tiny_bif), str(b), "--patch-determinism")
    assert a.read_text() == b.read_text()


def test_convert_errors(capsys, tmp_path):
    assert run(capsys, "convert", str(tmp_path / "missing.bif"))[0] == 2
    bad = tmp_path / "bad.bif"
    bad.write_text("network x {\n}\nvariable A {\n  type discrete [ 2 ] { a b };\n}\n")
    code, _, err = run(capsys, "convert", str(bad))
    assert code == 3 and "line" in err
    assert run(capsys, "convert", "alarm", str(tmp_path / "no" / "dir.fg"))[0] == 2


def test_solve_map_hand_checked(capsys, tiny_bif):
    code, out, _ = run(capsys, "solve", str(tiny_bif), "--hypothesis", "A", "--evidence", "B=on")
    assert code == 0
    kv = parse_kv(out)
    # Pr(A=yes, B=on) = 0.27 beats Pr(A=no, B=on) = 0.14
    assert kv["explanation"] == "A=yes"
    assert float(kv["score"]) == pytest.approx(0.27)
    assert kv["solver"] == "map"


def test_solve_on_fg_file_uses_ids(capsys, tiny_bif, tmp_path):
    fg = tmp_path / "tiny.fg"
    run(capsys, "convert", str(tiny_bif), str(fg))
    code, out, _ = run(capsys, "solve", str(fg), "--hypothesis", "0", "--evidence", "1=0")
    assert code == 0 and parse_kv(out)["explanation"] == "v0=0"


def test_solve_exit_codes(capsys, tiny_bif, tmp_path):
    assert run(capsys, "solve", str(tiny_bif), "--hypothesis", "Z")[0] == 4
    assert run(capsys, "solve", str(tiny_bif), "--hypothesis", "A", "--evidence", "B")[0] == 2
    assert run(capsys, "solve", str(tiny_bif), "--hypothesis", "A", "--solver", "mfe+")[0] == 2
    assert run(capsys, "solve", "hailfinder", "--hypothesis", "roots", "--cell-budget", "10")[0] == 5
    bad = tmp_path / "bad.fg"
    bad.write_text("one\n")
    assert run(capsys, "solve", str(bad), "--hypothesis", "0")[0] == 3
    with pytest.raises(SystemExit) as exc:
        cli.main(["solve", str(tiny_bif)])
    assert exc.value.code == 2


def test_relevance_and_mfe_plus(capsys, tmp_path):
    table = tmp_path / "alarm.rel"
    code, _, _ = run(capsys, "relevance", "alarm", "--patch-determinism", "--hypothesis", "natural",
                     "--evidence-vars", "natural", "--samples", "20", "--out", str(table))
    assert code == 0
    t = read_table(table.read_text())
    assert len(t.estimates) == 13 and t.low_budget
    base = ["solve", "alarm", "--patch-determinism", "--hypothesis", "natural", "--evidence", ALARM_EVIDENCE,
            "--table", str(table)]
    code, out, _ = run(capsys, *base, "--solver", "mfe+a", "--seed", "4")
    kv = parse_kv(out)
    assert code == 0 and kv["meta.inner"] == "anneal" and "steps_per_temperature" in kv["meta.schedule"]
    code2, out2, _ = run(capsys, *base, "--solver", "mfe+a", "--seed", "4")
    strip = lambda o: {k: v for k, v in parse_kv(o).items() if "time" not in k}
    assert strip(out2) == strip(out)
    # the table belongs to the patched network
    code, _, err = run(capsys, "solve", "alarm", "--hypothesis", "natural", "--evidence", ALARM_EVIDENCE,
                       "--table", str(table), "--solver", "mfe+")
    assert code == 4 and "network" in err


def test_relevance_usage_errors(capsys):
    assert run(capsys, "relevance", "alarm", "--hypothesis", "natural")[0] == 2
    with pytest.raises(SystemExit):
        cli.main(["relevance", "alarm", "--evidence-vars", "natural"])


def test_bench_inline_and_protocol(capsys, tmp_path):
    out = tmp_path / "run.csv"
    code, text, _ = run(capsys, "bench", "--network", "asia", "--hypothesis", "roots", "--evidence", "leaves",
                        "--draws", "2", "--repetitions", "1", "--solvers", "map", "--out", str(out))
    assert code == 0 and "map" in text
    rows = list(csv.DictReader(out.open()))
    assert all(r["hamming"] == "0" and r["ratio"] == "1.0" and r["rank"] == "1" for r in rows)
    assert (tmp_path / "run.summary.csv").exists()
    proto = tmp_path / "p.protocol"
    proto.write_text("network = asia\nhypothesis = roots\nevidence = leaves\ndraws = 2\nrepetitions = 1\n"
                     "solvers = map, ann, mfe\nseed = 3\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(capsys, "bench", "--protocol", str(proto), "--out", str(a))
    run(capsys, "bench", "--protocol", str(proto), "--out", str(b))
    drop_time = lambda p: [{k: v for k, v in r.items() if k != "wall_time_s" and k != "meta"} for r in csv.DictReader(p.open())]
    assert drop_time(a) == drop_time(b)


def test_bench_errors_and_listing(capsys):
    code, out, _ = run(capsys, "bench", "--list-protocols")
    assert code == 0 and "alarm-paper" in out
    assert run(capsys, "bench")[0] == 2
    assert run(capsys, "bench", "--protocol", "nope")[0] == 2
    assert run(capsys, "bench", "--network", "asia", "--draws", "0")[0] == 4


@pytest.mark.parametrize("sub, flags", [
    ("convert", ["--patch-determinism", "--epsilon"]),
    ("solve", ["--threshold", "--cell-budget", "--log-space", "--epsilon", "--initial-temperature",
               "--cooling-rate", "--steps-per-temperature", "--min-temperature", "--restarts", "--n-samples"]),
    ("bench", ["--evidence-dist", "--epsilon", "--threshold", "--cell-budget", "--log-space", "--jobs",
               "--strict-timing", "--initial-temperature", "--cooling-rate", "--restarts"]),
    ("relevance", ["--samples", "--seed", "--out", "--hypothesis", "--evidence-vars"]),
])
def test_help_documents_flags(capsys, sub, flags):
    with pytest.raises(SystemExit):
        cli.main([sub, "--help"])
    text = capsys.readouterr().out
    for f in flags:
        assert f in text


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "frugalmap", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "frugalmap" in proc.stdout
