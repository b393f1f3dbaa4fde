import csv
import io
import math

import numpy as np
import pytest

from frugalmap import bench as B
from frugalmap.engine import brute_force_joint, eliminate
from frugalmap.errors import ParseError, ResourceError, ValidationError
from frugalmap.model import network_from_tables, read_network, to_factor_graph
from frugalmap.query import MapQuery

from conftest import random_query, small_net

SMALL = """\
# tiny end-to-end run
network = asia
hypothesis = roots
evidence = leaves
draws = 2
repetitions = 2
solvers = map, ann, mfe, mfe+, mfe+a
seed = 7
relevance_samples = 20
"""


@pytest.fixture(scope="module")
def small_run():
    p = B.parse_protocol(SMALL, "tiny")
    return p, B.run_protocol(p)


def test_parse_protocol_fields():
    p = B.parse_protocol(SMALL, "tiny")
    assert p.network == "asia" and p.draws == 2 and p.solvers == ("map", "ann", "mfe", "mfe+", "mfe+a")
    assert p.name == "tiny" and p.threshold == 0.1
    assert p.schedule(4).steps_per_temperature == 40
    q = B.parse_protocol(SMALL + "cooling_rate = 0.5\nlog_space = on\ncell_budget = 5e7\n")
    assert q.schedule(2).cooling_rate == 0.5 and q.log_space is True and q.cell_budget == 50_000_000


@pytest.mark.parametrize("text", [
    "draws = 3\n",
    SMALL + "bogus = 1\n",
    SMALL + "draws = 4\n",
    SMALL.replace("draws = 2", "draws two"),
    SMALL.replace("draws = 2", "draws = x"),
])
def test_parse_protocol_errors(text):
    with pytest.raises(ParseError):
        B.parse_protocol(text)


@pytest.mark.parametrize("text", [
    SMALL.replace("draws = 2", "draws = 0"),
    SMALL.replace("map, ann", "map, magic"),
    SMALL + "threshold = 2\n",
    SMALL + "evidence_dist = other\n",
])
def test_protocol_validation(text):
    with pytest.raises(ValidationError):
        B.parse_protocol(text)


def test_bundled_protocols_parse():
    names = B.bundled_protocols()
    assert {"alarm-paper", "hailfinder-5", "hailfinder-7", "hailfinder-10", "andes-paper", "barley-paper"} <= set(names)
    for n in names:
        p = B.load_protocol(n)
        assert p.draws == 10 and p.repetitions == 5
    assert B.load_protocol("barley-paper").relevance_samples == 10
    with pytest.raises(FileNotFoundError):
        B.load_protocol("no-such-protocol")


def test_resolve_variables(alarm):
    hyp = B.resolve_variables(alarm, "natural", "hypothesis")
    ev = B.resolve_variables(alarm, "natural", "evidence")
    assert len(hyp) == 8 and len(ev) == 16
    assert len(alarm) - len(hyp) - len(ev) == 13
    assert B.resolve_variables(alarm, "roots:3", "hypothesis") == tuple(alarm.roots[:3])
    assert B.resolve_variables(alarm, "leaves", "evidence") == tuple(alarm.leaves)
    assert B.resolve_variables(alarm, "CVP, 0", "evidence") == (alarm.resolve("CVP"), 0)
    with pytest.raises(ValidationError):
        B.resolve_variables(alarm, "roots:99", "hypothesis")
    with pytest.raises(ValidationError):
        B.resolve_variables(read_network("asia"), "natural", "hypothesis")


def test_draw_evidence_support_and_determinism(alarm):
    ev = B.resolve_variables(alarm, "natural", "evidence")
    a = B.draw_evidence(alarm, ev, 10, seed=3)
    assert a == B.draw_evidence(alarm, ev, 10, seed=3)
    fg = to_factor_graph(alarm)
    for e in a:
        assert set(e) == set(ev)
        assert eliminate(fg, e).total > 0
    u = B.draw_evidence(alarm, ev, 3, seed=3, dist="uniform")
    assert all(eliminate(fg, e).total > 0 for e in u)


def test_draw_evidence_deterministic_support():
    chain = network_from_tables([
        ("A", ("0", "1"), (), [1.0, 0.0]),
        ("B", ("0", "1", "2"), ("A",), [[0.0, 1.0, 0.0], [0.5, 0.0, 0.5]]),
    ])
    assert B.draw_evidence(chain, [1], 20, seed=0) == [{1: 1}] * 20
    assert B.draw_evidence(chain, [0], 1, seed=5) == [{0: 0}]


def test_hamming():
    assert B.hamming({0: 1, 1: 0}, {0: 1, 1: 0}) == 0
    assert B.hamming({i: 0 for i in range(5)}, {i: 1 for i in range(5)}) == 5
    with pytest.raises(ValidationError):
        B.hamming({0: 1}, {1: 1})


def test_ratio_and_rank_exact_and_uniform():
    net = network_from_tables([("A", ("a", "b"), (), [0.5, 0.5]), ("B", ("x", "y"), (), [0.5, 0.5])])
    fg = to_factor_graph(net)
    q = MapQuery((0, 1), {}, 2)
    for h in [(0, 0), (1, 1), (0, 1)]:
        assert B.ratio_and_rank(fg, q, dict(zip((0, 1), h))) == (1.0, 1)


@pytest.mark.parametrize("seed", range(10))
def test_rank_matches_sorted_enumeration(seed):
    net = small_net(500 + seed)
    fg = to_factor_graph(net)
    q = random_query(net, seed, n_hyp=3)
    joint = brute_force_joint(net, q.evidence, q.hypothesis).values
    flat = np.sort(joint.ravel())[::-1]
    best = joint.max()
    rng = np.random.default_rng(seed)
    for _ in range(5):
        h = tuple(int(rng.integers(c)) for c in joint.shape)
        ratio, rank = B.ratio_and_rank(fg, q, dict(zip(q.hypothesis, h)))
        v = joint[h]
        want_rank = 1 + int(np.sum(flat > v * (1 + 1e-9)))
        assert rank == want_rank
        assert ratio <= 1.0
        if rank > 1:
            assert ratio == pytest.approx(v / best, rel=1e-9)


def test_run_protocol_records(small_run):
    p, records = small_run
    assert len(records) == p.draws * p.repetitions * len(p.solvers)
    order = [(r.draw, r.rep, r.solver) for r in records]
    assert order == [(d, r, s) for d in range(2) for r in range(2) for s in p.solvers]
    for r in records:
        assert r.error is None
        assert 0 <= r.hamming <= 2 and r.rank >= 1 and r.ratio <= 1.0
        if r.solver == "map":
            assert (r.hamming, r.ratio, r.rank) == (0, 1.0, 1)
        assert r.meta["network_hash"]
    assert all("table_time" in r.meta for r in records if r.solver in ("mfe+", "mfe+a"))


def test_run_protocol_reproducible(small_run):
    p, records = small_run
    again = B.run_protocol(p)
    strip = lambda rs: [(r.solver, r.draw, r.rep, r.hamming, r.ratio, r.rank, r.explanation) for r in rs]
    assert strip(again) == strip(records)


def test_map_only_protocol_perfect():
    p = B.parse_protocol("network = asia\nhypothesis = roots\nevidence = leaves\ndraws = 3\nrepetitions = 1\nsolvers = map\n")
    rows = B.report(B.run_protocol(p))
    assert rows[0]["mean_hamming"] == 0 and rows[0]["mean_ratio"] == 1 and rows[0]["mean_rank"] == 1


def test_unscorable_records_keep_timings(monkeypatch):
    def too_big(*a, **k):
        raise ResourceError("joint too large", 10**12, 1)

    monkeypatch.setattr(B, "map_table", too_big)
    p = B.parse_protocol("network = asia\nhypothesis = roots\nevidence = leaves\ndraws = 1\nrepetitions = 1\n"
                         "solvers = map, ann\n")
    recs = B.run_protocol(p)
    for r in recs:
        assert r.error is None and r.wall_time > 0
        assert r.hamming is None and r.meta["unscored"].startswith("ResourceError")
    assert B.report(recs)[1]["scored"] == 0


def test_csv_layout(small_run, tmp_path):
    p, records = small_run
    net = read_network("asia")
    text = B.write_csv(records, names=[v.name for v in net.variables], states=[v.states for v in net.variables])
    assert text.splitlines()[0] == "network,solver,draw,rep,wall_time_s,hamming,ratio,rank,explanation,meta"
    assert "\r" not in text
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == len(records)
    assert all("=" in r["explanation"] for r in rows)


def test_report_single_and_means():
    rec = B.BenchRecord("n", "ann", 0, 0, 0.5, 2, 0.25, 3, {0: 1}, {})
    row = B.report([rec])[0]
    assert (row["mean_wall_time_s"], row["mean_hamming"], row["mean_ratio"], row["mean_rank"]) == (0.5, 2, 0.25, 3)
    assert row["std_wall_time_s"] == 0.0
    recs = [B.BenchRecord("n", "ann", i // 5, i % 5, float(i), i % 3, 1 / (1 + i), 1 + i % 4, {0: 0}, {}) for i in range(50)]
    row = B.report(recs)[0]
    assert row["mean_wall_time_s"] == pytest.approx(24.5)
    assert row["mean_hamming"] == pytest.approx(sum(i % 3 for i in range(50)) / 50)
    assert row["mean_rank"] == pytest.approx(sum(1 + i % 4 for i in range(50)) / 50)
    with pytest.raises(ValidationError):
        B.report([])


def test_summary_grid(small_run):
    p, records = small_run
    summary = B.report(records)
    assert [r["solver"] for r in summary] == list(p.solvers)
    text = B.format_summary(summary)
    assert len(text.splitlines()) == 2 + len(p.solvers)
    csv_text = B.write_summary_csv(summary)
    assert csv_text.splitlines()[0].split(",") == B.SUMMARY_HEADER


def test_failed_records_are_reported():
    recs = [B.BenchRecord("n", "map", 0, 0, math.nan, None, None, None, None, {}, "ResourceError: x")]
    row = B.report(recs)[0]
    assert row["failed"] == 1 and row["mean_wall_time_s"] is None
    assert "ResourceError" in B.write_csv(recs)


def test_memory_error_becomes_failed_record(monkeypatch):
    def boom(*a, **k):
        raise MemoryError("Unable to allocate")

    monkeypatch.setattr(B, "solve", boom)
    p = B.parse_protocol("network = asia\nhypothesis = roots\nevidence = leaves\ndraws = 1\nrepetitions = 1\nsolvers = ann\n")
    rec = B.run_protocol(p)[0]
    assert rec.error.startswith("MemoryError") and math.isnan(rec.wall_time)
