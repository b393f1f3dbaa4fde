import io

import numpy as np
import pytest

from frugalmap import relevance as R
from frugalmap.errors import ParseError, StaleTableError, ValidationError
from frugalmap.model import network_from_tables, patch_determinism, to_factor_graph
from frugalmap.query import MapQuery

from conftest import random_query, small_net


def dsep_net():
    # H -> E, C isolated from H given everything else
    return network_from_tables([
        ("H", ("0", "1"), (), [0.4, 0.6]),
        ("E", ("0", "1"), ("H",), [[0.8, 0.2], [0.3, 0.7]]),
        ("C", ("0", "1", "2"), (), [0.2, 0.3, 0.5]),
        ("D", ("0", "1"), ("C",), [[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]]),
    ])


def switch_net():
    # S deterministically picks which state of H is most probable
    return network_from_tables([
        ("S", ("0", "1"), (), [0.5, 0.5]),
        ("H", ("0", "1", "2"), ("S",), [[0.8, 0.1, 0.1], [0.1, 0.1, 0.8]]),
        ("A", ("0", "1"), (), [0.5, 0.5]),
        ("B", ("0", "1"), ("A",), [[0.5, 0.5], [0.4, 0.6]]),
        ("E", ("0", "1"), ("B",), [[0.7, 0.3], [0.2, 0.8]]),
        ("F", ("0", "1"), ("H",), [[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]),
    ])


def test_dseparated_variable_never_flips():
    fg = to_factor_graph(dsep_net())
    q = MapQuery((0,), {1: 0}, 4)
    for seed in range(5):
        assert R.estimate_relevance(fg, q, 2, 200, seed=seed).flips == 0
    assert R.exact_relevance(fg, q, 2) == 0.0


def test_decisive_variable_always_flips():
    fg = to_factor_graph(switch_net())
    q = MapQuery((1,), {4: 1}, 6)
    assert R.exact_relevance(fg, q, 0) == 1.0
    assert R.estimate_relevance(fg, q, 0, 300, seed=1).relevance == 1.0
    assert R.exact_relevance(fg, q, 2) == 0.0


def test_estimate_validation():
    fg = to_factor_graph(dsep_net())
    q = MapQuery((0,), {1: 0}, 4)
    with pytest.raises(ValidationError):
        R.estimate_relevance(fg, q, 0, 10)
    with pytest.raises(ValidationError):
        R.estimate_relevance(fg, q, 2, 0)
    with pytest.raises(ValidationError):
        R.RelevanceEstimate(0, 3, 4)


def test_estimate_deterministic():
    net = small_net(3, n_vars=9)
    fg = to_factor_graph(net)
    q = random_query(net, 3, n_hyp=2, n_ev=2)
    t = q.intermediates[0]
    assert R.estimate_relevance(fg, q, t, 100, seed=9) == R.estimate_relevance(fg, q, t, 100, seed=9)


@pytest.mark.parametrize("seed", range(8))
def test_direct_and_eliminate_agree(seed):
    net = small_net(200 + seed, n_vars=10)
    fg = to_factor_graph(net)
    q = random_query(net, seed, n_hyp=4)
    rng = np.random.default_rng(seed)
    rows = np.zeros((64, fg.n_vars), dtype=np.int64)
    for v in range(fg.n_vars):
        rows[:, v] = rng.integers(fg.cards[v], size=64)
    direct = R.argmax_hypotheses(fg, q.hypothesis, rows, method="direct")
    elim = R.argmax_hypotheses(fg, q.hypothesis, rows, method="eliminate")
    np.testing.assert_array_equal(direct, elim)


def test_argmax_backends_agree():
    net = small_net(17, n_vars=10)
    fg = to_factor_graph(net)
    q = random_query(net, 1, n_hyp=3)
    rows = np.random.default_rng(0).integers(0, 2, size=(50, fg.n_vars))
    a = R.argmax_hypotheses(fg, q.hypothesis, rows, method="direct", backend="numpy")
    b = R.argmax_hypotheses(fg, q.hypothesis, rows, method="direct")
    np.testing.assert_array_equal(a, b)


def test_argmax_ties_go_low():
    net = network_from_tables([
        ("H", ("0", "1"), (), [0.5, 0.5]),
        ("G", ("0", "1"), (), [0.5, 0.5]),
        ("X", ("0", "1"), ("H", "G"), [[0.3, 0.7], [0.3, 0.7], [0.3, 0.7], [0.3, 0.7]]),
    ])
    fg = to_factor_graph(net)
    rows = np.zeros((1, 3), dtype=np.int64)
    for method in ("direct", "eliminate"):
        assert R.argmax_hypotheses(fg, [0, 1], rows, method=method)[0] == 0


def test_sampled_close_to_exact():
    net = small_net(31, n_vars=9, max_card=3)
    fg = to_factor_graph(net)
    q = random_query(net, 31, n_hyp=2, n_ev=2)
    for t in q.intermediates:
        exact = R.exact_relevance(fg, q, t)
        est = R.estimate_relevance(fg, q, t, 1000, seed=t).relevance
        assert abs(est - exact) <= 0.05


def test_table_covers_intermediates_and_round_trips():
    net = small_net(5, n_vars=9)
    fg = to_factor_graph(net)
    q = random_query(net, 5, n_hyp=2, n_ev=3)
    table = R.precompute_table(fg, q.hypothesis, q.evidence, 40, seed=3)
    assert table.variables == q.intermediates
    text = R.write_table(table)
    back = R.read_table(io.StringIO(text), fg)
    assert back == table
    assert R.write_table(back) == text
    ev_only = R.precompute_table(fg, q.hypothesis, tuple(q.evidence), 40, seed=3)
    assert ev_only.evidence_values is None
    assert R.read_table(R.write_table(ev_only)) == ev_only


def test_table_parallel_is_identical():
    net = small_net(6, n_vars=10)
    fg = to_factor_graph(net)
    q = random_query(net, 6, n_hyp=2, n_ev=3)
    a = R.precompute_table(fg, q.hypothesis, tuple(q.evidence), 30, seed=1)
    b = R.precompute_table(fg, q.hypothesis, tuple(q.evidence), 30, seed=1, jobs=3)
    assert a == b


def test_empty_table():
    net = small_net(0, n_vars=4)
    fg = to_factor_graph(net)
    table = R.precompute_table(fg, (0, 1), {2: 0, 3: 0}, 10)
    assert table.estimates == ()
    assert R.read_table(R.write_table(table)) == table


def test_low_budget_flag():
    net = small_net(4, n_vars=6)
    fg = to_factor_graph(net)
    table = R.precompute_table(fg, (0,), (5,), 10)
    assert table.low_budget
    assert all(e.samples == 10 for e in table.estimates)
    assert "low_budget 1" in R.write_table(table)


def test_stale_table_refused(alarm, alarm_fg):
    table = R.precompute_table(alarm_fg, (3,), (0, 1), 2, seed=0)
    patched = to_factor_graph(patch_determinism(alarm))
    with pytest.raises(StaleTableError):
        R.read_table(R.write_table(table), patched)


@pytest.mark.parametrize("mangle", [
    lambda t: t.replace("# frugalmap", "# other"),
    lambda t: t.replace("samples 12", "samples x"),
    lambda t: t + "junk\n",
    lambda t: "\n".join(t.splitlines()[:-1]) + "\n",
    lambda t: t.replace("seed 0", "seeds 0"),
])
def test_read_table_errors(mangle):
    net = small_net(8, n_vars=6)
    fg = to_factor_graph(net)
    text = R.write_table(R.precompute_table(fg, (0,), (5,), 12))
    with pytest.raises(ParseError):
        R.read_table(mangle(text))


def test_partition_threshold_semantics():
    net = small_net(9, n_vars=9)
    fg = to_factor_graph(net)
    q = random_query(net, 9, n_hyp=2, n_ev=2)
    table = R.precompute_table(fg, q.hypothesis, q.evidence, 50, seed=0)
    p0 = R.partition_from_table(table, q, 0.0)
    assert p0.irrelevant == () and p0.relevant == q.intermediates
    sizes = [len(R.partition_from_table(table, q, th).relevant) for th in np.linspace(0, 1, 11)]
    assert sizes == sorted(sizes, reverse=True)
    p1 = R.partition_from_table(table, q, 1.0)
    for e in table.estimates:
        assert (e.variable in p1.irrelevant) == (e.relevance < 1)
    with pytest.raises(ValidationError):
        R.partition_from_table(table, q, 1.5)
    other = MapQuery(q.hypothesis[:1], q.evidence, q.n_vars)
    with pytest.raises(ValidationError):
        R.partition_from_table(table, other, 0.1)


def test_on_the_fly_inclusion_rate():
    # relevance of S is exactly 1/2: it flips the argmax only when A = 1
    net = network_from_tables([
        ("S", ("0", "1"), (), [0.5, 0.5]),
        ("A", ("0", "1"), (), [0.5, 0.5]),
        ("H", ("0", "1"), ("S", "A"), [[0.8, 0.2], [0.7, 0.3], [0.6, 0.4], [0.3, 0.7]]),
        ("E", ("0", "1"), ("H",), [[0.5, 0.5], [0.5, 0.5]]),
    ])
    fg = to_factor_graph(net)
    q = MapQuery((2,), {3: 0}, 4)
    assert R.exact_relevance(fg, q, 0) == 0.5
    hits = sum(0 in R.on_the_fly_partition(fg, q, seed=s).relevant for s in range(1000))
    assert abs(hits / 1000 - 0.875) <= 0.03


def test_on_the_fly_zero_relevance_always_out():
    fg = to_factor_graph(dsep_net())
    q = MapQuery((0,), {1: 0}, 4)
    for s in range(20):
        assert 2 in R.on_the_fly_partition(fg, q, seed=s).irrelevant
