import numpy as np
import pytest

from frugalmap.model import network_from_tables, random_network, read_network, to_factor_graph
from frugalmap.query import MapQuery


def small_net(seed, n_vars=8, max_card=4, max_parents=3, max_states=None):
    rng = np.random.default_rng(seed)
    return random_network(rng, n_vars, max_card=max_card, max_parents=max_parents, max_states=max_states)


def random_query(net, seed, n_hyp=None, n_ev=None):
    """Random (H, e) split with evidence drawn from the prior so Pr(e) > 0."""
    from frugalmap.model import forward_sample

    rng = np.random.default_rng(seed)
    n = len(net)
    perm = rng.permutation(n)
    n_hyp = n_hyp or int(rng.integers(1, min(4, n) + 1))
    n_ev = int(rng.integers(0, n - n_hyp + 1)) if n_ev is None else n_ev
    hyp = tuple(int(v) for v in perm[:n_hyp])
    ev_vars = [int(v) for v in perm[n_hyp:n_hyp + n_ev]]
    row = forward_sample(to_factor_graph(net), rng, 1)[0]
    return MapQuery(hyp, {v: int(row[v]) for v in ev_vars}, n)


@pytest.fixture(scope="session")
def alarm():
    return read_network("alarm")


@pytest.fixture(scope="session")
def alarm_fg(alarm):
    return to_factor_graph(alarm)


@pytest.fixture
def two_node():
    return network_from_tables([
        ("A", ("a0", "a1"), (), [0.3, 0.7]),
        ("B", ("b0", "b1"), ("A",), [[0.9, 0.1], [0.2, 0.8]]),
    ])


TWO_NODE_BIF = """\
network tiny {
}
variable A {
  type discrete [ 2 ] { yes, no };
}
variable B {
  type discrete [ 2 ] { on, off };
}
probability ( A ) {
  table 0.3, 0.7;
}
probability ( B | A ) {
  (yes) 0.9, 0.1;
  (no) 0.2, 0.8;
}
"""


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
