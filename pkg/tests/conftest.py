import numpy as np
import pytest

from derreserve.feeder import builtin_modified_ieee34, parse_feeder


@pytest.fixture(scope="session")
def ieee34():
    return builtin_modified_ieee34()


TWO_NODE = """
[system]
source s
source_pu 1.0
[nodes]
s 24.9 abc
r 24.9 abc
[configs]
z3 z 0.1+0.1j 0 0 0.1+0.1j 0 0.1+0.1j
[branches]
s r 1 mi z3
[loads]
r - Y PQ {p} 0 0 0 0 0
"""


def two_node(p_kw=100.0):
    return parse_feeder(TWO_NODE.format(p=p_kw), "two-node")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import CRITERION_LINES
    except ImportError:
        return
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES.values():
            terminalreporter.write_line(line)
