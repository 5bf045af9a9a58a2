import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cilab.cil import Hyper  # noqa: E402
from cilab.data import make_benchmark, make_split, make_synthetic  # noqa: E402
from cilab.nn import Schedule  # noqa: E402
from cilab.numeric import RngStream  # noqa: E402


def tiny_bench(seed=0, per_class=40, val=20, classes=6, base=3, steps=3, radius=4.0):
    data = make_synthetic(classes, 8, per_class, val, radius, RngStream(seed).derive("data"))
    split = make_split(classes, base, steps, (classes - base) // steps, RngStream(seed).derive("split"))
    return make_benchmark(data, split)


def tiny_hyper(**kw):
    base = dict(num_stages=3, width=12, feature_dim=6, layers_per_stage=1,
                base=Schedule(3, batch_size=32), incremental=Schedule(2, batch_size=32),
                exploit=Schedule(2, batch_size=32), exemplars_per_class=5, branch_stage=1)
    base.update(kw)
    return Hyper(**base)


@pytest.fixture
def bench():
    return tiny_bench()


@pytest.fixture
def hyper():
    return tiny_hyper()


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{n:2d} {'PASS' if ok else 'FAIL'}  {detail}")
