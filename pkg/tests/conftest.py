import numpy as np
import pytest

from partalign import partnet as pn

TINY_BACKBONE = dict(input_hw=(12, 6), channels=(4, 6), strides=(1, 2))


@pytest.fixture
def tiny_backbone():
    return pn.BackboneConfig(**TINY_BACKBONE)


def tiny_model(head="partnet", parts=2, width=8, seed=0, **kw):
    backbone = pn.BackboneConfig(**TINY_BACKBONE)
    return pn.build_model(backbone, pn.PartNetConfig(head=head, parts=parts, width=width, **kw), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
