import numpy as np
import pytest

from tendonfusion.synthgen import SynthConfig, generate


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    """Three patients, three studies each, a handful of reduced-deep slices."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = SynthConfig(n_patients=3, studies_per_patient=3, slices_min=3, slices_max=5,
                      image_size=48, deep_dim=200, seed=11)
    return generate(cfg, root)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
