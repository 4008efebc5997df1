import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from zootune.backbone import BackboneConfig, build_plain_backbone

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest backbone that still has a strided stage with a 1x1 shortcut."""
    return BackboneConfig(in_channels=3, stem_channels=4, stages=((1, 4), (1, 6)), classes=3, side=6)


@pytest.fixture
def tiny_zoo(tiny_config):
    return [build_plain_backbone(tiny_config, seed, np.float64).state(include_head=False) for seed in (11, 12, 13)]



def color_task(n_per_class, side, seed, classes=3):
    """Class ``c`` brightens channel ``c``; easy enough for a few hundred steps."""
    from zootune.data import Dataset

    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    images = r.random((len(labels), 3, side, side)) * 0.5
    images[np.arange(len(labels)), labels % 3] += 0.5
    return Dataset(images, labels, classes)


@pytest.fixture
def tiny_task():
    return color_task(8, 6, seed=5)


# one line per acceptance criterion, printed after the run by the hook below
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
