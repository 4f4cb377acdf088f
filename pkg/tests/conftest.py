import sys

import numpy as np
import pytest

from facemask.dataset import ImageBuffer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, w, h, c=3):
    return ImageBuffer(rng.integers(0, 256, size=(h, w, c), dtype=np.uint8))


@pytest.fixture
def make_image(rng):
    def make(w=8, h=6, c=3):
        return random_image(rng, w, h, c)

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
