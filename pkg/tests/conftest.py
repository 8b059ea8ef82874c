import numpy as np
import pytest

from glarekit.gsf import GsfParams, rasterize_kernel

# Glare model used throughout the synthetic tests.
P_STAR = GsfParams(0.9, 0.004, 0.3, 0.9)


def spatial_glare(img, kernel):
    """Direct zero-boundary convolution, one output pixel at a time."""
    h, w = img.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for sy in range(h):
                for sx in range(w):
                    acc += img[sy, sx] * kernel.at_offset(y - sy, x - sx)
            out[y, x] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def kernel64():
    return rasterize_kernel(P_STAR, 64, 64)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
