import numpy as np
import pytest

from predcode.ops import FilterBank


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_bank(rng, q=3, c=2, f=3):
    return FilterBank(rng.standard_normal((q, c, f, f)))


def direct_synthesize(filters, states):
    """Loop oracle: ``out[n,c,y,x] = sum_q sum_ab s[n,q,y+a-p,x+b-p] * D[q,c,a,b]``."""
    q, c, f, _ = filters.shape
    p = f // 2
    n, _, h, w = states.shape
    out = np.zeros((n, c, h, w))
    for y in range(h):
        for x in range(w):
            for a in range(f):
                for b in range(f):
                    sy, sx = y + a - p, x + b - p
                    if 0 <= sy < h and 0 <= sx < w:
                        out[:, :, y, x] += states[:, :, sy, sx] @ filters[:, :, a, b]
    return out


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
