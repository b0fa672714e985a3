import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def tf_bank_matrix(R, K, rng):
    """Random R x K matrix with D D^T = I/R (orthonormal rows scaled)."""
    Q, _ = np.linalg.qr(rng.standard_normal((K, R)))
    return Q.T / np.sqrt(R)


def conv_matrix(x, shape, bc="circular"):
    """Psi_x built straight from the definition: column (i, j) holds the
    shifted image read through np.pad."""
    x = np.atleast_2d(np.asarray(x, float))
    rh, rw = shape
    ch, cw = (rh - 1) // 2, (rw - 1) // 2
    mode = "wrap" if bc == "circular" else "symmetric"
    xh = np.pad(x, ((rh - 1 - ch, ch), (rw - 1 - cw, cw)), mode=mode)
    H, W = x.shape
    cols = []
    for i in range(rh):
        for j in range(rw):
            cols.append(xh[rh - 1 - i:rh - 1 - i + H, rw - 1 - j:rw - 1 - j + W].ravel())
    return np.stack(cols, axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
