import numpy as np
import pytest

from inducing_weights.linalg import RngStream


@pytest.fixture
def rng():
    return RngStream(1234)


def random_spd(rng: RngStream, n: int, jitter: float = 0.5) -> np.ndarray:
    a = rng.normal((n, n))
    return a @ a.T + jitter * np.eye(n)


def moment_z(samples: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> tuple[float, float]:
    """Worst |z| of the sample mean and sample covariance against exact moments.

    ``samples`` is ``(n, dim)``; standard errors use Gaussian fourth moments.
    """
    n = samples.shape[0]
    m_hat = samples.mean(axis=0)
    c = samples - mean
    c_hat = c.T @ c / n - np.outer(m_hat - mean, m_hat - mean)
    var = np.diag(cov)
    z_m = np.abs(m_hat - mean) / np.sqrt(var / n)
    se = np.sqrt((np.outer(var, var) + cov * cov) / n)
    z_c = np.abs(c_hat - cov) / np.where(se > 0, se, 1.0)
    return float(z_m.max()), float(z_c.max())


# per-criterion results, filled in by test_acceptance.py: n -> [(ok, detail), ...]
ACCEPTANCE: dict[int, list] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}: " + "; ".join(d for _, d in parts))
