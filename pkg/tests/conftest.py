import numpy as np
import pytest

from signgd_attn.datagen import DataConfig, generate_dataset, supports_disjoint
from signgd_attn.transformer import ModelConfig, init_params

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def small_problem(d=40, s=4, n=3, L=2, m_k=2, m_v=2, sigma_p=1.0, sigma_0=0.3, seed=0, orthogonal=True):
    data = DataConfig(d=d, s=s, n=n, L=L, sigma_p=sigma_p, orthogonal=orthogonal, seed=seed)
    model = ModelConfig(d=d, m_k=m_k, m_v=m_v, L=L, sigma_0=sigma_0, init_seed=seed + 1000)
    return generate_dataset(data), init_params(model), model


def disjoint_problem(d=2000, s=10, n=4, m_k=3, m_v=2):
    """A setting where noise supports are pairwise disjoint (first such seed)."""
    for seed in range(100):
        data = DataConfig(d=d, s=s, n=n, sigma_p=2 / np.sqrt(s), seed=seed)
        ds = generate_dataset(data)
        if supports_disjoint(ds):
            model = ModelConfig(d=d, m_k=m_k, m_v=m_v, sigma_0=0.1 / np.sqrt(d), init_seed=seed)
            return ds, init_params(model), model
    raise RuntimeError("no disjoint seed found")


@pytest.fixture
def small():
    return small_problem()


@pytest.fixture(scope="session")
def row_a_data():
    return generate_dataset(DataConfig.row_a(seed=0))


@pytest.fixture(scope="session")
def row_a_params():
    return init_params(ModelConfig.row_a(init_seed=0))


def random_gradcheck_problem(k: int):
    """Config ``k`` of the randomized gradient-check suite: d <= 50, n <= 4, m_k <= 3, m_v <= 2, L in {2, 4}."""
    rng = np.random.default_rng([2024, k])
    d = int(rng.integers(5, 51))
    return small_problem(
        d=d,
        s=int(rng.integers(1, d)),
        n=int(rng.integers(1, 5)),
        L=int(rng.choice([2, 4])),
        m_k=int(rng.integers(1, 4)),
        m_v=int(rng.integers(1, 3)),
        sigma_p=float(rng.uniform(0.3, 1.5)),
        sigma_0=float(rng.uniform(0.1, 1.0)),
        seed=k,
    )
