import pytest

from knnattn.bench import warmup_kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_jit():
    # compile the jit kernels once so individual tests never pay for it
    warmup_kernels()
