import random

import numpy as np
import pytest
from hypothesis import settings

from mcmfhe.rns import CkksParams, generate_basis

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def schoolbook_negacyclic(a, b, q):
    """O(N^2) product in Z_q[X]/(X^N + 1)."""
    n = len(a)
    out = [0] * n
    for i, x in enumerate(a):
        if not x:
            continue
        for j, y in enumerate(b):
            k = i + j
            if k < n:
                out[k] = (out[k] + x * y) % q
            else:
                out[k - n] = (out[k - n] - x * y) % q
    return out


def direct_ntt(x, q, psi):
    """``y[j] = sum_i x[i] psi^(i(2j+1))`` evaluated with Python integers."""
    n = len(x)
    return [sum(int(v) * pow(psi, i * (2 * j + 1), q) for i, v in enumerate(x)) % q for j in range(n)]


@pytest.fixture(scope="session")
def basis_small():
    return generate_basis(CkksParams(2**8, 6, 3), seed=7)


@pytest.fixture(scope="session")
def basis_4k():
    return generate_basis(CkksParams(2**12, 3, 1), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pyrng():
    return random.Random(1234)
