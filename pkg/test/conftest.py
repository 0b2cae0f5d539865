import numpy as np
import pytest

from dvrate.chain import FiniteChain, make_rng
from dvrate.config import RateOptions
from dvrate.convexset import Polytope


@pytest.fixture
def iid2():
    # 公平硬币, 两状态独立同分布
    return FiniteChain.from_matrix([[0.5, 0.5], [0.5, 0.5]])


@pytest.fixture
def two_state():
    return FiniteChain.from_matrix([[0.7, 0.3], [0.6, 0.4]])


@pytest.fixture
def excursion_chain():
    return FiniteChain.from_matrix([[0.0, 0.5, 0.5], [0.5, 0.5, 0.0], [1.0, 0.0, 0.0]])


@pytest.fixture
def identity3():
    return FiniteChain.from_matrix(np.eye(3))


@pytest.fixture
def heads_heavy():
    """{mu : mu(0) >= 3/4} over two states."""
    return Polytope.from_halfspaces(2, [([-1.0, 0.0], -0.75)])


@pytest.fixture
def opts():
    return RateOptions()


@pytest.fixture
def rng():
    return make_rng(20240607)
