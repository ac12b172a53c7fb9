import pytest

from selfaffine.linalg import make_system
from selfaffine.pseudo_norm import build_pseudo_norm


@pytest.fixture(scope="session")
def cantor():
    return make_system([[3]], [[0], [2]])


@pytest.fixture(scope="session")
def interval():
    return make_system([[2]], [[0], [1]])


@pytest.fixture(scope="session")
def collision():
    return make_system([[3]], [[0], [1], [3]])


@pytest.fixture(scope="session")
def product():
    return make_system([[2, 0], [0, 3]], [[x, y] for y in range(3) for x in range(2)])


@pytest.fixture(scope="session")
def twin_dragon():
    return make_system([[1, -1], [1, 1]], [[0, 0], [1, 0]])


@pytest.fixture(scope="session")
def product_mollified(product):
    return build_pseudo_norm(product, "mollified", delta=0.25)
