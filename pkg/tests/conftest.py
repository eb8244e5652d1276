import pytest

from kolmolab.field_core import GridSpec


@pytest.fixture
def grid1():
    return GridSpec(1, 4.0, 129)


@pytest.fixture
def grid2():
    return GridSpec(2, 3.0, 61)
