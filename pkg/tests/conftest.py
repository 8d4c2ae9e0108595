import numpy as np
import pytest

from otgmm.models import Dataset


@pytest.fixture
def mean_data():
    return Dataset(np.array([[1.0], [2.0], [3.0]]), ("x",))


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def make_dataset(values, columns=None):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[0] == 1 and values.shape[1] > 1:
        values = values.T
    if columns is None:
        columns = tuple(f"c{i}" for i in range(values.shape[1]))
    return Dataset(values, columns)
