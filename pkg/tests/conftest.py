import numpy as np
import pytest

import bico
from bico.optim import BoxBounds


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_box():
    return BoxBounds([0.0], [1.0])


def make_dataset(rng, n, d_sol=1, d_par=1, fn=None, lo=0.0, hi=100.0, noise=0.0):
    """Random joint dataset; fn maps joint row -> value (default smooth)."""
    if fn is None:
        fn = lambda row: float(np.sin(row[0] / 10.0) * np.cos(row[-1] / 15.0))
    d = bico.SimulationDataset(d_sol, d_par)
    rows = rng.uniform(lo, hi, size=(n, d_sol + d_par))
    for row in rows:
        val = fn(row) + noise * rng.standard_normal()
        d.append(bico.JointPoint(row[:d_sol], row[d_sol:]), val)
    return d
