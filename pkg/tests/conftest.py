import numpy as np
import pytest

from fathom_sim.datagen import ClientDataset


def quad_clients(rng, m, nu, d, spread=1.0):
    """m quadratic clients with random centers and nu noisy targets each."""
    out = []
    for i in range(m):
        center = rng.standard_normal(d)
        out.append(ClientDataset(i, None, center + spread * rng.standard_normal((nu, d))))
    return out


def logit_client(rng, nu, p, n_classes, cid=0):
    feats = rng.standard_normal((nu, p))
    labels = rng.integers(0, n_classes, size=nu)
    return ClientDataset(cid, feats, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
