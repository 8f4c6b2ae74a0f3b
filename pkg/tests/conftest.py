import numpy as np
import pytest

from lsprox import unet


@pytest.fixture
def toy_net():
    params = unet.build(unet.UNetConfig(depth=1, base_channels=2, seed=3))
    # move BN running stats off their defaults so eval mode is non-trivial
    rng = np.random.default_rng(0)
    for st in params.bn.values():
        st.mean = rng.normal(0, 0.1, st.mean.shape)
        st.var = rng.uniform(0.5, 1.5, st.var.shape)
    return params


@pytest.fixture
def toy_frames():
    return np.random.default_rng(1).uniform(0, 1, (2, 1, 8, 8))
