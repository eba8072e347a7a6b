import numpy as np
import pytest

from pmsacl.medmix import AugConfig
from pmsacl.numerics import RngStream


@pytest.fixture
def rng():
    return RngStream(1234, "test")


@pytest.fixture
def aug_cfg():
    return AugConfig().validate()


@pytest.fixture
def small_images(rng):
    return [(f"img{i}", rng.child("img", i).uniform((64, 64, 3)).astype(np.float32)) for i in range(4)]
