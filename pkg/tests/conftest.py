import hypothesis
import numpy as np
import pytest

from gesturechan.scatter_geom import RfConfig
from gesturechan.synthgen import GestureScript, animate

hypothesis.settings.register_profile("slow-ok", deadline=None)
hypothesis.settings.load_profile("slow-ok")


@pytest.fixture(scope="session")
def rf():
    return RfConfig()


@pytest.fixture(scope="session")
def short_seq():
    # 100 frames of the default two-arm raise, enough for motion to show
    return animate(GestureScript(duration_s=0.26, interval_s=0.0026))


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
