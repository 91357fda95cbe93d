import numpy as np
import pytest

from rlnst import autodiff as ad
from rlnst import losses, nets
from rlnst.rng import Rng


@pytest.fixture(autouse=True)
def _quiet_numpy():
    with np.errstate(all="ignore"):
        yield


@pytest.fixture(autouse=True)
def _fresh_tape():
    # keep the module-level tape from growing across tests
    with ad.tape():
        yield


@pytest.fixture(scope="session")
def model():
    return nets.build_model(seed=11)


@pytest.fixture(scope="session")
def video_model():
    return nets.build_model(seed=12, video=True)


def structured_pair(size=64):
    """Content with smooth ramps plus a block; style with dense sinusoids."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    content = np.stack([yy, xx, (yy + xx) / 2]).astype(np.float32)
    lo, hi = size // 3, size - size // 3
    content[:, lo:hi, lo:hi] = 0.8
    style = (0.5 + 0.5 * np.sin(np.stack([xx * 40, yy * 40, (xx + yy) * 30])))
    return content, style.astype(np.float32)


@pytest.fixture(scope="session")
def content_style_64():
    return structured_pair(64)


@pytest.fixture(scope="session")
def style_target(model, content_style_64):
    _, style = content_style_64
    return losses.StyleTarget.from_image(style, model.featnet)


@pytest.fixture()
def rng():
    return Rng(123)
