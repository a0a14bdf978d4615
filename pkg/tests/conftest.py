import numpy as np
import pytest

from imexpeer import methods


@pytest.fixture(params=methods.BUILTIN_NAMES)
def builtin_tab(request):
    return methods.builtin(request.param)


@pytest.fixture
def peer2s():
    return methods.builtin("imex-peer2s")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
