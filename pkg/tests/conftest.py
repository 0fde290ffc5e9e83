import zlib

import numpy as np
import pytest

from lvt import _backend


@pytest.fixture
def rng(request):
    # distinct but fixed stream per test
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))


@pytest.fixture(params=_backend.BACKENDS if _backend.HAVE_NUMBA else ("numpy",))
def backend(request):
    with _backend.use_backend(request.param):
        yield request.param
