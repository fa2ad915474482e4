from __future__ import annotations

import numpy as np
import pytest

from sleeptransfer import autodiff


@pytest.fixture(autouse=True)
def _float64_default():
    """Run tests in float64 so finite-difference checks are meaningful;
    tests that exercise the float32 training path switch back explicitly."""
    autodiff.set_default_dtype(np.float64)
    yield
    autodiff.set_default_dtype(np.float32)
    autodiff.set_check_finite(False)
