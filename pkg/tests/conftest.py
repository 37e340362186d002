import numpy as np
import pytest

from ditfuse import _kernels_py

try:
    from ditfuse import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = [pytest.param(_kernels_py, id="python")]
if _ckernels is not None:
    BACKENDS.append(pytest.param(_ckernels, id="cython"))


@pytest.fixture(params=BACKENDS)
def impl(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(rng, size=32):
    """Low-frequency RGB image in [0, 1] that still has some texture."""
    coarse = rng.random((size // 8 + 1, size // 8 + 1, 3))
    ys = np.linspace(0, coarse.shape[0] - 1, size)
    xs = np.linspace(0, coarse.shape[1] - 1, size)
    y0 = np.floor(ys).astype(int).clip(0, coarse.shape[0] - 2)
    x0 = np.floor(xs).astype(int).clip(0, coarse.shape[1] - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c = coarse
    img = (
        c[y0][:, x0] * (1 - fy) * (1 - fx)
        + c[y0 + 1][:, x0] * fy * (1 - fx)
        + c[y0][:, x0 + 1] * (1 - fy) * fx
        + c[y0 + 1][:, x0 + 1] * fy * fx
    )
    return np.clip(img + 0.05 * rng.standard_normal(img.shape), 0.0, 1.0)


# criterion key -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
