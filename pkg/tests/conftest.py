import numpy as np
import pytest

from xdistill import autodiff as ad
from xdistill import nn


def central_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar function ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def assert_rel_close(a, b, rtol=1e-3, atol=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(b).max(initial=0.0), atol)
    err = np.abs(a - b).max(initial=0.0)
    assert err <= rtol * scale, f"max abs error {err:.3e} vs scale {scale:.3e}"


def param_fd(net, loss_fn, h=1e-4):
    """Finite-difference gradients of ``loss_fn(net)`` for every parameter of ``net``."""
    out = []
    for p in net.parameters():
        def f(v, p=p):
            saved = p.data
            p.data = v.reshape(saved.shape)
            try:
                return float(loss_fn(net))
            finally:
                p.data = saved
        out.append(central_diff(f, p.data.copy(), h))
    return out


def bias_free_mlp(rng, sizes, dtype=np.float64):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Dense(a, b, bias=False, rng=rng, dtype=dtype))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Network(layers, (sizes[0],), sizes[-1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cnn():
    spec = nn.cnn_spec((3, 4), hidden=(6,))
    return nn.build_network(spec, (2, 8, 8), 3, seed=5, dtype=np.float64)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
