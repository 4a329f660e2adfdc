import itertools
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pulmoreg.image import Image3D

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_image(rng, dims=(6, 7, 5), spacing=(1.0, 1.5, 2.0), origin=(0.5, -1.0, 2.0), scale=100.0):
    return Image3D(rng.normal(scale=scale, size=dims), spacing, origin)


def central_differences(f, x, h):
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def blur_oracle(v, sigma=1.0):
    """Separable Gaussian blur (sigma in voxels) by explicit loops, edge values replicated."""
    r = int(np.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    out = v.astype(float)
    for a in range(3):
        pad = [(0, 0)] * 3
        pad[a] = (r, r)
        p = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for n, w in enumerate(k):
            sl = [slice(None)] * 3
            sl[a] = slice(n, n + out.shape[a])
            acc += w * p[tuple(sl)]
        out = acc
    return out


def dense_laplacian(dims, h):
    """Loop-built Laplacian matrix; second differences vanish at each axis's end nodes."""
    n = int(np.prod(dims))
    L = np.zeros((n, n))
    flat = lambda i: np.ravel_multi_index(i, dims)  # noqa: E731
    for idx in itertools.product(*[range(d) for d in dims]):
        row = flat(idx)
        for a in range(3):
            if 0 < idx[a] < dims[a] - 1:
                lo, hi = list(idx), list(idx)
                lo[a] -= 1
                hi[a] += 1
                L[row, flat(tuple(lo))] += 1 / h[a] ** 2
                L[row, flat(tuple(hi))] += 1 / h[a] ** 2
                L[row, row] -= 2 / h[a] ** 2
    return L


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def acceptance_line(name, ok, detail):
    """Record one acceptance verdict; all of them are repeated after the run."""
    verdict = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"{name} {verdict}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
