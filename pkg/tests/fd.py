"""Central finite differences, kept independent of the reverse pass."""

import numpy as np


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def store_grads(f, store, names=None, h: float = 1e-5) -> dict:
    """Finite-difference gradient of ``f()`` with respect to parameters held in ``store``.

    Entries are perturbed in place and restored afterwards.
    """
    out = {}
    for name in names or list(store):
        value = store[name].value
        g = np.zeros_like(value)
        for i in np.ndindex(value.shape):
            orig = value[i]
            value[i] = orig + h
            up = f()
            value[i] = orig - h
            down = f()
            value[i] = orig
            g[i] = (up - down) / (2 * h)
        out[name] = g
    return out
