"""Shared oracles for the test suite."""

import numpy as np


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def sampled_central_difference(f, x: np.ndarray, count: int, seed: int = 0, step: float = 1e-5):
    """Central differences at up to ``count`` seeded random entries of ``x``.

    Returns ``(flat_indices, gradient_values)``; small tensors are covered fully.
    """
    flat = x.reshape(-1)
    if flat.size <= count:
        idx = np.arange(flat.size)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, count, replace=False))
    g = np.empty(idx.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        g[j] = (fp - fm) / (2 * step)
    return idx, g


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def layer_gradient_errors(layer, x: np.ndarray, seed: int = 0, reseed=None) -> dict[str, float]:
    """Relative errors of a layer's input and parameter gradients for ``sum(R * layer(x))``.

    ``reseed`` is called before every forward pass so stochastic layers draw
    the same mask each time.
    """
    rng = np.random.default_rng(seed)
    reseed = reseed or (lambda: None)
    reseed()
    out = layer.forward(x, train=True)
    proj = rng.normal(size=out.shape)

    def f():
        reseed()
        return float(np.sum(proj * layer.forward(x, train=True)))

    layer.zero_grad()
    reseed()
    layer.forward(x, train=True)
    dx = layer.backward(proj)
    errs = {"input": relative_error(dx, central_difference(f, x))}
    for name, p in layer.params.items():
        errs[name] = relative_error(layer.grads[name], central_difference(f, p))
    return errs


def loop_fuse(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    """Scalar-loop elementwise sum/product oracle."""
    out = np.empty_like(a)
    flat_a, flat_b, flat_o = a.reshape(-1), b.reshape(-1), out.reshape(-1)
    for i in range(flat_a.size):
        flat_o[i] = flat_a[i] + flat_b[i] if op == "add" else flat_a[i] * flat_b[i]
    return out
