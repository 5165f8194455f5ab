"""Central finite-difference gradient checking for float64 graphs."""

import numpy as np

from .tensor import Tensor, no_grad


def _loss_value(fn, inputs, weights):
    with no_grad():
        out = fn(*inputs)
    return float(np.sum(out.data * weights))


def check_gradients(fn, inputs, eps=1e-6, rng=None, max_coords=None, joint=False):
    """Compare backprop against central differences of ``sum(fn(*inputs) * R)``.

    ``R`` is a fixed random projection so every output element matters.
    ``inputs`` are float64 Tensors; those with ``requires_grad`` are checked.
    With ``max_coords``, only that many randomly chosen coordinates per input
    are perturbed. Returns ``{index: relative error}`` where the error is
    ``max|analytic - numeric| / max|numeric|`` over the checked coordinates.
    With ``joint`` the denominator is taken over all inputs together, which
    treats the inputs as one parameter vector: a tensor whose gradient is
    tiny next to the others is then not judged on rounding noise alone.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = fn(*inputs)
    weights = rng.standard_normal(out.shape)
    for t in inputs:
        t.grad = None
    loss = (out * Tensor(weights)).sum()
    loss.backward()
    diffs, scales = {}, {}
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            hi = _loss_value(fn, inputs, weights)
            flat[c] = orig - eps
            lo = _loss_value(fn, inputs, weights)
            flat[c] = orig
            numeric[j] = (hi - lo) / (2 * eps)
        a = analytic.reshape(-1)[coords]
        diffs[i] = float(np.max(np.abs(a - numeric)))
        scales[i] = float(np.max(np.abs(numeric)))
    if joint:
        top = max(max(scales.values(), default=0.0), 1e-12)
        return {i: d / top for i, d in diffs.items()}
    return {i: d / max(scales[i], 1e-12) for i, d in diffs.items()}
