"""Central finite-difference gradient oracle, independent of the autodiff core."""

import numpy as np

from sleepscore.core.tensor import Tensor


def numeric_gradient(build, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """d build().item() / d tensor by central differences, elementwise."""
    num = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = build().item()
        flat[i] = orig - h
        down = build().item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return num


def max_rel_error(build, tensors, h: float = 1e-5) -> float:
    """Worst relative disagreement between analytic and numeric gradients.

    `build` must construct the scalar loss from scratch on every call so the
    finite differences see the perturbed parameters.
    """
    for t in tensors:
        t.grad = None
    loss = build()
    loss.backward(retain=tensors)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(build, t, h)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        err = np.abs(analytic - numeric) / np.maximum(scale, 1e-8)
        err[scale < 1e-7] = 0.0
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def random_tensor(rng, shape, requires_grad=True, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64,
                  requires_grad=requires_grad)


def sampled_rel_error(build, tensors, rng, coords_per_tensor: int = 4,
                      h: float = 1e-5) -> float:
    """Like max_rel_error but finite-differences only a random subset of
    coordinates per tensor; for models too large to difference densely."""
    for t in tensors:
        t.grad = None
    loss = build()
    loss.backward(retain=tensors)
    worst = 0.0
    for t in tensors:
        analytic = (t.grad if t.grad is not None
                    else np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        n = min(coords_per_tensor, flat.size)
        for i in rng.choice(flat.size, size=n, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = build().item()
            flat[i] = orig - h
            down = build().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            scale = max(abs(numeric), abs(float(analytic[i])))
            if scale < 1e-7:
                continue
            worst = max(worst, abs(numeric - float(analytic[i])) / scale)
    return worst
