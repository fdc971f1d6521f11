"""Central finite differences as an independent oracle for autograd."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

ABS_FLOOR = 1e-7


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    arr = np.asarray(v)
    if arr.size != 1:
        raise ValueError(f"function must return a scalar, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def finite_diff_grad(f: Callable, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Return (f(x + h e_i) - f(x - h e_i)) / 2h for every element i of ``x``.

    ``x.data`` is perturbed in place and restored after each evaluation.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def rel_error(a, b, floor: float = ABS_FLOOR) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def autograd_grads(f: Callable, inputs: Sequence[Tensor]) -> list:
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def check_gradients(f: Callable, inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences over all inputs.

    ``f`` takes the tensors positionally and returns a scalar tensor.
    """
    analytic = autograd_grads(f, inputs)
    worst = 0.0
    for k, t in enumerate(inputs):
        def fk(xk, k=k):
            args = list(inputs)
            args[k] = xk
            return f(*args)

        numeric = finite_diff_grad(fk, t, h)
        worst = max(worst, float(rel_error(analytic[k], numeric).max(initial=0.0)))
    return worst


def sampled_gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[tuple], n_samples: int,
                      rng: np.random.Generator, h: float = 1e-4) -> list:
    """Compare autograd against central differences on randomly chosen scalar parameters.

    ``params`` is a sequence of ``(name, tensor)``. Returns one
    ``(name, flat_index, analytic, numeric, rel_err)`` row per sample.
    """
    for _, t in params:
        t.grad = None
    backward(loss_fn())
    sizes = np.array([t.size for _, t in params], dtype=np.float64)
    rows = []
    picks = rng.choice(len(params), size=n_samples, p=sizes / sizes.sum())
    for pi in picks:
        name, t = params[pi]
        idx = int(rng.integers(t.size))
        flat = t.data.reshape(-1)
        orig = flat[idx]
        with no_grad():
            flat[idx] = orig + h
            fp = _scalar(loss_fn())
            flat[idx] = orig - h
            fm = _scalar(loss_fn())
        flat[idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = float(t.grad.reshape(-1)[idx]) if t.grad is not None else 0.0
        rows.append((name, idx, analytic, numeric, float(rel_error(analytic, numeric))))
    return rows


def model_gradcheck(cfg=None, n_samples: int = 20, seed: int = 0, size: int = 32, batch: int = 2,
                    h: float = 1e-4) -> list:
    """Sampled float64 check of the segmentation loss of a freshly initialised model."""
    from .model import LEFormer, ModelConfig
    from .train import cross_entropy_loss

    cfg = cfg if cfg is not None else ModelConfig.tiny()
    rng = np.random.default_rng(seed)
    model = LEFormer(cfg, seed=seed, dtype=np.float64)
    x = Tensor(rng.normal(size=(batch, cfg.in_channels, size, size)))
    target = rng.integers(0, cfg.num_classes, size=(batch, size, size))
    params = model.params.learnable()
    return sampled_gradcheck(lambda: cross_entropy_loss(model(x), target), params, n_samples, rng, h)
