"""Finite-difference oracle and the catalogue of primitives it checks."""

import numpy as np

from hds import autodiff as ad


def numeric_grad(f, inputs, name, h=1e-6):
    """Central differences of scalar ``f(**inputs)`` with respect to ``inputs[name]``."""
    x = np.array(inputs[name], dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = float(f(**{**inputs, name: x.copy()}).value)
        x[i] = orig - h
        down = float(f(**{**inputs, name: x.copy()}).value)
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def max_grad_error(f, inputs, h=1e-6):
    """Largest relative error between reverse-mode and central-difference gradients."""
    _, grads = ad.value_and_grad(f)(**inputs)
    return max(rel_error(grads[k], numeric_grad(f, inputs, k, h)) for k in inputs)


def _away(x, point, gap=0.05):
    # push values off a kink so central differences stay on one side
    return np.where(np.abs(x - point) < gap, point + gap * np.sign(x - point + 1e-12), x)


def _proj(out, rng_seed=0):
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return ad.sum(out * w)


# name -> (function of named nodes returning a scalar, input generator)
PRIMITIVES = {
    "add": (lambda a, b: _proj(a + b), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=4)}),
    "subtract": (lambda a, b: _proj(a - b), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 1))}),
    "multiply": (lambda a, b: _proj(a * b), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(1, 4))}),
    "divide": (lambda a, b: _proj(a / b),
               lambda r: {"a": r.normal(size=(3, 4)), "b": r.uniform(0.5, 2, size=4) * r.choice([-1, 1], size=4)}),
    "negate": (lambda a: _proj(-a), lambda r: {"a": r.normal(size=(2, 3))}),
    "power": (lambda a, b: _proj(ad.power(a, b)),
              lambda r: {"a": r.uniform(0.5, 2, size=(3, 4)), "b": r.uniform(0.5, 3, size=(3, 4))}),
    "square": (lambda a: _proj(ad.square(a)), lambda r: {"a": r.normal(size=(5,))}),
    "maximum": (lambda a: _proj(ad.maximum(a, 0.1)), lambda r: {"a": _away(r.normal(size=(6,)), 0.1)}),
    "where": (lambda a, b: _proj(ad.where(np.arange(12).reshape(3, 4) % 3 == 0, a, b)),
              lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=4)}),
    "exp": (lambda a: _proj(ad.exp(a)), lambda r: {"a": r.normal(size=(4,))}),
    "log": (lambda a: _proj(ad.log(a)), lambda r: {"a": r.uniform(0.2, 3, size=(4,))}),
    "log1p": (lambda a: _proj(ad.log1p(a)), lambda r: {"a": r.uniform(-0.5, 3, size=(4,))}),
    "tanh": (lambda a: _proj(ad.tanh(a)), lambda r: {"a": r.normal(size=(4,))}),
    "relu": (lambda a: _proj(ad.relu(a)), lambda r: {"a": _away(r.normal(size=(6,)), 0.0)}),
    "softplus": (lambda a: _proj(ad.softplus(a)), lambda r: {"a": 3 * r.normal(size=(5,))}),
    "sigmoid": (lambda a: _proj(ad.sigmoid(a)), lambda r: {"a": 3 * r.normal(size=(5,))}),
    "sum": (lambda a: _proj(ad.sum(a, axis=1)), lambda r: {"a": r.normal(size=(3, 4))}),
    "mean": (lambda a: _proj(ad.mean(a, axis=0, keepdims=True)), lambda r: {"a": r.normal(size=(3, 4))}),
    "logsumexp": (lambda a: _proj(ad.logsumexp(a, axis=1)), lambda r: {"a": 3 * r.normal(size=(3, 5))}),
    "matmul": (lambda a, b: _proj(a @ b), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4, 2))}),
    "matmul_vec": (lambda a, b: _proj(a @ b), lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=4)}),
    "vec_matmul": (lambda a, b: _proj(a @ b), lambda r: {"a": r.normal(size=4), "b": r.normal(size=(4, 2))}),
    "reshape": (lambda a: _proj(ad.reshape(a, (6, 2))), lambda r: {"a": r.normal(size=(3, 4))}),
    "transpose": (lambda a: _proj(ad.transpose(a, (2, 0, 1))), lambda r: {"a": r.normal(size=(2, 3, 4))}),
    "broadcast_to": (lambda a: _proj(ad.broadcast_to(a, (3, 4))), lambda r: {"a": r.normal(size=(1, 4))}),
    "slice": (lambda a: _proj(a[1:, ::2]), lambda r: {"a": r.normal(size=(3, 5))}),
    "gather": (lambda a: _proj(a[np.array([0, 2, 2, 1])]), lambda r: {"a": r.normal(size=(3, 2))}),
    "concat": (lambda a, b: _proj(ad.concat([a, b], axis=1)),
               lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 1))}),
    "stack": (lambda a, b: _proj(ad.stack([a, b], axis=1)),
              lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 3))}),
    "conv1d": (lambda x, w: _proj(ad.conv1d(x, w, stride=2)),
               lambda r: {"x": r.normal(size=(2, 3, 11)), "w": r.normal(size=(4, 3, 5))}),
    "avg_pool1d": (lambda x: _proj(ad.avg_pool1d(x, 2)), lambda r: {"x": r.normal(size=(2, 3, 7))}),
}
