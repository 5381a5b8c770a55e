"""Fixed-step Heun integration recorded on the autodiff tape."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

VARIANCE_FLOOR = 1e-10

_local = threading.local()


class SolverError(FloatingPointError):
    """A non-finite state appeared during integration."""

    def __init__(self, step: int, component: int, time: float):
        super().__init__(f"non-finite state at step {step} (t={time:.4g}), component {component}")
        self.step = step
        self.component = component
        self.time = time


@dataclass(frozen=True)
class TimeGrid:
    obs_times: np.ndarray
    substeps: int = 4

    def __post_init__(self):
        times = np.asarray(self.obs_times, dtype=np.float64)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("obs_times must be a non-empty 1-D array")
        if np.any(np.diff(times) <= 0):
            raise ValueError("obs_times must be strictly increasing")
        if int(self.substeps) < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")
        object.__setattr__(self, "obs_times", times)
        object.__setattr__(self, "substeps", int(self.substeps))

    @property
    def n_steps(self) -> int:
        return (self.obs_times.size - 1) * self.substeps


@dataclass
class StateTrajectory:
    """Solver output: ``states`` has shape (n_states, T, *batch)."""

    states: ad.Node
    variances: ad.Node | None = None


Rhs = Callable[[ad.Node, float], ad.Node]


@contextmanager
def unchecked():
    """Let non-finite states propagate instead of raising (per thread).

    Used to locate which batch columns diverge after a :class:`SolverError`.
    """
    previous = getattr(_local, "unchecked", False)
    _local.unchecked = True
    try:
        with np.errstate(all="ignore"):
            yield
    finally:
        _local.unchecked = previous


def _check_finite(x: ad.Node, step: int, t: float) -> None:
    if getattr(_local, "unchecked", False):
        return
    v = x.value
    if not np.isfinite(v).all():
        bad = ~np.isfinite(v.reshape(v.shape[0], -1)).all(axis=1)
        raise SolverError(step, int(np.flatnonzero(bad)[0]), t)


def heun_step(rhs: Rhs, x: ad.Node, t: float, h: float) -> ad.Node:
    k1 = rhs(x, t)
    k2 = rhs(x + h * k1, t + h)
    return x + (0.5 * h) * (k1 + k2)


def simulate(rhs: Rhs, x0, grid: TimeGrid) -> ad.Node:
    """Integrate ``dx/dt = rhs(x, t)`` and sample at the observation times.

    The first axis of ``x0`` indexes states; any trailing axes are batch axes
    carried through unchanged.  Returns a node of shape (n_states, T, *batch)
    whose first time column is ``x0``.
    """
    x = ad.constant(x0)
    if x.ndim == 0:
        raise ValueError("x0 must have at least one state axis")
    _check_finite(x, 0, float(grid.obs_times[0]))
    columns = [x]
    step = 0
    times = grid.obs_times
    # overflow is reported through SolverError, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(times.size - 1):
            t0 = float(times[i])
            h = (float(times[i + 1]) - t0) / grid.substeps
            for j in range(grid.substeps):
                t = t0 + j * h
                x = heun_step(rhs, x, t, h)
                step += 1
                _check_finite(x, step, t + h)
            columns.append(x)
    return ad.stack(columns, axis=1)


def simulate_with_noise(rhs_x: Callable, rhs_v: Callable, x0, v0, grid: TimeGrid):
    """Integrate states and variance states jointly with one Heun scheme.

    ``rhs_x(x, t)`` and ``rhs_v(v, x, t)`` give the two derivative blocks.
    Returns ``(X, V)``; ``V`` is floored at ``VARIANCE_FLOOR`` so it can be used
    directly as a variance.
    """
    x0, v0 = ad.constant(x0), ad.constant(v0)
    nx = x0.shape[0]

    def joint(y, t):
        x, v = y[:nx], y[nx:]
        return ad.concat([rhs_x(x, t), rhs_v(v, x, t)], axis=0)

    traj = simulate(joint, ad.concat([x0, v0], axis=0), grid)
    return traj[:nx], ad.maximum(traj[nx:], VARIANCE_FLOOR)
