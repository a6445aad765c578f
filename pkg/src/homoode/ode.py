"""Explicit Runge-Kutta integrators with function-evaluation accounting.

States may be numpy arrays or :class:`~homoode.tensor.Tensor` objects.  With
Tensors on an active tape the solver's arithmetic is recorded, which is what
"backprop through the solver" means; step-size control always works on the
raw values and never enters the tape.

Dynamics functions are called as ``f(state, t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional

import numpy as np

from .tensor import Tensor

METHODS = ("euler", "rk4", "dopri5")

# Dormand-Prince 5(4) tableau.
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# fifth-order weights minus embedded fourth-order weights
E1, E3, E4, E5, E6, E7 = (71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


class SolverError(RuntimeError):
    pass


class DivergenceError(SolverError):
    """Step budget exhausted before reaching the end of the interval."""

    def __init__(self, msg: str, solution: Optional["OdeSolution"] = None):
        super().__init__(msg)
        self.solution = solution


class NumericError(SolverError):
    """Non-finite values appeared in the state or the error estimate."""


@dataclass
class SolverConfig:
    method: str = "dopri5"
    atol: float = 1e-3
    rtol: float = 1e-3
    max_steps: int = 1000
    initial_step: Optional[float] = None
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    pi_beta: float = 0.04

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.atol <= 0 or self.rtol <= 0:
            raise ValueError("atol and rtol must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ValueError("initial_step must be positive")

    def replace(self, **kw) -> "SolverConfig":
        d = dict(self.__dict__)
        d.update(kw)
        return SolverConfig(**d)


@dataclass
class OdeSolution:
    times: List[float] = field(default_factory=list)
    states: List[Any] = field(default_factory=list)
    nfe: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0

    @property
    def final(self):
        return self.states[-1]

    def at(self, t: float) -> np.ndarray:
        """State at ``t`` by linear interpolation between stored steps."""
        ts = np.asarray(self.times, dtype=float)
        if ts[0] > ts[-1]:
            ts = -ts
            t = -t
        if not ts[0] <= t <= ts[-1]:
            raise ValueError(f"t={t} outside the solved interval")
        i = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        w = 0.0 if ts[i + 1] == ts[i] else (t - ts[i]) / (ts[i + 1] - ts[i])
        a, b = values(self.states[i]), values(self.states[i + 1])
        return (1 - w) * a + w * b


def values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def rms_norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if x.size else 0.0


class CountingFunction:
    """Wraps a dynamics function and counts calls."""

    def __init__(self, f: Callable):
        self.f = f
        self.calls = 0

    def __call__(self, z, t):
        self.calls += 1
        return self.f(z, t)


def euler_step(f, z, t: float, h: float):
    return z + h * f(z, t)


def rk4_step(f, z, t: float, h: float):
    k1 = f(z, t)
    k2 = f(z + (0.5 * h) * k1, t + 0.5 * h)
    k3 = f(z + (0.5 * h) * k2, t + 0.5 * h)
    k4 = f(z + h * k3, t + h)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def dopri5_stages(f, z, t: float, h: float, k1=None):
    """One Dormand-Prince step; returns (z_next, error_estimate, f(z_next))."""
    if k1 is None:
        k1 = f(z, t)
    k2 = f(z + h * (A21 * k1), t + C2 * h)
    k3 = f(z + h * (A31 * k1 + A32 * k2), t + C3 * h)
    k4 = f(z + h * (A41 * k1 + A42 * k2 + A43 * k3), t + C4 * h)
    k5 = f(z + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4), t + C5 * h)
    k6 = f(z + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5), t + h)
    z_next = z + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
    k7 = f(z_next, t + h)
    v = [values(k) for k in (k1, k3, k4, k5, k6, k7)]
    err = h * (E1 * v[0] + E3 * v[1] + E4 * v[2] + E5 * v[3] + E6 * v[4] + E7 * v[5])
    return z_next, err, k7


def dopri5_step(f, z, t: float, h: float):
    z_next, err, _ = dopri5_stages(f, z, t, h)
    return z_next, err


def error_ratio(err: np.ndarray, z: np.ndarray, z_next: np.ndarray, atol: float, rtol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_next))
    return rms_norm(err / scale)


class StepController:
    """Safety-factored PI step-size controller (Hairer-Norsett-Wanner form)."""

    def __init__(self, cfg: SolverConfig, order: int = 5):
        self.cfg = cfg
        self.alpha = 1.0 / order - 0.75 * cfg.pi_beta
        self.beta = cfg.pi_beta
        self.prev_err = 1e-4

    def factor(self, err: float, accepted: bool) -> float:
        c = self.cfg
        if err == 0.0:
            fac = c.max_factor
        else:
            fac = c.safety * err ** (-self.alpha)
            if accepted:
                fac *= self.prev_err ** self.beta
        fac = min(c.max_factor, max(c.min_factor, fac))
        if accepted:
            self.prev_err = max(err, 1e-4)
        else:
            fac = min(fac, 1.0)
        return fac


def initial_step(f, z, t: float, f0: np.ndarray, direction: float, cfg: SolverConfig,
                 order: int = 5, span: Optional[float] = None) -> float:
    """Automatic starting step (Hairer, Norsett & Wanner, Solving ODEs I, II.4).

    When the field does not change over the probe step there is no local
    curvature to resolve; with ``span`` given the whole interval is tried
    (a rejection will shrink it if that was too optimistic).
    """
    zv = values(z)
    scale = cfg.atol + np.abs(zv) * cfg.rtol
    d0 = rms_norm(zv / scale)
    d1 = rms_norm(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    z1 = zv + direction * h0 * f0
    if isinstance(z, Tensor):
        z1 = Tensor(z1)
    f1 = values(f(z1, t + direction * h0))
    d2 = rms_norm((f1 - f0) / scale) / h0
    if span is not None and (d2 <= 1e-12 * d1 or max(d1, d2) <= 1e-15):
        return span
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1)


def _check_finite(arr: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite state at t={t:.6g}")


def ode_solve(f: Callable, z0, t0: float, t1: float, cfg: Optional[SolverConfig] = None,
              keep_trajectory: bool = True) -> OdeSolution:
    """Integrate dz/dt = f(z, t) from t0 to t1 (t1 < t0 integrates backwards).

    With ``keep_trajectory=False`` only the endpoints are retained.
    """
    cfg = cfg or SolverConfig()
    if t0 == t1:
        raise ValueError("t0 and t1 must differ")
    fc = CountingFunction(f)
    sol = OdeSolution(times=[t0], states=[z0])
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)

    def push(t, z):
        if keep_trajectory:
            sol.times.append(t)
            sol.states.append(z)
        else:
            sol.times[1:] = [t]
            sol.states[1:] = [z]

    if cfg.method in ("euler", "rk4"):
        h = cfg.initial_step or span / 100.0
        n = max(1, int(math.ceil(span / h - 1e-12)))
        if n > cfg.max_steps:
            raise DivergenceError(f"{n} fixed steps exceed max_steps={cfg.max_steps}", sol)
        h = direction * span / n
        step = rk4_step if cfg.method == "rk4" else euler_step
        z, t = z0, t0
        for i in range(n):
            z = step(fc, z, t, h)
            t = t1 if i == n - 1 else t0 + (i + 1) * h
            _check_finite(values(z), t)
            push(t, z)
            sol.accepted_steps += 1
        sol.nfe = fc.calls
        return sol

    ctrl = StepController(cfg)
    z, t = z0, t0
    k1 = fc(z, t)
    _check_finite(values(k1), t)
    if cfg.initial_step is not None:
        h = cfg.initial_step
    else:
        h = initial_step(fc, z, t, values(k1), direction, cfg, span=span)
    h = min(h, span)
    while direction * (t1 - t) > 0:
        if sol.accepted_steps + sol.rejected_steps >= cfg.max_steps:
            sol.nfe = fc.calls
            raise DivergenceError(
                f"max_steps={cfg.max_steps} exceeded at t={t:.6g} (target {t1})", sol)
        remaining = abs(t1 - t)
        last = h >= remaining * (1 - 1e-12)
        hs = remaining if last else h
        z_new, err, k7 = dopri5_stages(fc, z, t, direction * hs, k1)
        zv, zn = values(z), values(z_new)
        e = error_ratio(err, zv, zn, cfg.atol, cfg.rtol)
        if not math.isfinite(e):
            sol.nfe = fc.calls
            raise NumericError(f"non-finite error estimate at t={t:.6g}")
        if e <= 1.0:
            _check_finite(zn, t)
            t = t1 if last else t + direction * hs
            z, k1 = z_new, k7
            sol.accepted_steps += 1
            push(t, z)
            h = hs * ctrl.factor(e, True)
        else:
            sol.rejected_steps += 1
            h = hs * ctrl.factor(e, False)
    sol.nfe = fc.calls
    return sol
