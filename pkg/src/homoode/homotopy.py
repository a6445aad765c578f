"""Homotopy mappings and zero-path tracing.

Two homotopies are supported::

    fixed_point:  H(z, lam) = lam * r(z) + (1 - lam) * (z - z0)
    newton:       H(z, lam) = r(z) - (1 - lam) * r(z0)

The zero path {H = 0} is followed from (z0, 0) to lam = 1 by integrating the
unit tangent of the augmented Jacobian [dH/dz, dH/dlam] in arc length, or in
time with a constant speed ``v`` (``ds/dt = v``).  Both parameterizations
trace the same curve.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .ode import (
    CountingFunction,
    OdeSolution,
    SolverConfig,
    SolverError,
    StepController,
    dopri5_stages,
    error_ratio,
    euler_step,
    initial_step,
    ode_solve,
)
from .tensor import Tape, Tensor

KINDS = ("fixed_point", "newton")
SINGULAR_RCOND = 1e-12
NULLSPACE_MAX_DIM = 200
LAMBDA_END_TOL = 1e-12  # a step landing this close to lambda = 1 counts as arrival


class SingularityError(SolverError):
    def __init__(self, lam: float, rcond: float):
        super().__init__(f"singular homotopy Jacobian at lambda={lam:.6g} (rcond={rcond:.3g})")
        self.lam = lam
        self.rcond = rcond


class PathFailureError(SolverError):
    def __init__(self, msg: str, trace: Optional[list] = None):
        super().__init__(msg)
        self.trace = trace or []


class InfeasibleVelocityError(ValueError):
    pass


class BracketError(ValueError):
    pass


def autodiff_jacobian(fn: Callable) -> Callable[[np.ndarray], np.ndarray]:
    """Dense Jacobian of ``fn`` by one reverse sweep per output component.

    ``fn`` must accept a :class:`Tensor` and return a Tensor.
    """

    def jac(z: np.ndarray) -> np.ndarray:
        with Tape() as tape:
            zt = Tensor(z, requires_grad=True)
            out = fn(zt)
        m = out.size
        rows = np.empty((m, zt.size))
        for i in range(m):
            seed = np.zeros(out.shape)
            seed.reshape(-1)[i] = 1.0
            rows[i] = tape.gradient(out, [zt], seed=seed)[0].reshape(-1)
        return rows

    return jac


def _as_array_fn(fn: Callable) -> Callable[[np.ndarray], np.ndarray]:
    def call(z):
        out = fn(z)
        return out.data if isinstance(out, Tensor) else np.asarray(out, dtype=float)

    return call


@dataclass
class HomotopyProblem:
    """Target residual r(z), its Jacobian, and the start point z0.

    Without an explicit ``jacobian`` the residual must accept Tensors and the
    Jacobian is assembled by reverse-mode autodiff.
    """

    residual: Callable
    start_point: np.ndarray
    jacobian: Optional[Callable] = None
    kind: str = "fixed_point"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown homotopy kind {self.kind!r}")
        self.start_point = np.atleast_1d(np.asarray(self.start_point, dtype=float))
        if not np.all(np.isfinite(self.start_point)):
            raise ValueError("start point must be finite")
        if self.jacobian is None:
            self.jacobian = autodiff_jacobian(self.residual)
        self._r = _as_array_fn(self.residual)
        self.r0 = np.atleast_1d(self._r(self.start_point))

    @property
    def dim(self) -> int:
        return self.start_point.size

    def r(self, z: np.ndarray) -> np.ndarray:
        return np.atleast_1d(self._r(z))

    def J(self, z: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.jacobian(z), dtype=float))

    def with_start(self, z0) -> "HomotopyProblem":
        return HomotopyProblem(self.residual, z0, self.jacobian, self.kind)


@dataclass
class PathState:
    z: np.ndarray
    lam: float
    s: float
    v: float = 1.0
    residual: float = float("nan")

    @property
    def t(self) -> float:
        return self.s / self.v


def homotopy_eval(p: HomotopyProblem, z, lam: float) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if p.kind == "fixed_point":
        if lam == 1.0:
            return p.r(z)
        if lam == 0.0:
            return z - p.start_point
        return lam * p.r(z) + (1.0 - lam) * (z - p.start_point)
    if lam == 1.0:
        return p.r(z)
    return p.r(z) - (1.0 - lam) * p.r0


def homotopy_partials(p: HomotopyProblem, z: np.ndarray, lam: float):
    """Return (H, dH/dz, dH/dlam) at (z, lam)."""
    r = p.r(z)
    J = p.J(z)
    if p.kind == "fixed_point":
        d = z - p.start_point
        H = lam * r + (1.0 - lam) * d
        Hz = lam * J + (1.0 - lam) * np.eye(z.size)
        Hl = r - d
    else:
        H = r - (1.0 - lam) * p.r0
        Hz = J
        Hl = p.r0.copy()
    return H, Hz, Hl


def _nullspace_tangent(A: np.ndarray, lam: float) -> np.ndarray:
    n = A.shape[0]
    q, R = np.linalg.qr(A.T, mode="complete")
    sv = np.linalg.svd(R[:n], compute_uv=False)
    rcond = sv[-1] / sv[0] if sv[0] > 0 else 0.0
    if rcond < SINGULAR_RCOND:
        raise SingularityError(lam, rcond)
    return q[:, -1]


def tangent(p: HomotopyProblem, z, lam: float, prev: Optional[np.ndarray] = None):
    """Unit tangent (dz/ds, dlam/ds) of the zero path at (z, lam).

    Orientation follows ``prev`` (positive dot product); without it the
    tangent points towards increasing lambda.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    _, Hz, Hl = homotopy_partials(p, z, lam)
    A = np.column_stack([Hz, Hl])
    if z.size <= NULLSPACE_MAX_DIM:
        t = _nullspace_tangent(A, lam)
    else:
        try:
            w = np.linalg.solve(Hz, -Hl)
            t = np.append(w, 1.0)
            t /= np.linalg.norm(t)
            if not np.all(np.isfinite(t)) or abs(t[-1]) < 1e-8:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            t = _nullspace_tangent(A, lam)
    if prev is not None:
        if np.dot(t, prev) < 0:
            t = -t
    elif t[-1] < 0:
        t = -t
    return t[:-1], float(t[-1])


def velocity_dynamics(p: HomotopyProblem, z, lam: float, v: float,
                      prev: Optional[np.ndarray] = None):
    """Time derivatives (dz/dt, dlam/dt) for travel at speed ``v`` along the zero path.

    ``||dz/dt||^2 + |dlam/dt|^2 = v^2``.
    """
    if v <= 0:
        raise ValueError("velocity must be positive")
    dz, dl = tangent(p, z, lam, prev)
    return v * dz, v * dl


def correct(p: HomotopyProblem, z: np.ndarray, lam: float, tol: float, max_iter: int = 10):
    """Project (z, lam) onto H = 0 by minimum-norm Gauss-Newton steps.

    Returns (z, lam, ||H||_inf, evaluations).  The step is taken in the
    augmented space so turning points in lambda do not stall it.
    """
    y = np.append(z, lam)
    evals = 0
    for _ in range(max_iter):
        H, Hz, Hl = homotopy_partials(p, y[:-1], y[-1])
        evals += 1
        res = float(np.max(np.abs(H)))
        if res <= tol:
            return y[:-1], y[-1], res, evals
        A = np.column_stack([Hz, Hl])
        dy = np.linalg.lstsq(A, -H, rcond=None)[0]
        y = y + dy
    res = float(np.max(np.abs(homotopy_eval(p, y[:-1], y[-1]))))
    return y[:-1], y[-1], res, evals + 1


def newton_polish(p: HomotopyProblem, z: np.ndarray, tol: float, max_iter: int = 20):
    """Plain Newton on r(z) = 0; returns (z, ||r||_inf, evaluations)."""
    evals = 0
    for _ in range(max_iter):
        r = p.r(z)
        evals += 1
        res = float(np.max(np.abs(r)))
        if res <= tol:
            return z, res, evals
        try:
            z = z - np.linalg.solve(p.J(z), r)
        except np.linalg.LinAlgError:
            break
    r = p.r(z)
    return z, float(np.max(np.abs(r))), evals + 1


@dataclass
class TraceResult:
    solution: np.ndarray
    trace: List[PathState]
    nfe: int
    residual: float
    accepted_steps: int = 0
    rejected_steps: int = 0
    corrector_evals: int = 0
    events: List[PathState] = field(default_factory=list)
    event_nfe: int = 0

    def __iter__(self):
        return iter((self.solution, self.trace, self.nfe))


class _PathField:
    """d(z, lam)/dt = v * unit tangent, oriented by the last accepted direction."""

    def __init__(self, p: HomotopyProblem, v: float):
        self.p = p
        self.v = v
        self.prev: Optional[np.ndarray] = None

    def __call__(self, y, t):
        dz, dl = tangent(self.p, y[:-1], y[-1], self.prev)
        return self.v * np.append(dz, dl)

    def accept(self, k: np.ndarray) -> None:
        self.prev = k / np.linalg.norm(k)


def _locate(step, y, t, h, k1, level, tol_lam=1e-12, tol_h=1e-10, max_iter=60):
    """Illinois search for the partial step h* in (0, h] with lam(y(h*)) = level."""
    a, fa = 0.0, y[-1] - level
    b = h
    yb = step(y, t, b, k1)
    fb = yb[-1] - level
    if fb == 0.0:
        return b, yb
    side = 0
    best = (b, yb)
    for _ in range(max_iter):
        if abs(b - a) <= tol_h:
            break
        c = (a * fb - b * fa) / (fb - fa)
        if not a < c < b and not b < c < a:
            c = 0.5 * (a + b)
        yc = step(y, t, c, k1)
        fc = yc[-1] - level
        best = (c, yc)
        if abs(fc) <= tol_lam:
            break
        if np.sign(fc) == np.sign(fb):
            b, fb = c, fc
            if side == -1:
                fa *= 0.5
            side = -1
        else:
            a, fa = c, fc
            if side == 1:
                fb *= 0.5
            side = 1
    return best


def _trace(p: HomotopyProblem, cfg: SolverConfig, v: float = 1.0, corrector: bool = True,
           path_tol: float = 1e-8, solve_tol: float = 1e-6, max_arc_length: float = 1e3,
           polish: bool = True, events: Sequence[float] = ()) -> TraceResult:
    field_ = _PathField(p, v)
    fc = CountingFunction(field_)
    event_calls = 0

    def step(y, t, h, k1):
        return dopri5_stages(fc, y, t, h, k1)[0]

    y = np.append(p.start_point, 0.0)
    t = 0.0
    trace = [PathState(p.start_point.copy(), 0.0, 0.0, v, 0.0)]
    found: List[PathState] = []
    levels = sorted(float(e) for e in events if e < 1.0)
    ctrl = StepController(cfg)
    k1 = fc(y, t)
    field_.accept(k1)
    # time to reach lambda = 1 if the field stays as it is at the start
    span = (1.0 - y[-1]) / k1[-1] if k1[-1] > 0 else None
    h = cfg.initial_step or initial_step(fc, y, t, k1, 1.0, cfg, span=span)
    accepted = rejected = corr_evals = 0
    while True:
        if accepted + rejected >= cfg.max_steps:
            raise PathFailureError(f"max_steps={cfg.max_steps} exceeded at lambda={y[-1]:.6g}", trace)
        if v * t > max_arc_length:
            raise PathFailureError(f"lambda did not reach 1 within arc length {max_arc_length}", trace)
        y_new, err, k7 = dopri5_stages(fc, y, t, h, k1)
        e = error_ratio(err, y, y_new, cfg.atol, cfg.rtol)
        if not math.isfinite(e):
            raise PathFailureError(f"non-finite error estimate at lambda={y[-1]:.6g}", trace)
        if e > 1.0:
            rejected += 1
            h *= ctrl.factor(e, False)
            continue

        lam_old, lam_new = y[-1], y_new[-1]
        crossed = [lv for lv in levels if lam_old != lv and (lam_old - lv) * (lam_new - lv) <= 0]
        for lv in sorted(crossed, reverse=bool(lam_new < lam_old)):
            before = fc.calls
            hc, yc = _locate(step, y, t, h, k1, lv)
            event_calls += fc.calls - before
            found.append(PathState(yc[:-1].copy(), lv, v * (t + hc), v))
        if lam_old < 1.0 and lam_new >= 1.0 - LAMBDA_END_TOL:
            if abs(lam_new - 1.0) <= LAMBDA_END_TOL:
                hc, y_end = h, y_new
            else:
                hc, y_end = _locate(step, y, t, h, k1, 1.0)
            accepted += 1
            t += hc
            z = y_end[:-1].copy()
            res = float(np.max(np.abs(p.r(z))))
            if corrector or polish:
                z, res, ev = newton_polish(p, z, 0.01 * solve_tol)
                corr_evals += ev
            trace.append(PathState(z.copy(), 1.0, v * t, v, res))
            if (corrector or polish) and res > solve_tol:
                raise PathFailureError(f"endpoint residual {res:.3g} exceeds {solve_tol}", trace)
            found.append(trace[-1])
            return TraceResult(z, trace, fc.calls - event_calls, res, accepted, rejected,
                               corr_evals, found, event_calls)

        hs = h
        if corrector:
            zc, lc, res, ev = correct(p, y_new[:-1], y_new[-1], path_tol)
            corr_evals += ev
            if res > path_tol:
                rejected += 1
                h *= 0.5
                continue
            moved = not (np.array_equal(zc, y_new[:-1]) and lc == y_new[-1])
            y_new = np.append(zc, lc)
            k_next = fc(y_new, t + hs) if moved else k7
        else:
            res = float(np.max(np.abs(homotopy_eval(p, y_new[:-1], min(max(y_new[-1], 0.0), 1.0)))))
            k_next = k7
        accepted += 1
        t += hs
        y, k1 = y_new, k_next
        field_.accept(k1)
        trace.append(PathState(y[:-1].copy(), float(y[-1]), v * t, v, res))
        h = hs * ctrl.factor(e, True)


def trace_zero_path(p: HomotopyProblem, cfg: Optional[SolverConfig] = None, corrector: bool = True,
                    path_tol: float = 1e-8, solve_tol: float = 1e-6,
                    max_arc_length: float = 1e3, polish: bool = True,
                    events: Sequence[float] = ()) -> TraceResult:
    """Follow the zero path in arc length until lambda reaches 1.

    The lambda = 1 crossing is located inside the last step by a bracketing
    search on the step length.  With ``corrector`` on, every accepted state is
    projected back onto H = 0 (``path_tol``) and the endpoint is polished by
    Newton to ``solve_tol``.  Turning points in lambda are followed.
    ``events`` lists intermediate lambda levels whose crossings are located
    and reported in ``TraceResult.events``; their cost is kept out of ``nfe``.
    """
    cfg = cfg or SolverConfig(atol=1e-8, rtol=1e-8, max_steps=10000)
    return _trace(p, cfg, 1.0, corrector, path_tol, solve_tol, max_arc_length, polish, events)


def trace_with_velocity(p: HomotopyProblem, v: float, cfg: Optional[SolverConfig] = None,
                        corrector: bool = False, events: Sequence[float] = (),
                        max_arc_length: float = 1e3, polish: bool = False) -> TraceResult:
    """Follow the zero path in time at constant speed ``v``."""
    if v <= 0:
        raise ValueError("velocity must be positive")
    cfg = cfg or SolverConfig(atol=1e-10, rtol=1e-10, max_steps=10000)
    return _trace(p, cfg, v, corrector, 1e-8, 1e-6, max_arc_length, polish, events)


def velocity_invariance(p: HomotopyProblem, velocities: Sequence[float] = (0.5, 1.0, 2.0),
                        levels: Optional[Sequence[float]] = None,
                        cfg: Optional[SolverConfig] = None):
    """Compare traces at several speeds at matched lambda levels.

    Returns (per-velocity event lists, max deviation in z across speeds).
    """
    if levels is None:
        levels = np.linspace(0.02, 0.98, 49)
    runs = {v: trace_with_velocity(p, v, cfg, events=levels).events for v in velocities}
    counts = {len(e) for e in runs.values()}
    if len(counts) != 1:
        raise PathFailureError(f"traces crossed the lambda levels a different number of times: {counts}")
    ref = runs[velocities[0]]
    dev = 0.0
    for v in velocities[1:]:
        for a, b in zip(ref, runs[v]):
            dev = max(dev, float(np.max(np.abs(a.z - b.z))))
    return runs, dev


def recover_lambda(F_norms: Sequence[float], times: Sequence[float], v: float) -> np.ndarray:
    """lambda(t) = integral_0^t sqrt(v^2 - ||F||^2), trapezoid rule on the given grid."""
    F = np.asarray(F_norms, dtype=float)
    times = np.asarray(times, dtype=float)
    if F.shape != times.shape:
        raise ValueError("F_norms and times must have the same length")
    gap = v * v - F * F
    if np.any(gap < 0):
        raise InfeasibleVelocityError(f"v={v} is below max ||F||={F.max():.6g}")
    return cumulative_trapezoid(np.sqrt(gap), times, initial=0.0)


def solve_v(F_norms: Sequence[float], times: Sequence[float], target: float = 1.0,
            tol: float = 1e-12, max_iter: int = 200) -> float:
    """Velocity v for which the recovered lambda hits ``target`` at the last time.

    lambda_end(v) is increasing in v, so plain bisection suffices.
    """
    F = np.asarray(F_norms, dtype=float)
    times = np.asarray(times, dtype=float)

    def end(v):
        return trapezoid(np.sqrt(np.maximum(v * v - F * F, 0.0)), times)

    lo = float(np.max(F)) if F.size else 0.0
    if end(lo) > target:
        raise BracketError(f"lambda({times[-1]}) already exceeds {target} at the minimum speed {lo:.6g}")
    hi = max(2 * lo, 1.0)
    for _ in range(100):
        if end(hi) >= target:
            break
        hi *= 2
    else:
        raise BracketError("no velocity reaches the target")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if end(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _newton_field(p: HomotopyProblem):
    def f(z, lam):
        J = p.J(z)
        try:
            with np.errstate(all="raise"):
                sv = np.linalg.svd(J, compute_uv=False)
        except (np.linalg.LinAlgError, FloatingPointError):
            raise SingularityError(lam, 0.0)
        rc = sv[-1] / sv[0] if sv[0] > 0 else 0.0
        if rc < SINGULAR_RCOND:
            raise SingularityError(lam, rc)
        return -np.linalg.solve(J, p.r0)

    return f


def newton_homotopy_ode(p: HomotopyProblem, cfg: Optional[SolverConfig] = None):
    """Integrate dz/dlam = -J(z)^{-1} r(z0) over lam in [0, 1]; returns (z(1), OdeSolution)."""
    cfg = cfg or SolverConfig(atol=1e-10, rtol=1e-10, max_steps=10000)
    sol = ode_solve(_newton_field(p), p.start_point.copy(), 0.0, 1.0, cfg)
    return sol.final, sol


def newton_homotopy_euler_step(p: HomotopyProblem, z=None, h: float = 1.0) -> np.ndarray:
    """One explicit Euler step of the Newton-homotopy ODE from lambda = 0."""
    z = p.start_point.copy() if z is None else np.atleast_1d(np.asarray(z, dtype=float))
    q = p.with_start(z) if z is not p.start_point else p
    return euler_step(_newton_field(q), z, 0.0, h)


@dataclass
class DistanceRow:
    distance: float
    nfe: Optional[int]
    solution: Optional[np.ndarray] = None
    error: str = ""

    @property
    def inv_distance(self) -> float:
        return math.inf if self.distance == 0 else 1.0 / self.distance


def nfe_vs_distance_experiment(p: HomotopyProblem, distances: Sequence[float],
                               cfg: Optional[SolverConfig] = None,
                               z_star: Optional[np.ndarray] = None,
                               direction: Optional[np.ndarray] = None,
                               corrector: bool = False) -> List[DistanceRow]:
    """NFE of a trace started at z_star + d * u for each distance d.

    Rows come back sorted by 1/d ascending.  A failing row records the error
    and the remaining rows still run.
    """
    cfg = cfg or SolverConfig(atol=1e-6, rtol=1e-3, max_steps=10000)
    if z_star is None:
        z_star = trace_zero_path(p).solution
    z_star = np.atleast_1d(np.asarray(z_star, dtype=float))
    # sharpen to full precision so d = 0 really is a stationary start
    z_star = newton_polish(p, z_star, 0.0, max_iter=8)[0]
    u = np.ones_like(z_star) if direction is None else np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    rows = []
    for d in distances:
        q = p.with_start(z_star + d * u)
        try:
            res = trace_zero_path(q, cfg, corrector=corrector)
            rows.append(DistanceRow(float(d), res.nfe, res.solution))
        except SolverError as exc:
            rows.append(DistanceRow(float(d), None, error=str(exc)))
    rows.sort(key=lambda r: r.inv_distance)
    return rows


def write_distance_csv(rows: Sequence[DistanceRow], path, comment: Optional[str] = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["inv_distance", "nfe"])
        for r in rows:
            w.writerow([repr(r.inv_distance), "" if r.nfe is None else r.nfe])
