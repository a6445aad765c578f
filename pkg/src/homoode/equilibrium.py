"""Fixed-point solvers for z = f(z; x): Newton, Picard/Anderson, and the implicit backward."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .ode import SolverError
from .tensor import Tape, Tensor

DENSE_JACOBIAN_MAX_DIM = 64


class NonConvergenceError(SolverError):
    def __init__(self, msg: str, last: Optional[np.ndarray] = None, iterations: int = 0):
        super().__init__(msg)
        self.last = last
        self.iterations = iterations


class FixedPointDivergenceError(NonConvergenceError):
    pass


@dataclass
class EquilibriumProblem:
    """f(z, x) -> same shape as z.  ``f`` may be called with arrays or Tensors."""

    f: Callable
    x: object = None
    max_iter: int = 50
    tol: float = 1e-4

    def map(self, z: np.ndarray) -> np.ndarray:
        out = self.f(z, self.x)
        return out.data if isinstance(out, Tensor) else np.asarray(out, dtype=float)

    def residual(self, z: np.ndarray) -> np.ndarray:
        return z - self.map(z)


class Solve(NamedTuple):
    z_star: np.ndarray
    iterations: int
    residual: float


def _inf(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def _residual_jacobian(p: EquilibriumProblem, z: np.ndarray) -> np.ndarray:
    """Dense d(z - f(z))/dz by reverse-mode sweeps."""
    with Tape() as tape:
        zt = Tensor(z, requires_grad=True)
        out = p.f(zt, p.x)
    n = z.size
    J = np.empty((n, n))
    for i in range(n):
        seed = np.zeros(z.shape)
        seed.reshape(-1)[i] = 1.0
        J[i] = tape.gradient(out, [zt], seed=seed)[0].reshape(-1)
    return np.eye(n) - J


def _newton_direction(p: EquilibriumProblem, z: np.ndarray, r: np.ndarray,
                      jac: Optional[Callable]) -> np.ndarray:
    n = z.size
    if jac is not None:
        return np.linalg.solve(np.atleast_2d(jac(z)), -r.reshape(-1)).reshape(z.shape)
    if n <= DENSE_JACOBIAN_MAX_DIM:
        return np.linalg.solve(_residual_jacobian(p, z), -r.reshape(-1)).reshape(z.shape)
    # Jacobian-free: directional derivatives of r by forward differences
    eps = 1e-7 * max(1.0, np.linalg.norm(z))

    def mv(v):
        v = v.reshape(z.shape)
        nv = np.linalg.norm(v)
        if nv == 0:
            return np.zeros(n)
        d = eps / nv
        return ((p.residual(z + d * v) - r) / d).reshape(-1)

    op = LinearOperator((n, n), matvec=mv, dtype=float)
    step, _ = gmres(op, -r.reshape(-1), rtol=1e-8, restart=min(n, 50), maxiter=10)
    return step.reshape(z.shape)


def newton_solve(p: EquilibriumProblem, z0, jac: Optional[Callable] = None,
                 max_backtracks: int = 30) -> Solve:
    """Newton on r(z) = z - f(z) with backtracking on ||r||.

    ``jac`` optionally supplies dr/dz; otherwise it comes from autodiff.
    """
    z = np.array(z0, dtype=float)
    r = p.residual(z)
    res = _inf(r)
    for it in range(p.max_iter + 1):
        if res <= p.tol:
            return Solve(z, it, res)
        if it == p.max_iter:
            break
        try:
            dz = _newton_direction(p, z, r, jac)
        except np.linalg.LinAlgError as exc:
            raise NonConvergenceError(f"singular Newton system: {exc}", z, it)
        base = np.linalg.norm(r)
        step = 1.0
        for _ in range(max_backtracks):
            zn = z + step * dz
            rn = p.residual(zn)
            if np.all(np.isfinite(rn)) and np.linalg.norm(rn) < (1 - 1e-4 * step) * base:
                break
            step *= 0.5
        z, r = zn, rn
        res = _inf(r)
    raise NonConvergenceError(f"Newton did not reach tol={p.tol} in {p.max_iter} iterations "
                              f"(residual {res:.3g})", z, p.max_iter)


def fixed_point_iterate(p: EquilibriumProblem, z0, anderson_depth: int = 0,
                        beta: float = 1.0, reg: float = 1e-10) -> Solve:
    """Picard iteration (depth 0) or Anderson acceleration with a window of ``anderson_depth``."""
    if anderson_depth < 0:
        raise ValueError("anderson_depth must be >= 0")
    shape = np.shape(z0)
    x = np.array(z0, dtype=float).reshape(-1)
    X: List[np.ndarray] = []  # past iterates
    G: List[np.ndarray] = []  # past residuals g(x) - x
    history: List[float] = []
    for it in range(p.max_iter + 1):
        fx = p.map(x.reshape(shape)).reshape(-1)
        g = fx - x
        res = _inf(g)
        history.append(res)
        if res <= p.tol:
            return Solve(x.reshape(shape), it, res)
        if not np.isfinite(res) or (len(history) > 20 and res > 10 * history[-21]):
            raise FixedPointDivergenceError(f"fixed-point residual grew to {res:.3g}",
                                            x.reshape(shape), it)
        if it == p.max_iter:
            break
        if anderson_depth == 0:
            x = x + beta * g
            continue
        X.append(x.copy())
        G.append(g)
        if len(X) > anderson_depth + 1:
            X.pop(0)
            G.pop(0)
        if len(G) == 1:
            x = x + beta * g
            continue
        dG = np.stack([G[i + 1] - G[i] for i in range(len(G) - 1)], axis=1)
        dX = np.stack([X[i + 1] - X[i] for i in range(len(X) - 1)], axis=1)
        A = dG.T @ dG
        gamma = np.linalg.solve(A + reg * np.eye(A.shape[0]) * max(1.0, np.trace(A)), dG.T @ g)
        x = x + beta * g - (dX + beta * dG) @ gamma
    raise NonConvergenceError(f"fixed-point iteration did not reach tol={p.tol} in {p.max_iter} "
                              f"iterations (residual {res:.3g})", x.reshape(shape), p.max_iter)


def solve_adjoint(vjp: Callable[[np.ndarray], np.ndarray], upstream: np.ndarray,
                  tol: float = 1e-10, max_iter: int = 200, anderson_depth: int = 5) -> np.ndarray:
    """Solve a = upstream + vjp(a), i.e. (I - df/dz)^T a = upstream.

    ``tol`` is relative to the largest upstream entry.
    """
    if not np.any(upstream):
        return np.zeros_like(upstream)
    scale = _inf(upstream)
    q = EquilibriumProblem(lambda a, _: upstream + vjp(a), max_iter=max_iter, tol=tol * scale)
    try:
        return fixed_point_iterate(q, np.array(upstream, dtype=float), anderson_depth).z_star
    except NonConvergenceError as exc:
        raise NonConvergenceError(f"adjoint system did not converge: {exc}", exc.last, exc.iterations)


def deq_backward(z_star, p: EquilibriumProblem, upstream_grad, wrt: Sequence[Tensor],
                 tol: float = 1e-10, max_iter: int = 200) -> list:
    """Gradients of <upstream_grad, z*> with respect to each tensor in ``wrt``.

    ``p.f`` must build its output from the ``wrt`` tensors (parameters and/or
    the condition ``p.x``) so the tape can reach them.
    """
    z_star = np.asarray(z_star, dtype=float)
    upstream = np.asarray(upstream_grad, dtype=float)
    flags = [w.requires_grad for w in wrt]
    try:
        for w in wrt:
            w.requires_grad = True
        with Tape() as tape:
            zt = Tensor(z_star, requires_grad=True)
            out = p.f(zt, p.x)

        def vjp(a):
            return tape.gradient(out, [zt], seed=a.reshape(out.shape))[0]

        a = solve_adjoint(vjp, upstream, tol=tol, max_iter=max_iter)
        if not np.any(a):
            return [np.zeros_like(w.data) for w in wrt]
        return tape.gradient(out, list(wrt), seed=a)
    finally:
        for w, fl in zip(wrt, flags):
            w.requires_grad = fl
