"""Adjoint backward pass for condition-injected ODE layers.

Given the forward terminal state z(t1) and dL/dz(t1), integrate the
augmented state s = [z, a, g_x, g_theta] from t1 back to t0 under

    dz/dt       =  F(z; x, theta)
    da/dt       = -a^T dF/dz
    dg_x/dt     = -a^T dF/dx
    dg_theta/dt = -a^T dF/dtheta

starting from s(t1) = [z(t1), dL/dz(t1), 0, 0].  The vector-Jacobian
products come from a fresh tape at each evaluation, so nothing from the
forward trajectory is kept.  At t0, g_x = dL/dx and g_theta = dL/dtheta;
a(t0) = dL/dz(t0) is also returned for callers that want it.

The parameter accumulator is one flat buffer laid out in the order of
``param_names`` (each tensor raveled in C order).
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .ode import OdeSolution, SolverConfig, SolverError, ode_solve
from .tensor import Tape, Tensor


class AdjointError(SolverError):
    """Reverse-time solve failed; callers may fall back to direct backprop."""


class AdjointResult:
    """Unpacks as ``(grad_x, grad_theta)``."""

    def __init__(self, grad_x, grad_theta, grad_theta_flat, grad_z0, nfe, solution):
        self.grad_x: Optional[np.ndarray] = grad_x
        self.grad_theta: Dict[str, np.ndarray] = grad_theta
        self.grad_theta_flat: np.ndarray = grad_theta_flat
        self.grad_z0: np.ndarray = grad_z0
        self.nfe: int = nfe
        self.solution: Optional[OdeSolution] = solution

    def __iter__(self):
        return iter((self.grad_x, self.grad_theta))


def _layout(arrays: Sequence[np.ndarray]) -> List[slice]:
    out, pos = [], 0
    for a in arrays:
        out.append(slice(pos, pos + a.size))
        pos += a.size
    return out


def adjoint_solve(F: Callable, z1: np.ndarray, a1: np.ndarray, condition: Optional[np.ndarray],
                  params: Dict[str, Tensor], t0: float, t1: float,
                  cfg: Optional[SolverConfig] = None) -> AdjointResult:
    """Generic reverse-time adjoint for dz/dt = F(z, t, cond).

    ``F(z_tensor, t, cond_tensor_or_None)`` must build its output from the
    tensors in ``params`` (which need ``requires_grad``) so the tape reaches
    them.  ``condition`` may be None for unconditioned dynamics.
    """
    cfg = cfg or SolverConfig()
    z1 = np.asarray(z1, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    if a1.shape != z1.shape:
        raise ValueError(f"upstream gradient shape {a1.shape} != state shape {z1.shape}")
    names = list(params)
    plist = [params[n] for n in names]
    cshape = None if condition is None else np.shape(condition)
    blocks = [z1, a1] + ([np.zeros(cshape)] if cshape is not None else []) \
        + [np.zeros(p.shape) for p in plist]
    sl = _layout(blocks)
    n_theta = sum(p.size for p in plist)
    theta_slices = _layout([p.data for p in plist])

    def unflatten(flat, k):
        return flat[sl[k]].reshape(blocks[k].shape)

    if not np.any(a1):
        gx = None if cshape is None else np.zeros(cshape)
        gflat = np.zeros(n_theta)
        return AdjointResult(gx, {n: np.zeros(p.shape) for n, p in zip(names, plist)},
                             gflat, np.zeros_like(z1), 0, None)

    flags = [p.requires_grad for p in plist]

    def aug(s, t):
        z = unflatten(s, 0)
        a = unflatten(s, 1)
        with Tape() as tape:
            zt = Tensor(z, requires_grad=True)
            ct = None if cshape is None else Tensor(condition, requires_grad=True)
            out = F(zt, t, ct)
        sources = [zt] + ([ct] if ct is not None else []) + plist
        vjps = tape.gradient(out, sources, seed=a)
        parts = [out.data.reshape(-1)] + [-v.reshape(-1) for v in vjps]
        return np.concatenate(parts)

    s1 = np.concatenate([b.reshape(-1) for b in blocks])
    try:
        for p in plist:
            p.requires_grad = True
        sol = ode_solve(aug, s1, t1, t0, cfg, keep_trajectory=False)
    except SolverError as exc:
        raise AdjointError(f"reverse-time adjoint solve failed: {exc}") from exc
    finally:
        for p, fl in zip(plist, flags):
            p.requires_grad = fl
    s0 = sol.final
    k = 2
    gx = None
    if cshape is not None:
        gx = unflatten(s0, 2)
        k = 3
    gflat = s0[sum(b.size for b in blocks[:k]):]
    grads = {n: gflat[ts].reshape(p.shape).copy() for n, p, ts in zip(names, plist, theta_slices)}
    return AdjointResult(gx, grads, gflat.copy(), unflatten(s0, 1), sol.nfe, sol)


def adjoint_backward(m, record, dL_dzT, cfg: Optional[SolverConfig] = None) -> AdjointResult:
    """Adjoint gradients of a model forward with respect to the condition and theta.

    ``m`` is an :class:`~homoode.models.ImplicitModel` of an ODE kind and
    ``record`` its :class:`~homoode.models.ForwardRecord`.  For ``homoode``
    the condition is the injected feature map; for ``node``/``anode`` the
    condition slot is empty and the input gradient is ``grad_z0``.
    The reverse solve reuses the model's solver config unless ``cfg`` is
    given.
    """
    if m.config.kind == "deq":
        raise ValueError("adjoint_backward applies to ODE kinds; use deq_backward for DEQ")
    upstream = dL_dzT.data if isinstance(dL_dzT, Tensor) else np.asarray(dL_dzT, float)
    z1 = record.z_final.data
    mask = record.mask
    if m.config.kind == "homoode":
        cond = record.condition.data

        def F(z, t, c):
            return m.dynamics(z, t, c, mask)
    else:
        cond = None

        def F(z, t, c):
            return m.dynamics(z, t, None, mask)

    params = dict(m.named_parameters("dyn."))
    return adjoint_solve(F, z1, upstream, cond, params, m.config.t0, m.config.t1, cfg or m.solver)


def grad_route_to_extractor(grad_x, m, x, params: Optional[Sequence[str]] = None):
    """Continue a condition gradient back through the extractor.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` maps each
    extractor parameter name to d<grad_x, g(x)>/d(param).  Parameters listed
    as frozen (``requires_grad`` False) get no entry.  For an identity
    extractor pass ``m=None``: the gradient goes straight to the input.
    """
    grad_x = np.asarray(grad_x, dtype=float)
    if m is None:
        return {}, grad_x.copy()
    names = [n for n, p in m.named_parameters("ext.") if p.requires_grad]
    if params is not None:
        names = [n for n in names if n in set(params)]
    srcs = [m.params[n] for n in names]
    with Tape() as tape:
        xt = Tensor(np.asarray(x, dtype=float), requires_grad=True)
        cond = m.extract(xt)
    grads = tape.gradient(cond, srcs + [xt], seed=grad_x)
    return dict(zip(names, grads[:-1])), grads[-1]
