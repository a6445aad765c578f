"""Built-in scalar equations r(z) = 0, applied elementwise to vector z.

Names accepted by :func:`parse_equation`:

* ``paper-test``: 2z + exp(-0.1 z) + 5 sin(4z) - 16 (one root is 6.4217)
* ``cubic``: z^3 + z - 10 (single real root z = 2)
* ``linear:c=<value>``: z - c
* ``poly:a0,a1,...``: a0 + a1 z + a2 z^2 + ... (ascending powers)
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .tensor import Tensor


class EquationError(ValueError):
    pass


def _t(z) -> Tensor:
    return z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=float))


def sine_equation(z):
    z = _t(z)
    return 2.0 * z + (z * -0.1).exp() + 5.0 * (z * 4.0).sin() - 16.0


def sine_equation_numpy(z):
    z = np.asarray(z, dtype=float)
    return 2 * z + np.exp(-0.1 * z) + 5 * np.sin(4 * z) - 16


def cubic(z):
    z = _t(z)
    return z * z * z + z - 10.0


def linear(c: float) -> Callable:
    def r(z):
        return _t(z) - c

    return r


def polynomial(coeffs) -> Callable:
    coeffs = [float(a) for a in coeffs]
    if not coeffs:
        raise EquationError("polynomial needs at least one coefficient")

    def r(z):
        z = _t(z)
        out = z * 0.0 + coeffs[-1]
        for a in reversed(coeffs[:-1]):  # Horner
            out = out * z + a
        return out

    return r


BUILTINS: Dict[str, Callable] = {"paper-test": sine_equation, "cubic": cubic}


def parse_equation(text: str) -> Callable:
    text = text.strip()
    if text in BUILTINS:
        return BUILTINS[text]
    head, _, rest = text.partition(":")
    try:
        if head == "linear":
            key, _, val = rest.partition("=")
            if key.strip() != "c":
                raise EquationError("linear equations take 'linear:c=<value>'")
            return linear(float(val))
        if head == "poly":
            return polynomial(rest.split(","))
    except ValueError as exc:
        if isinstance(exc, EquationError):
            raise
        raise EquationError(f"bad equation text {text!r}: {exc}") from exc
    raise EquationError(f"unknown equation {text!r}; builtins are {sorted(BUILTINS)}, "
                        "'linear:c=<v>' or 'poly:a0,a1,...'")
