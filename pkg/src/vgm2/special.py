"""Log-gamma family numerics on positive reals.

These are implemented locally (rather than borrowed from scipy) because the
autodiff tape registers them as primitive ops with exact derivative
pairings: lgamma' = digamma, digamma' = trigamma.  All three accept scalars
or arrays and return float64 ndarrays.
"""

from __future__ import annotations

import numpy as np

# Lanczos approximation, g = 7, 9 coefficients.
_LANCZOS_G = 7.0
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class DomainError(ValueError):
    """Argument outside the supported domain (x > 0)."""

    def __init__(self, fn: str, value) -> None:
        super().__init__(f"{fn} requires positive arguments, got min value {value!r}")


def _positive(fn: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(arr > 0.0):
        raise DomainError(fn, float(np.min(arr)))
    return arr


def lgamma(x) -> np.ndarray:
    """Natural log of the gamma function for x > 0 (Lanczos, g=7, n=9)."""
    x = _positive("lgamma", x)
    z = x - 1.0
    series = np.full_like(z, _LANCZOS[0])
    for i, c in enumerate(_LANCZOS[1:], start=1):
        series = series + c / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)


def digamma(x) -> np.ndarray:
    """psi(x) for x > 0 via the shift recurrence plus an asymptotic tail."""
    x = _positive("digamma", x)
    x = np.array(x, dtype=np.float64, copy=True)
    acc = np.zeros_like(x)
    # psi(x) = psi(x + 1) - 1/x; ten shifts suffice to reach x >= 10
    for _ in range(10):
        small = x < 10.0
        if not small.any():
            break
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
    inv = 1.0 / x
    u = inv * inv
    tail = u * (
        1.0 / 12.0
        - u * (1.0 / 120.0 - u * (1.0 / 252.0 - u * (1.0 / 240.0 - u * (1.0 / 132.0 - u * (691.0 / 32760.0)))))
    )
    return np.log(x) - 0.5 * inv - tail + acc


def trigamma(x) -> np.ndarray:
    """psi'(x) for x > 0, same recurrence-plus-asymptotics scheme."""
    x = _positive("trigamma", x)
    x = np.array(x, dtype=np.float64, copy=True)
    acc = np.zeros_like(x)
    for _ in range(10):
        small = x < 10.0
        if not small.any():
            break
        acc[small] += 1.0 / (x[small] * x[small])
        x[small] += 1.0
    inv = 1.0 / x
    u = inv * inv
    tail = inv * u * (
        1.0 / 6.0 - u * (1.0 / 30.0 - u * (1.0 / 42.0 - u * (1.0 / 30.0 - u * (5.0 / 66.0))))
    )
    return inv + 0.5 * u + tail + acc
