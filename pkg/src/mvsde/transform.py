"""The map ``G(x) = x + alpha * x|x| * phi(x/c)`` that removes a drift jump at 0.

``phi(u) = (1 - u^2)^3`` on ``|u| <= 1`` and 0 outside, so ``G`` is the
identity off ``(-c, c)``. With ``bar_phi(x) = x|x| phi(x/c)`` and
``u = x/c``::

    bar_phi'(x)  = 2|x| (1-u^2)^2 (1-4u^2)
    bar_phi''(x) = 2 sign(x) (1-u^2) (1 - 17u^2 + 28u^4)

``bar_phi''`` jumps from -2 to +2 across zero. Everything here is closed
form and vectorised; the scalar entry points validate their arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDiffusionError, InversionError, SpecViolationError

DEFAULT_SAFETY = 0.9
DEFAULT_TOL = 1e-12
MAX_NEWTON_ITER = 100


@dataclass(frozen=True)
class TransformSpec:
    """Constant jump coefficient ``alpha`` and bump radius ``c``.

    Requires ``c > 0`` and ``c * |alpha| < 1``; then ``G' > 1/2`` everywhere.
    """

    alpha: float
    c: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.c)):
            raise ValueError("alpha and c must be finite")
        if self.c <= 0:
            raise ValueError(f"bump radius c must be positive, got {self.c}")
        if self.c * abs(self.alpha) >= 1:
            raise SpecViolationError(
                f"c*|alpha| = {self.c * abs(self.alpha):.6g} must be < 1"
            )


@dataclass(frozen=True)
class GeneralTransformSpec:
    """Bounds for a measure-dependent alpha and the radius ``c`` they admit.

    ``alpha_sup`` bounds ``|alpha(mu)|`` and ``dalpha_sup`` bounds
    ``|d_mu alpha(mu)(y)|``. Global invertibility of the particle map needs
    ``c < min(1, 1/(alpha_sup + dalpha_sup))``.
    """

    alpha_sup: float
    dalpha_sup: float
    c: float

    def __post_init__(self):
        if self.alpha_sup < 0 or self.dalpha_sup < 0:
            raise ValueError("alpha bounds must be non-negative")
        if not self.c > 0:
            raise ValueError(f"bump radius c must be positive, got {self.c}")
        total = self.alpha_sup + self.dalpha_sup
        bound = 1.0 if total == 0 else min(1.0, 1.0 / total)
        if self.c >= bound:
            raise SpecViolationError(
                f"c = {self.c:.6g} violates c < min(1, 1/(alpha_sup+dalpha_sup)) = {bound:.6g}"
            )

    def at(self, alpha_value: float) -> TransformSpec:
        """Freeze ``alpha`` to one value, checking it respects ``alpha_sup``."""
        check_alpha_value(alpha_value, self)
        return TransformSpec(float(alpha_value), self.c)


def check_alpha_value(alpha_value, gspec: GeneralTransformSpec) -> None:
    # 1e-12 slack absorbs rounding in alpha(mu) at its extremes
    if abs(alpha_value) > gspec.alpha_sup * (1 + 1e-12) + 1e-15:
        raise SpecViolationError(
            f"|alpha(mu)| = {abs(alpha_value):.6g} exceeds alpha_sup = {gspec.alpha_sup:.6g}"
        )


# -- bump function -----------------------------------------------------------

def phi_bar(x, c):
    x = np.asarray(x, dtype=float)
    u = x / c
    w = np.where(np.abs(u) < 1.0, 1.0 - u * u, 0.0)
    return x * np.abs(x) * w**3


def phi_bar_d1(x, c):
    x = np.asarray(x, dtype=float)
    u = x / c
    w = np.where(np.abs(u) < 1.0, 1.0 - u * u, 0.0)
    return 2.0 * np.abs(x) * w * w * (1.0 - 4.0 * u * u)


def phi_bar_d2(x, c, side=1):
    """Second derivative of ``bar_phi``; at exactly 0 returns the limit from ``side``."""
    x = np.asarray(x, dtype=float)
    u = x / c
    u2 = u * u
    w = np.where(np.abs(u) < 1.0, 1.0 - u2, 0.0)
    s = np.where(x > 0, 1.0, np.where(x < 0, -1.0, 1.0 if side >= 0 else -1.0))
    return 2.0 * s * w * (1.0 - 17.0 * u2 + 28.0 * u2 * u2)


def phi_bar_derivs(x: float, c: float, side: int = 1) -> tuple[float, float, float]:
    """Return ``(bar_phi, bar_phi', bar_phi'')`` at a scalar ``x``.

    ``side`` picks the one-sided limit of the second derivative at ``x = 0``
    (+1: from the right, the default; -1: from the left).
    """
    if not (math.isfinite(x) and math.isfinite(c)):
        raise ValueError("x and c must be finite")
    if c <= 0:
        raise ValueError(f"bump radius c must be positive, got {c}")
    return (
        float(phi_bar(x, c)),
        float(phi_bar_d1(x, c)),
        float(phi_bar_d2(x, c, side)),
    )


# -- alpha and c ---------------------------------------------------------------

def alpha_from_jump(b_left: float, b_right: float, sigma0: float) -> float:
    """Jump coefficient ``(b(0-) - b(0+)) / (2 sigma(0)^2)``."""
    if sigma0 == 0:
        raise DegenerateDiffusionError("sigma(0) = 0: the discontinuity cannot be removed")
    return (b_left - b_right) / (2.0 * sigma0 * sigma0)


def choose_c(alpha_sup: float, dalpha_sup: float = 0.0, safety: float = DEFAULT_SAFETY) -> float:
    """``safety * min(1, 1/(alpha_sup + dalpha_sup))``."""
    for name, v in (("alpha_sup", alpha_sup), ("dalpha_sup", dalpha_sup), ("safety", safety)):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite")
    if alpha_sup < 0 or dalpha_sup < 0:
        raise ValueError("alpha bounds must be non-negative")
    if not 0 < safety < 1:
        raise ValueError(f"safety must lie in (0, 1), got {safety}")
    total = alpha_sup + dalpha_sup
    if total == 0:
        return safety
    return safety * min(1.0, 1.0 / total)


def spec_for_alpha(alpha: float, safety: float = DEFAULT_SAFETY) -> TransformSpec:
    return TransformSpec(float(alpha), choose_c(abs(alpha), 0.0, safety))


def general_spec_for(alpha_sup: float, dalpha_sup: float, safety: float = DEFAULT_SAFETY) -> GeneralTransformSpec:
    return GeneralTransformSpec(alpha_sup, dalpha_sup, choose_c(alpha_sup, dalpha_sup, safety))


# -- G and its derivatives ---------------------------------------------------

def g_forward(x, spec: TransformSpec):
    return np.asarray(x, dtype=float) + spec.alpha * phi_bar(x, spec.c)


def g_deriv(x, spec: TransformSpec):
    return 1.0 + spec.alpha * phi_bar_d1(x, spec.c)


def g_second(x, spec: TransformSpec, side=1):
    return spec.alpha * phi_bar_d2(x, spec.c, side)


def g_forward_measure(x, alpha_value: float, gspec: GeneralTransformSpec):
    """``G(x, mu)`` given the already evaluated ``alpha_value = alpha(mu)``."""
    check_alpha_value(alpha_value, gspec)
    return np.asarray(x, dtype=float) + alpha_value * phi_bar(x, gspec.c)


def g_inverse(z, alpha: float, c: float, tol: float = DEFAULT_TOL):
    """Vectorised inverse of ``G`` for a fixed ``alpha``.

    Off the bump the inverse is the identity. Inside, Newton from ``z`` is
    safeguarded by a bracket that is bisected whenever a Newton iterate
    leaves it; ``G' > 1/2`` makes the fallback a floating-point guard only.
    Stops when ``|G(x) - z| <= tol`` for every entry.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    z = np.asarray(z, dtype=float)
    out = np.array(z, dtype=float, copy=True)
    if alpha == 0:
        return out
    inside = np.abs(z) < c
    if not inside.any():
        return out
    zi = z[inside]
    half = abs(alpha) * c * c  # |G(x) - x| <= |alpha| c^2
    lo = np.maximum(zi - half, -c)
    hi = np.minimum(zi + half, c)
    x = zi.copy()
    for _ in range(MAX_NEWTON_ITER):
        f = x + alpha * phi_bar(x, c) - zi
        active = np.abs(f) > tol
        if not active.any():
            break
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        step = x - f / (1.0 + alpha * phi_bar_d1(x, c))
        step = np.where((step < lo) | (step > hi), 0.5 * (lo + hi), step)
        x = np.where(active, step, x)
    else:
        worst = float(np.max(np.abs(x + alpha * phi_bar(x, c) - zi)))
        raise InversionError(
            f"G inversion did not reach tol={tol:g} in {MAX_NEWTON_ITER} iterations "
            f"(residual {worst:.3g}, alpha={alpha:g}, c={c:g})"
        )
    out[inside] = x
    return out


def g_inverse_scalar(z: float, spec: TransformSpec, tol: float = DEFAULT_TOL) -> float:
    return float(g_inverse(float(z), spec.alpha, spec.c, tol))


def g_deriv_sup_bound(spec: TransformSpec) -> float:
    """Strict bound ``c|alpha|/2`` on ``|G' - 1|``."""
    return 0.5 * spec.c * abs(spec.alpha)
