"""Empirical measures on the real line.

All reductions go through :func:`tree_sum`, a pairwise reduction with a fixed
split rule, so means and moments do not depend on how particle work was
scheduled.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import UnsupportedInputError

BRUTEFORCE_MAX_N = 8

# max over y of |d/dy y^2/(1+y^2)|, attained at y = 1/sqrt(3)
PSI_PRIME_SUP = 9.0 / (8.0 * math.sqrt(3.0))


def tree_sum(values, axis=-1):
    """Sum along ``axis`` by repeated adjacent pairing.

    Level k adds element ``2j`` to ``2j+1``; an odd tail is padded with an
    exact zero. The bracketing depends only on the length, never on thread
    count or memory layout.
    """
    a = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    if a.shape[-1] == 0:
        return np.zeros(a.shape[:-1])[()]
    while a.shape[-1] > 1:
        if a.shape[-1] % 2:
            pad = np.zeros(a.shape[:-1] + (1,))
            a = np.concatenate([a, pad], axis=-1)
        a = a[..., 0::2] + a[..., 1::2]
    return a[..., 0][()]


def tree_mean(values, axis=-1):
    a = np.asarray(values, dtype=float)
    return tree_sum(a, axis=axis) / a.shape[axis]


class EmpiricalMeasure:
    """Uniform probability measure on a finite sample of particle states.

    The sample array is copied and frozen, so a measure can be shared as a
    read-only snapshot between concurrent coefficient evaluations.
    """

    __slots__ = ("_samples", "_mean")

    def __init__(self, samples):
        x = np.array(samples, dtype=float).ravel()
        if x.size < 1:
            raise ValueError("an empirical measure needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("empirical measure samples must be finite")
        x.flags.writeable = False
        self._samples = x
        self._mean = None

    @property
    def samples(self) -> np.ndarray:
        return self._samples

    @property
    def n(self) -> int:
        return self._samples.size

    def __len__(self):
        return self._samples.size

    def __repr__(self):
        return f"EmpiricalMeasure(n={self.n})"

    def mean(self) -> float:
        if self._mean is None:
            self._mean = float(tree_mean(self._samples))
        return self._mean

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """Return the integral of a vectorised ``f`` against the measure."""
        return float(tree_mean(f(self._samples)))


def _as_measure(mu) -> EmpiricalMeasure:
    return mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)


def _transport_cost(d) -> float:
    return math.fsum((d * d).tolist()) / d.size


def w2_sorted(mu, nu) -> float:
    """Quadratic Wasserstein distance between two equal-size samples.

    For uniform weights on the line the optimal coupling matches order
    statistics, so W2 is the RMS gap between the sorted samples. The cost is
    summed with :func:`math.fsum`, which is correctly rounded and therefore
    independent of the order of the pairs.
    """
    mu, nu = _as_measure(mu), _as_measure(nu)
    if mu.n != nu.n:
        raise UnsupportedInputError(
            f"w2_sorted needs equal sample counts, got {mu.n} and {nu.n}"
        )
    d = np.sort(mu.samples) - np.sort(nu.samples)
    return math.sqrt(_transport_cost(d))


def w2_bruteforce(mu, nu) -> float:
    """W2 by exhaustive search over permutation couplings (test oracle).

    Birkhoff's theorem puts an optimal coupling of two uniform N-point
    measures at a permutation matrix, so the minimum over N! matchings is
    exact.
    """
    mu, nu = _as_measure(mu), _as_measure(nu)
    if mu.n != nu.n:
        raise UnsupportedInputError(
            f"w2_bruteforce needs equal sample counts, got {mu.n} and {nu.n}"
        )
    if mu.n > BRUTEFORCE_MAX_N:
        raise UnsupportedInputError(
            f"w2_bruteforce refuses N={mu.n} > {BRUTEFORCE_MAX_N}"
        )
    x, y = mu.samples, nu.samples
    best = math.inf
    for perm in itertools.permutations(range(mu.n)):
        best = min(best, _transport_cost(x - y[list(perm)]))
    return math.sqrt(best)


def empirical_moment(mu, p: int) -> float:
    """Mean of ``|x|**p`` over the sample."""
    if int(p) != p or p < 1:
        raise ValueError(f"moment order must be a positive integer, got {p!r}")
    mu = _as_measure(mu)
    return float(tree_mean(np.abs(mu.samples) ** int(p)))


def empirical_mean(mu) -> float:
    return _as_measure(mu).mean()


@dataclass(frozen=True)
class AlphaFunctional:
    """Jump coefficient as a functional of the measure, with L-derivatives.

    Callbacks take an :class:`EmpiricalMeasure` first. ``d_mu`` and
    ``dy_d_mu`` take an array of points ``y``; ``d2_mu`` takes two arrays
    ``y, yp`` of equal shape and is evaluated pointwise. All must be exact
    analytic derivatives; they feed the empirical-projection identities
    that turn measure derivatives into coordinate derivatives.
    """

    eval: Callable[[EmpiricalMeasure], float]
    d_mu: Callable[[EmpiricalMeasure, np.ndarray], np.ndarray]
    dy_d_mu: Callable[[EmpiricalMeasure, np.ndarray], np.ndarray]
    d2_mu: Callable[[EmpiricalMeasure, np.ndarray, np.ndarray], np.ndarray]
    alpha_sup: float
    dalpha_sup: float

    def __post_init__(self):
        if not (self.alpha_sup >= 0 and self.dalpha_sup >= 0):
            raise ValueError("alpha bounds must be non-negative")

    @property
    def is_constant(self) -> bool:
        return self.dalpha_sup == 0


def constant_alpha(alpha: float) -> AlphaFunctional:
    """Measure-independent alpha; every L-derivative vanishes."""
    alpha = float(alpha)

    def zeros(mu, y, yp=None):
        return np.zeros(np.shape(y))

    return AlphaFunctional(
        eval=lambda mu: alpha,
        d_mu=zeros,
        dy_d_mu=zeros,
        d2_mu=zeros,
        alpha_sup=abs(alpha),
        dalpha_sup=0.0,
    )


def _psi(y):
    return y * y / (1.0 + y * y)


def _dpsi(y):
    return 2.0 * y / (1.0 + y * y) ** 2


def _d2psi(y):
    return (2.0 - 6.0 * y * y) / (1.0 + y * y) ** 3


def sine_alpha(a0: float, a1: float) -> AlphaFunctional:
    """``alpha(mu) = a0 + a1 * sin(m)`` with ``m`` the mean of y^2/(1+y^2).

    The L-derivative is ``a1 cos(m) psi'(y)`` which vanishes at y = 0, and
    the second derivative in the measure is ``-a1 sin(m) psi'(y) psi'(y')``.
    """
    a0, a1 = float(a0), float(a1)

    def m_of(mu):
        return mu.integrate(_psi)

    def value(mu):
        return a0 + a1 * math.sin(m_of(mu))

    def d_mu(mu, y):
        return a1 * math.cos(m_of(mu)) * _dpsi(np.asarray(y, dtype=float))

    def dy_d_mu(mu, y):
        return a1 * math.cos(m_of(mu)) * _d2psi(np.asarray(y, dtype=float))

    def d2_mu(mu, y, yp):
        y = np.asarray(y, dtype=float)
        yp = np.asarray(yp, dtype=float)
        return -a1 * math.sin(m_of(mu)) * _dpsi(y) * _dpsi(yp)

    return AlphaFunctional(
        eval=value,
        d_mu=d_mu,
        dy_d_mu=dy_d_mu,
        d2_mu=d2_mu,
        alpha_sup=abs(a0) + abs(a1),
        dalpha_sup=abs(a1) * PSI_PRIME_SUP,
    )
