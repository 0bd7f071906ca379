"""Drift and diffusion descriptions consumed by the particle schemes.

Three families:

* :class:`DecomposableModel` -- ``b(x, mu) = b1(x) + b2(x, mu)`` with the
  jump confined to ``b1``, so the jump coefficient is a constant.
* :class:`GeneralModel` -- ``b(x, mu)`` jumps by a measure-dependent amount,
  described by an :class:`~mvsde.measure.AlphaFunctional`.
* :class:`NeuronalModel` -- a particle-native model evaluated on the whole
  state vector, used with the direct scheme only.

Model callables are vectorised: ``b1(x)``, ``sigma(x)`` take arrays, and
``b2(x, mu)``, ``b(x, mu)`` take an array and an
:class:`~mvsde.measure.EmpiricalMeasure`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DegenerateDiffusionError, ParameterDomainError
from .measure import AlphaFunctional, EmpiricalMeasure, constant_alpha, sine_alpha, tree_sum
from .transform import alpha_from_jump

LIMIT_PROBE = 1e-8
LIMIT_TOL = 1e-6
ALPHA_CONSISTENCY_TOL = 1e-12


def jump_drift(b, sigma_sq, alpha, d1, d2):
    """``(1 + alpha bar_phi') b + alpha bar_phi'' sigma^2 / 2``.

    Shared by every transformed-drift evaluation so the constant and
    measure-dependent paths round identically.
    """
    return (1.0 + alpha * d1) * b + 0.5 * alpha * d2 * sigma_sq


def _measure_of(x, mu):
    return EmpiricalMeasure(x) if mu is None else mu


def _check_limit(name, value, limit):
    if not abs(value - limit) <= LIMIT_TOL * max(1.0, abs(limit)):
        raise ParameterDomainError(
            f"{name} = {limit!r} does not match the drift limit {value!r}"
        )


@dataclass(frozen=True, eq=False)
class DecomposableModel:
    """``dX = (b1(X) + b2(X, mu)) dt + sigma(X) dW`` with a jump of ``b1`` at 0."""

    b1: Callable[[np.ndarray], np.ndarray]
    b1_left0: float
    b1_right0: float
    b2: Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        s0 = float(self.sigma(np.array([0.0]))[0])
        if s0 == 0:
            raise DegenerateDiffusionError("sigma(0) = 0")
        probe = np.array([-LIMIT_PROBE, LIMIT_PROBE])
        left, right = np.asarray(self.b1(probe), dtype=float)
        _check_limit("b1_left0", left, self.b1_left0)
        _check_limit("b1_right0", right, self.b1_right0)
        object.__setattr__(self, "_sigma0", s0)

    @property
    def sigma0(self) -> float:
        return self._sigma0

    @property
    def alpha(self) -> float:
        return alpha_from_jump(self.b1_left0, self.b1_right0, self._sigma0)

    def drift(self, x, mu=None):
        """Untransformed drift at every state; ``mu`` defaults to the measure of ``x``."""
        x = np.asarray(x, dtype=float)
        return self.b1(x) + self.b2(x, _measure_of(x, mu))

    def diffusion(self, x):
        return np.asarray(self.sigma(np.asarray(x, dtype=float)), dtype=float)

    def drift_right_at_zero(self, x, mu=None):
        """Drift with states exactly at 0 read from the right.

        Paired with the right limit of ``bar_phi''`` this gives the
        continuous value of the transformed drift at the origin.
        """
        x = np.asarray(x, dtype=float)
        b1 = np.where(x == 0, self.b1_right0, self.b1(x))
        return b1 + self.b2(x, _measure_of(x, mu))

    def as_general(self) -> "GeneralModel":
        """View as a :class:`GeneralModel` with constant alpha."""
        b1, b2 = self.b1, self.b2

        def b(x, mu):
            return b1(x) + b2(x, mu)

        zero = np.zeros(1)
        return GeneralModel(
            b=b,
            b_left0=lambda mu: self.b1_left0 + float(b2(zero, mu)[0]),
            b_right0=lambda mu: self.b1_right0 + float(b2(zero, mu)[0]),
            sigma=self.sigma,
            alpha=constant_alpha(self.alpha),
            sigma_bound=None,
        )


@dataclass(frozen=True, eq=False)
class GeneralModel:
    """``dX = b(X, mu) dt + sigma(X) dW`` with a measure-dependent jump at 0."""

    b: Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]
    b_left0: Callable[[EmpiricalMeasure], float]
    b_right0: Callable[[EmpiricalMeasure], float]
    sigma: Callable[[np.ndarray], np.ndarray]
    alpha: AlphaFunctional
    sigma_bound: float | None = None

    def __post_init__(self):
        s0 = float(self.sigma(np.array([0.0]))[0])
        if s0 == 0:
            raise DegenerateDiffusionError("sigma(0) = 0")
        if self.sigma_bound is not None and abs(s0) > self.sigma_bound:
            raise ParameterDomainError("|sigma(0)| exceeds sigma_bound")
        object.__setattr__(self, "_sigma0", s0)
        delta = EmpiricalMeasure([0.0])
        probe = np.array([-LIMIT_PROBE, LIMIT_PROBE])
        left, right = np.asarray(self.b(probe, delta), dtype=float)
        _check_limit("b_left0", left, self.b_left0(delta))
        _check_limit("b_right0", right, self.b_right0(delta))
        self.check_alpha(delta)

    @property
    def sigma0(self) -> float:
        return self._sigma0

    def check_alpha(self, mu) -> float:
        """Return ``|alpha(mu) - jump(mu)/(2 sigma(0)^2)|``; raise past 1e-12."""
        mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)
        expected = alpha_from_jump(self.b_left0(mu), self.b_right0(mu), self._sigma0)
        gap = abs(self.alpha.eval(mu) - expected)
        if gap > ALPHA_CONSISTENCY_TOL:
            raise ParameterDomainError(
                f"alpha functional disagrees with the drift jump by {gap:.3g}"
            )
        return gap

    def drift(self, x, mu=None):
        x = np.asarray(x, dtype=float)
        return self.b(x, _measure_of(x, mu))

    def diffusion(self, x):
        return np.asarray(self.sigma(np.asarray(x, dtype=float)), dtype=float)

    def drift_right_at_zero(self, x, mu=None):
        x = np.asarray(x, dtype=float)
        mu = _measure_of(x, mu)
        b = self.b(x, mu)
        if np.any(x == 0):
            b = np.where(x == 0, self.b_right0(mu), b)
        return b


@dataclass(frozen=True, eq=False)
class NeuronalModel:
    """Action potentials of neurons at fixed locations, read modulo 2.

    Charging neurons (``v mod 2`` in ``[0, 1]``) leak at rate ``lambda_hat``
    and receive ``sin(|xi_i - xi_j|) / N`` from every firing neuron
    (``v_j mod 2`` in ``[1, 1 + kappa]``); recovering neurons drift at unit
    speed. States stay unwrapped in R.
    """

    lambda_hat: float
    kappa: float
    epsilon: float
    sigma_variant: str
    locations: np.ndarray
    kernel: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.lambda_hat >= 0:
            raise ParameterDomainError("lambda_hat must be >= 0")
        if not 0 < self.kappa < 1:
            raise ParameterDomainError("kappa must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ParameterDomainError("epsilon must be > 0")
        if self.sigma_variant not in ("constant", "affine"):
            raise ParameterDomainError("sigma_variant must be 'constant' or 'affine'")
        xi = np.array(self.locations, dtype=float)
        if xi.ndim != 2 or xi.shape[1] != 3:
            raise ParameterDomainError("locations must have shape (N, 3)")
        xi.flags.writeable = False
        diff = xi[:, None, :] - xi[None, :, :]
        theta = np.sin(np.sqrt(np.sum(diff * diff, axis=-1)))
        theta.flags.writeable = False
        object.__setattr__(self, "locations", xi)
        object.__setattr__(self, "kernel", theta)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def noise_floor(self) -> float:
        return math.sqrt(2.0 * self.epsilon)

    def drift(self, v, mu=None):
        vm = wrap2(v)
        charging = vm <= 1.0
        firing = (vm >= 1.0) & (vm <= 1.0 + self.kappa)
        out = np.where(charging, -self.lambda_hat * vm, 1.0)
        if firing.any() and charging.any():
            rows = np.flatnonzero(charging)
            block = self.kernel[np.ix_(rows, np.flatnonzero(firing))]
            out[rows] += tree_sum(block, axis=1) / vm.size
        return out

    def diffusion(self, v):
        vm = wrap2(v)
        if self.sigma_variant == "constant":
            return np.full(vm.shape, self.noise_floor)
        return self.noise_floor + vm


def wrap2(v):
    """``v mod 2`` in ``[0, 2)``, guarding the rounding of tiny negatives to 2."""
    vm = np.mod(np.asarray(v, dtype=float), 2.0)
    return np.where(vm >= 2.0, 0.0, vm)


def neuronal_drift(i: int, V, model: NeuronalModel) -> float:
    """Drift of neuron ``i`` given the full state snapshot ``V``."""
    vm = wrap2(V)
    vi = vm[i]
    if vi > 1.0:
        return 1.0
    out = -model.lambda_hat * vi
    firing = np.flatnonzero((vm >= 1.0) & (vm <= 1.0 + model.kappa))
    if firing.size:
        out += float(tree_sum(model.kernel[i, firing])) / vm.size
    return float(out)


def neuronal_diffusion(v: float, model: NeuronalModel) -> float:
    return float(model.diffusion(np.array([v]))[0])


# -- built-in models -----------------------------------------------------------

def systemic_risk_model(a: float = 1.0, kappa1: float = -0.5, kappa2: float = 0.5,
                        sigma0: float = 0.7) -> DecomposableModel:
    """Mean reversion with bang-bang borrowing, diffusion ``sigma0 + x``.

    ``b1 = kappa1`` on ``x <= 0`` and ``kappa2`` on ``x > 0``; ``b2(x, mu) =
    a (mean(mu) - x)``.
    """
    if sigma0 == 0:
        raise DegenerateDiffusionError("sigma0 = 0 makes the diffusion vanish at the jump")
    problems = []
    if not kappa1 < 0:
        problems.append(f"kappa1 must be < 0, got {kappa1}")
    if not kappa2 > 0:
        problems.append(f"kappa2 must be > 0, got {kappa2}")
    if not sigma0 > 0:
        problems.append(f"sigma0 must be > 0, got {sigma0}")
    if not a >= 0:
        problems.append(f"a must be >= 0, got {a}")
    if problems:
        raise ParameterDomainError("; ".join(problems))
    k1, k2, a, s0 = float(kappa1), float(kappa2), float(a), float(sigma0)

    def b1(x):
        return np.where(x <= 0, k1, k2)

    def b2(x, mu):
        return a * (mu.mean() - x)

    def sigma(x):
        return s0 + x

    return DecomposableModel(b1=b1, b1_left0=k1, b1_right0=k2, b2=b2, sigma=sigma)


def modulated_jump_model(a: float = 1.0, k1: float = -0.25, k2: float = 0.15,
                         sigma0: float = 1.0) -> GeneralModel:
    """Mean reversion plus a jump whose size depends on the measure.

    ``b(x, mu) = a (mean - x) + kappa(mu) (1{x<=0} - 1{x>0})`` with
    ``kappa(mu) = k1 + k2 sin(m)`` and ``m`` the mean of ``y^2/(1+y^2)``;
    constant diffusion ``sigma0``. The jump coefficient is then
    ``kappa(mu) / sigma0^2``.
    """
    if sigma0 == 0:
        raise DegenerateDiffusionError("sigma0 = 0 makes the diffusion vanish at the jump")
    problems = []
    if not sigma0 > 0:
        problems.append(f"sigma0 must be > 0, got {sigma0}")
    if not a >= 0:
        problems.append(f"a must be >= 0, got {a}")
    for name, v in (("k1", k1), ("k2", k2)):
        if not math.isfinite(v):
            problems.append(f"{name} must be finite")
    if problems:
        raise ParameterDomainError("; ".join(problems))
    a, k1, k2, s0 = float(a), float(k1), float(k2), float(sigma0)
    s2 = s0 * s0
    alpha = sine_alpha(k1 / s2, k2 / s2)

    def kappa(mu):
        return alpha.eval(mu) * s2

    def b(x, mu):
        return a * (mu.mean() - x) + kappa(mu) * np.where(x <= 0, 1.0, -1.0)

    def sigma(x):
        return np.full(np.shape(x), s0)

    return GeneralModel(
        b=b,
        b_left0=lambda mu: a * mu.mean() + kappa(mu),
        b_right0=lambda mu: a * mu.mean() - kappa(mu),
        sigma=sigma,
        alpha=alpha,
        sigma_bound=abs(s0),
    )


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(key,))))


X0_STREAM = 1
LOCATION_STREAM = 2


def neuronal_model(n: int, seed: int, lambda_hat: float = 0.02, kappa: float = 0.01,
                   epsilon: float = 0.1, sigma_variant: str = "constant",
                   xi_mean=None, xi_cov=None) -> NeuronalModel:
    """Neurons at ``N(xi_mean, xi_cov)`` locations (default standard normal)."""
    mean = np.zeros(3) if xi_mean is None else np.asarray(xi_mean, dtype=float)
    cov = np.eye(3) if xi_cov is None else np.asarray(xi_cov, dtype=float)
    if mean.shape != (3,) or cov.shape != (3, 3):
        raise ParameterDomainError("xi_mean must have 3 entries and xi_cov be 3x3")
    rng = _stream(seed, LOCATION_STREAM)
    xi = rng.multivariate_normal(mean, cov, size=n, method="cholesky")
    return NeuronalModel(lambda_hat, kappa, epsilon, sigma_variant, xi)


class ModelInstance(NamedTuple):
    model: object
    x0: np.ndarray
    name: str
    params: dict


MODEL_DEFAULTS = {
    "systemic_risk": {"a": 1.0, "kappa1": -0.5, "kappa2": 0.5, "sigma0": 0.7, "x0": 0.0},
    "neuronal": {
        "lambda_hat": 0.02, "kappa": 0.01, "epsilon": 0.1, "sigma_variant": "constant",
        "eta_mean": 1.0, "eta_sd": 2.0, "xi_mean": [0.0, 0.0, 0.0],
        "xi_cov": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    },
    "modulated_jump": {"a": 1.0, "k1": -0.25, "k2": 0.15, "sigma0": 1.0,
                       "x0_mean": 0.0, "x0_sd": 0.5},
}


def build_model(name: str, params: dict | None, n_particles: int, seed: int) -> ModelInstance:
    """Construct a built-in model and its initial states.

    Initial draws use their own counter-based stream, independent of the
    Brownian increments.
    """
    if name not in MODEL_DEFAULTS:
        raise ParameterDomainError(f"unknown model {name!r}")
    if n_particles < 1:
        raise ParameterDomainError("n_particles must be >= 1")
    unknown = set(params or {}) - set(MODEL_DEFAULTS[name])
    if unknown:
        raise ParameterDomainError(f"unknown {name} parameters: {sorted(unknown)}")
    p = {**MODEL_DEFAULTS[name], **(params or {})}
    rng = _stream(seed, X0_STREAM)
    if name == "systemic_risk":
        model = systemic_risk_model(p["a"], p["kappa1"], p["kappa2"], p["sigma0"])
        x0 = np.full(n_particles, float(p["x0"]))
    elif name == "modulated_jump":
        model = modulated_jump_model(p["a"], p["k1"], p["k2"], p["sigma0"])
        if not p["x0_sd"] >= 0:
            raise ParameterDomainError("x0_sd must be >= 0")
        x0 = p["x0_mean"] + p["x0_sd"] * rng.standard_normal(n_particles)
    else:
        model = neuronal_model(n_particles, seed, p["lambda_hat"], p["kappa"], p["epsilon"],
                               p["sigma_variant"], p["xi_mean"], p["xi_cov"])
        if not p["eta_sd"] >= 0:
            raise ParameterDomainError("eta_sd must be >= 0")
        x0 = wrap2(p["eta_mean"] + p["eta_sd"] * rng.standard_normal(n_particles))
    return ModelInstance(model, np.asarray(x0, dtype=float), name, p)
