"""Brownian lattices and the particle time-stepping schemes.

Three schemes share one driver shape: hold the states of all particles,
build the empirical measure once per step (the synchronisation point), then
update every particle from that snapshot.

* ``scheme2_direct`` -- Euler-Maruyama on the particle system itself.
* ``scheme1_decomposable`` -- Euler-Maruyama on ``Z = G(X)`` for a constant
  jump coefficient, mapping back through ``G^{-1}`` every step.
* ``scheme1_general_hybrid`` -- explicit step on ``Z = G(X, mu)`` followed
  by an implicit fixed-point solve for ``X``, for a measure-dependent jump.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DivergedSimulationError, ImplicitStepError, LatticeTooLargeError
from .measure import EmpiricalMeasure, tree_sum
from .model import DecomposableModel, GeneralModel, NeuronalModel, jump_drift
from .transform import (
    DEFAULT_SAFETY,
    GeneralTransformSpec,
    TransformSpec,
    check_alpha_value,
    g_forward,
    g_forward_measure,
    g_inverse,
    general_spec_for,
    phi_bar,
    phi_bar_d1,
    phi_bar_d2,
    spec_for_alpha,
)

LEVEL_MAX_GUARD = 26
DEFAULT_MAX_BYTES = 2 * 1024**3
BROWNIAN_STREAM = 0
MIN_CHUNK = 256
THREADS_ENV = "MVSDE_THREADS"

SCHEMES = ("scheme1_decomposable", "scheme2_direct", "scheme1_general_hybrid")


# -- Brownian lattice ---------------------------------------------------------

def _steps_at(T: float, level: int) -> int:
    steps = T * 2**level
    if not (T > 0 and float(steps).is_integer()):
        raise ValueError(f"T * 2**level must be a positive integer, got T={T}, level={level}")
    return int(steps)


@dataclass(frozen=True, eq=False)
class BrownianLattice:
    """Finest-level increments, shape ``(steps, n_particles)``, read-only."""

    seed: int
    n_particles: int
    level_max: int
    T: float
    increments: np.ndarray = field(repr=False)

    @property
    def h_max(self) -> float:
        return 2.0**-self.level_max

    def steps(self, level: int) -> int:
        return _steps_at(self.T, level)


def lattice_bytes(n_particles: int, level_max: int, T: float = 1.0) -> int:
    return _steps_at(T, level_max) * n_particles * 8


def brownian_lattice(seed: int, n_particles: int, level_max: int, T: float = 1.0,
                     max_bytes: int = DEFAULT_MAX_BYTES) -> BrownianLattice:
    """Gaussian increments of variance ``h = 2**-level_max`` over ``T * 2**level_max`` steps.

    Particle ``i`` draws from its own Philox stream keyed by ``(seed, i)``,
    so each column is fixed by the seed and particle index alone.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if not 0 <= level_max <= LEVEL_MAX_GUARD:
        raise LatticeTooLargeError(
            f"level_max={level_max} outside [0, {LEVEL_MAX_GUARD}]",
            required_bytes=lattice_bytes(n_particles, max(level_max, 0), T),
        )
    steps = _steps_at(T, level_max)
    need = steps * n_particles * 8
    if need > max_bytes:
        raise LatticeTooLargeError(
            f"lattice needs {need} bytes ({steps} steps x {n_particles} particles), "
            f"limit is {max_bytes}",
            required_bytes=need,
        )
    scale = math.sqrt(T / steps)
    inc = np.empty((steps, n_particles))
    for i in range(n_particles):
        ss = np.random.SeedSequence(seed, spawn_key=(BROWNIAN_STREAM, i))
        inc[:, i] = np.random.Generator(np.random.Philox(ss)).standard_normal(steps)
    inc *= scale
    inc.flags.writeable = False
    return BrownianLattice(int(seed), int(n_particles), int(level_max), float(T), inc)


def coarsen(lattice: BrownianLattice, level: int) -> np.ndarray:
    """Increments at ``level``: adjacent pairs summed ``level_max - level`` times."""
    if not 0 <= level <= lattice.level_max:
        raise ValueError(f"level {level} outside [0, {lattice.level_max}]")
    inc = lattice.increments
    for _ in range(lattice.level_max - level):
        inc = inc[0::2] + inc[1::2]
    return inc


# -- configuration and results -------------------------------------------------

@dataclass(frozen=True)
class SchemeConfig:
    scheme: str
    level: int
    n_particles: int
    T: float = 1.0
    inversion_tol: float = 1e-12
    implicit_tol: float = 1e-10
    implicit_max_iter: int = 50
    safety: float = DEFAULT_SAFETY
    threads: int | None = None
    path_stride: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.implicit_max_iter < 1:
            raise ValueError("implicit_max_iter must be >= 1")
        if self.path_stride < 1:
            raise ValueError("path_stride must be >= 1")
        if not (self.inversion_tol > 0 and self.implicit_tol > 0):
            raise ValueError("tolerances must be positive")

    def check(self, lattice: BrownianLattice) -> None:
        if self.level > lattice.level_max:
            raise ValueError(f"level {self.level} exceeds lattice level_max {lattice.level_max}")
        if self.n_particles != lattice.n_particles:
            raise ValueError("n_particles does not match the lattice")
        if self.T != lattice.T:
            raise ValueError("T does not match the lattice")


@dataclass(frozen=True, eq=False)
class ParticlePaths:
    """States recorded at ``steps`` (every ``stride`` steps plus the last)."""

    states: np.ndarray
    steps: np.ndarray
    h: float
    T: float
    level: int
    stride: int = 1
    diagnostics: dict = field(default_factory=dict)

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.h


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(threads))


class _Recorder:
    def __init__(self, x0, n_steps, stride):
        self.stride = stride
        self.steps = list(range(0, n_steps + 1, stride))
        if self.steps[-1] != n_steps:
            self.steps.append(n_steps)
        self.states = np.empty((len(self.steps), x0.size))
        self.states[0] = x0
        self._slot = 1

    def record(self, n, x):
        if self._slot < len(self.steps) and self.steps[self._slot] == n:
            self.states[self._slot] = x
            self._slot += 1

    def paths(self, h, T, level, diagnostics):
        return ParticlePaths(self.states, np.asarray(self.steps), h, T, level,
                             self.stride, diagnostics)


def _guard(x, n):
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise DivergedSimulationError(
            f"non-finite state for particle {bad} at step {n}", step=n
        )


class _ParticleMap:
    """Apply an elementwise kernel over contiguous particle chunks.

    Each chunk is computed exactly as it would be in one call, so results
    do not depend on the thread count.
    """

    def __init__(self, threads):
        self.threads = threads
        self.pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def __call__(self, fn, x, *args):
        if self.pool is None or x.size < 2 * MIN_CHUNK:
            return fn(x, *args)
        n_chunks = min(self.threads, x.size // MIN_CHUNK)
        bounds = np.linspace(0, x.size, n_chunks + 1).astype(int)
        futures = [self.pool.submit(fn, x[lo:hi], *args) for lo, hi in zip(bounds[:-1], bounds[1:])]
        return np.concatenate([f.result() for f in futures])

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _prepare(lattice, cfg, x0):
    cfg.check(lattice)
    x0 = np.array(x0, dtype=float).ravel()
    if x0.size != cfg.n_particles:
        raise ValueError("x0 length does not match n_particles")
    _guard(x0, 0)
    inc = coarsen(lattice, cfg.level)
    return x0, inc, cfg.T / inc.shape[0]


# -- Scheme 2 ----------------------------------------------------------------

def scheme2_run(model, lattice: BrownianLattice, cfg: SchemeConfig, x0) -> ParticlePaths:
    """Direct Euler-Maruyama: ``X += b(X, mu_n) h + sigma(X) dW``."""
    x, inc, h = _prepare(lattice, cfg, x0)
    rec = _Recorder(x, inc.shape[0], cfg.path_stride)
    for n in range(inc.shape[0]):
        x = x + model.drift(x) * h + model.diffusion(x) * inc[n]
        _guard(x, n + 1)
        rec.record(n + 1, x)
    return rec.paths(h, cfg.T, cfg.level, {"scheme": "scheme2_direct"})


# -- Scheme 1, constant alpha ---------------------------------------------------

class DecomposableCoeffs(NamedTuple):
    drift: np.ndarray
    diffusion: np.ndarray


def decomposable_coeffs(x, model: DecomposableModel, spec: TransformSpec) -> DecomposableCoeffs:
    """``b~`` and ``sigma~`` at the states ``x`` under the measure of ``x``."""
    mu = EmpiricalMeasure(x)
    sig = model.diffusion(x)
    if spec.alpha == 0:
        return DecomposableCoeffs(model.drift(x, mu), sig)
    d1 = phi_bar_d1(x, spec.c)
    d2 = phi_bar_d2(x, spec.c)
    b = model.drift_right_at_zero(x, mu)
    return DecomposableCoeffs(
        jump_drift(b, sig * sig, spec.alpha, d1, d2),
        (1.0 + spec.alpha * d1) * sig,
    )


def scheme1_decomposable_run(model: DecomposableModel, lattice: BrownianLattice,
                             cfg: SchemeConfig, x0) -> ParticlePaths:
    """Euler-Maruyama for ``Z = G(X)``; the measure is that of ``G^{-1}(Z)``."""
    x, inc, h = _prepare(lattice, cfg, x0)
    spec = spec_for_alpha(model.alpha, cfg.safety)
    z = g_forward(x, spec)
    rec = _Recorder(x, inc.shape[0], cfg.path_stride)
    with _ParticleMap(resolve_threads(cfg.threads)) as pmap:
        for n in range(inc.shape[0]):
            co = decomposable_coeffs(x, model, spec)
            z = z + co.drift * h + co.diffusion * inc[n]
            _guard(z, n + 1)
            x = pmap(g_inverse, z, spec.alpha, spec.c, cfg.inversion_tol)
            rec.record(n + 1, x)
    return rec.paths(h, cfg.T, cfg.level,
                     {"scheme": "scheme1_decomposable", "alpha": spec.alpha, "c": spec.c})


# -- Scheme 1, measure-dependent alpha (hybrid) -----------------------------------

class TransformedCoeffs(NamedTuple):
    """Drift ``B`` and the diffusion matrix in factored form.

    ``Sigma[i, j] = diag[i] delta_ij + phibar[i] * weights[j]``.
    """

    drift: np.ndarray
    diag: np.ndarray
    weights: np.ndarray
    phibar: np.ndarray

    def noise(self, dW):
        """``Sigma @ dW`` in O(N)."""
        return self.diag * dW + self.phibar * tree_sum(self.weights * dW)

    def dense_diffusion(self):
        return np.diag(self.diag) + np.outer(self.phibar, self.weights)


def transformed_coeffs(x, model: GeneralModel, gspec: GeneralTransformSpec) -> TransformedCoeffs:
    """Particle drift and diffusion after the measure-dependent transform.

    With ``a = alpha(mu)`` and ``mu`` the measure of ``x``::

        B_i = (1 + a phi'_i) b_i + a phi''_i s_i^2 / 2
              + phi_i (S1 + S2 + S3) + d_mu alpha(x_i) phi'_i s_i^2 / N

    where the shared sums are ``S1 = mean(d_mu alpha(x_k) b_k)``,
    ``S2 = mean(dy d_mu alpha(x_k) s_k^2) / 2`` and
    ``S3 = mean(d2_mu alpha(x_k, x_k) s_k^2) / (2N)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    mu = EmpiricalMeasure(x)
    af = model.alpha
    a = af.eval(mu)
    check_alpha_value(a, gspec)
    c = gspec.c
    p0 = phi_bar(x, c)
    p1 = phi_bar_d1(x, c)
    p2 = phi_bar_d2(x, c)
    b = model.drift_right_at_zero(x, mu)
    sig = model.diffusion(x)
    s2 = sig * sig
    dmu = af.d_mu(mu, x)
    s1 = tree_sum(dmu * b) / n
    s2_sum = tree_sum(af.dy_d_mu(mu, x) * s2) / (2 * n)
    s3 = tree_sum(af.d2_mu(mu, x, x) * s2) / (2 * n * n)
    drift = jump_drift(b, s2, a, p1, p2) + p0 * (s1 + s2_sum + s3) + dmu * p1 * s2 / n
    return TransformedCoeffs(drift, (1.0 + a * p1) * sig, dmu * sig / n, p0)


def _nanmax(a, b):
    if math.isnan(a):
        return b
    return a if math.isnan(b) else max(a, b)


class InverseResult(NamedTuple):
    x: np.ndarray
    iterations: int
    contraction: float


def invert_vector_transform(xt, prev, model: GeneralModel, gspec: GeneralTransformSpec,
                            tol: float = 1e-10, budget: int = 50,
                            inversion_tol: float = 1e-12, pmap=None) -> InverseResult:
    """Solve ``x_i = G^{-1}(xt_i, alpha(mu^x))`` by fixed-point iteration from ``prev``.

    The contraction is the largest ratio of successive updates, measured
    only while updates are well above the inversion noise (NaN if no ratio
    was measurable).
    """
    pmap = pmap or (lambda fn, z, *args: fn(z, *args))
    xt = np.asarray(xt, dtype=float)
    af = model.alpha
    if af.is_constant:
        a = af.eval(EmpiricalMeasure(prev))
        check_alpha_value(a, gspec)
        return InverseResult(pmap(g_inverse, xt, a, gspec.c, inversion_tol), 1, math.nan)
    x = np.asarray(prev, dtype=float)
    floor = 1000.0 * inversion_tol
    last = math.inf
    worst = math.nan
    for k in range(1, budget + 1):
        a = af.eval(EmpiricalMeasure(x))
        check_alpha_value(a, gspec)
        xn = pmap(g_inverse, xt, a, gspec.c, inversion_tol)
        delta = float(np.max(np.abs(xn - x)))
        if math.isfinite(last) and last > floor:
            ratio = delta / last
            worst = _nanmax(worst, ratio)
        x, last = xn, delta
        if delta <= tol:
            return InverseResult(x, k, worst)
    raise ImplicitStepError(
        f"implicit inversion did not converge in {budget} iterations "
        f"(last update {last:.3g}, contraction {worst:.3g}); c may be too large",
        contraction=worst,
    )


def scheme1_general_run(model: GeneralModel, lattice: BrownianLattice,
                        cfg: SchemeConfig, x0) -> ParticlePaths:
    """Explicit step on the transformed states, implicit solve for the states."""
    x, inc, h = _prepare(lattice, cfg, x0)
    af = model.alpha
    gspec = general_spec_for(af.alpha_sup, af.dalpha_sup, cfg.safety)
    xt = g_forward_measure(x, af.eval(EmpiricalMeasure(x)), gspec)
    rec = _Recorder(x, inc.shape[0], cfg.path_stride)
    iters = np.zeros(inc.shape[0], dtype=int)
    contraction = math.nan
    with _ParticleMap(resolve_threads(cfg.threads)) as pmap:
        for n in range(inc.shape[0]):
            co = transformed_coeffs(x, model, gspec)
            xt = xt + co.drift * h + co.noise(inc[n])
            _guard(xt, n + 1)
            try:
                res = invert_vector_transform(xt, x, model, gspec, cfg.implicit_tol,
                                              cfg.implicit_max_iter, cfg.inversion_tol, pmap)
            except ImplicitStepError as exc:
                raise ImplicitStepError(f"step {n + 1}: {exc}", step=n + 1,
                                        contraction=exc.contraction) from exc
            x = res.x
            iters[n] = res.iterations
            contraction = _nanmax(contraction, res.contraction)
            rec.record(n + 1, x)
    diag = {
        "scheme": "scheme1_general_hybrid",
        "c": gspec.c,
        "max_iterations": int(iters.max()) if iters.size else 0,
        "iterations": iters,
        "contraction": contraction,
    }
    return rec.paths(h, cfg.T, cfg.level, diag)


_RUNNERS = {
    "scheme2_direct": scheme2_run,
    "scheme1_decomposable": scheme1_decomposable_run,
    "scheme1_general_hybrid": scheme1_general_run,
}

_COMPATIBLE = {
    "scheme2_direct": (DecomposableModel, GeneralModel, NeuronalModel),
    "scheme1_decomposable": (DecomposableModel,),
    "scheme1_general_hybrid": (GeneralModel,),
}


def _particle_native(model) -> bool:
    return callable(getattr(model, "drift", None)) and callable(getattr(model, "diffusion", None))


def run_scheme(model, lattice: BrownianLattice, cfg: SchemeConfig, x0) -> ParticlePaths:
    """Dispatch on ``cfg.scheme``.

    A decomposable model is viewed as general for the hybrid scheme. The
    direct scheme also accepts any object with vectorised ``drift(x)`` and
    ``diffusion(x)`` methods.
    """
    if cfg.scheme == "scheme1_general_hybrid" and isinstance(model, DecomposableModel):
        model = model.as_general()
    ok = isinstance(model, _COMPATIBLE[cfg.scheme])
    if cfg.scheme == "scheme2_direct":
        ok = ok or _particle_native(model)
    if not ok:
        raise ValueError(f"{cfg.scheme} does not support {type(model).__name__}")
    return _RUNNERS[cfg.scheme](model, lattice, cfg, x0)
