"""Convergence-rate estimation and path diagnostics.

The strong error at level ``l`` is the RMS gap between terminal states
computed with ``2**l`` and ``2**(l-1)`` steps per unit time on the same
Brownian paths. The order is the least-squares slope of ``log2(rmse)``
against ``-level``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateFitError, MVSDEError, UnsupportedInputError
from .measure import tree_mean, w2_sorted
from .model import ModelInstance, build_model
from .simulate import ParticlePaths, SchemeConfig, brownian_lattice, run_scheme
from .transform import TransformSpec, g_deriv, g_forward, g_inverse, g_second

TRIM_FACTOR = 3.0
CHAOS_STREAM = 3


def rmse_levels(fine, coarse) -> float:
    fine = np.asarray(fine, dtype=float).ravel()
    coarse = np.asarray(coarse, dtype=float).ravel()
    if fine.shape != coarse.shape:
        raise UnsupportedInputError(
            f"rmse needs equal particle counts, got {fine.size} and {coarse.size}"
        )
    d = fine - coarse
    return math.sqrt(float(tree_mean(d * d)))


def _line_fit(levels, rmses):
    x = -np.asarray(levels, dtype=float)
    y = np.log2(np.asarray(rmses, dtype=float))
    xm, ym = x.mean(), y.mean()
    slope = float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
    intercept = ym - slope * xm
    return slope, intercept, x, y


def estimate_order(levels: Sequence[int], rmses: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of ``log2(rmse)`` on ``-level`` and the max deviation."""
    levels = np.asarray(levels)
    rmses = np.asarray(rmses, dtype=float)
    if levels.size != rmses.size:
        raise ValueError("levels and rmses differ in length")
    if levels.size < 3:
        raise ValueError("an order fit needs at least 3 levels")
    if np.any(rmses <= 0) or not np.all(np.isfinite(rmses)):
        bad = [int(l) for l, r in zip(levels, rmses) if not r > 0]
        raise DegenerateFitError(f"non-positive rmse at levels {bad}; levels may be aliased")
    slope, intercept, x, y = _line_fit(levels, rmses)
    return slope, float(np.max(np.abs(y - (intercept + slope * x))))


class OrderFit(NamedTuple):
    order: float
    residual: float
    trimmed: bool
    levels_used: tuple


def fit_order(levels: Sequence[int], rmses: Sequence[float]) -> OrderFit:
    """:func:`estimate_order`, dropping the coarsest level if it is an outlier.

    The coarsest level is dropped when at least three levels remain and its
    deviation from the fit of the others exceeds ``TRIM_FACTOR`` times that
    fit's own residual.
    """
    levels = [int(l) for l in levels]
    rmses = [float(r) for r in rmses]
    slope, resid = estimate_order(levels, rmses)
    if len(levels) >= 4:
        s_rest, r_rest = estimate_order(levels[1:], rmses[1:])
        _, intercept, _, _ = _line_fit(levels[1:], rmses[1:])
        dev = abs(math.log2(rmses[0]) - (intercept + s_rest * -levels[0]))
        if dev > TRIM_FACTOR * r_rest:
            return OrderFit(s_rest, r_rest, True, tuple(levels[1:]))
    return OrderFit(slope, resid, False, tuple(levels))


def occupation_estimate(paths: ParticlePaths, eps: float) -> float:
    """Mean time per particle spent in ``(-eps, eps)``, by the left-point rule."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    X = paths.states[:-1]
    dt = np.diff(paths.steps) * paths.h
    inside = (np.abs(X) < eps).astype(float) * dt[:, None]
    return float(tree_mean(inside.sum(axis=0)))


class MomentStability(NamedTuple):
    max_moment: float
    moments: np.ndarray
    max_increment_ratio: float
    increment_ratios: np.ndarray


def moment_stability(paths: ParticlePaths, p: int) -> MomentStability:
    """Per-step empirical ``p``-th moments and one-step increment moments over ``h**(p/2)``."""
    if p not in (2, 4, 8):
        raise ValueError(f"p must be 2, 4 or 8, got {p}")
    if paths.stride != 1:
        raise ValueError("moment_stability needs every step recorded (stride 1)")
    X = paths.states
    moments = np.asarray(tree_mean(np.abs(X) ** p, axis=1))
    inc = np.abs(np.diff(X, axis=0)) ** p
    ratios = np.asarray(tree_mean(inc, axis=1)) / paths.h ** (p / 2)
    return MomentStability(float(moments.max()), moments,
                           float(ratios.max()) if ratios.size else 0.0, ratios)


@dataclass
class ConvergenceReport:
    levels: list
    rmse: list
    fitted_order: float
    fit_residual: float
    trimmed: bool
    scheme: str
    model: str
    seed: int
    n_particles: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.levels) != len(self.rmse) or len(self.levels) < 3:
            raise ValueError("a report needs equal-length arrays of at least 3 levels")

    def csv_rows(self):
        return [("level", "rmse")] + [(int(l), float(r)) for l, r in zip(self.levels, self.rmse)]

    def summary(self) -> dict:
        return {
            "fitted_order": self.fitted_order,
            "fit_residual": self.fit_residual,
            "trimmed": self.trimmed,
            "levels": [int(l) for l in self.levels],
            "rmse": [float(r) for r in self.rmse],
            "scheme": self.scheme,
            "model": self.model,
            "seed": self.seed,
            "n_particles": self.n_particles,
            "config": self.config,
        }


def _annotate(exc: MVSDEError, level: int) -> MVSDEError:
    exc.level = level
    if exc.args:
        exc.args = (f"level {level}: {exc.args[0]}",) + tuple(exc.args[1:])
    return exc


def convergence_study(instance: ModelInstance, scheme: str, seed: int, level_min: int,
                      level_max: int, T: float = 1.0, **cfg_kwargs) -> ConvergenceReport:
    """Coupled-level RMSE for ``level_min..level_max`` on one lattice.

    Each reported level ``l`` compares against ``l - 1``, so the scheme is
    run from ``level_min - 1`` upward.
    """
    if level_min < 2:
        raise ValueError("level_min must be >= 2")
    if level_max - level_min < 2:
        raise ValueError("need at least 3 reported levels")
    n = instance.x0.size
    lattice = brownian_lattice(seed, n, level_max, T)
    terminal = {}
    for level in range(level_min - 1, level_max + 1):
        cfg = SchemeConfig(scheme, level, n, T, **cfg_kwargs)
        try:
            terminal[level] = run_scheme(instance.model, lattice, cfg, instance.x0).terminal
        except MVSDEError as exc:
            raise _annotate(exc, level)
    levels = list(range(level_min, level_max + 1))
    rmse = [rmse_levels(terminal[l], terminal[l - 1]) for l in levels]
    fit = fit_order(levels, rmse)
    return ConvergenceReport(levels, rmse, fit.order, fit.residual, fit.trimmed,
                             scheme, instance.name, int(seed), n)


def pool_reports(reports: Sequence[ConvergenceReport]) -> ConvergenceReport:
    """Root of the mean squared RMSE across seeds, refitted."""
    if not reports:
        raise ValueError("nothing to pool")
    levels = reports[0].levels
    if any(r.levels != levels for r in reports):
        raise ValueError("reports cover different levels")
    r2 = np.array([r.rmse for r in reports]) ** 2
    pooled = [math.sqrt(float(tree_mean(col))) for col in r2.T]
    fit = fit_order(levels, pooled)
    first = reports[0]
    return ConvergenceReport(list(levels), pooled, fit.order, fit.residual, fit.trimmed,
                             first.scheme, first.model, first.seed, first.n_particles,
                             {"seeds": [r.seed for r in reports]})


def cross_scheme_w2(instance: ModelInstance, seed: int, levels: Sequence[int],
                    schemes=("scheme1_decomposable", "scheme2_direct"), T: float = 1.0,
                    **cfg_kwargs) -> list:
    """W2 between the terminal ensembles of two schemes on a shared lattice."""
    n = instance.x0.size
    lattice = brownian_lattice(seed, n, max(levels), T)
    out = []
    for level in levels:
        ends = [run_scheme(instance.model, lattice, SchemeConfig(s, level, n, T, **cfg_kwargs),
                           instance.x0).terminal for s in schemes]
        out.append(w2_sorted(*ends))
    return out


def derived_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(CHAOS_STREAM,) + tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def chaos_study(model_name: str, params: dict | None, scheme: str, seed: int,
                n_values: Sequence[int], replicas: int = 3, level: int = 6,
                T: float = 1.0, **cfg_kwargs) -> list:
    """Fixed-step W2 between independent same-size ensembles as N grows.

    For each ``N``, ``replicas`` pairs of independent systems (own initial
    draws and Brownian paths) are simulated and the W2 distances between
    their terminal ensembles averaged. Returns ``(N, mean_w2)`` pairs.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    rows = []
    for n in n_values:
        dists = []
        for r in range(replicas):
            ends = []
            for side in (0, 1):
                s = derived_seed(seed, n, r, side)
                inst = build_model(model_name, params, n, s)
                lattice = brownian_lattice(s, n, level, T)
                cfg = SchemeConfig(scheme, level, n, T, **cfg_kwargs)
                ends.append(run_scheme(inst.model, lattice, cfg, inst.x0).terminal)
            dists.append(w2_sorted(*ends))
        rows.append((int(n), float(np.mean(dists))))
    return rows


class TransformGrid(NamedTuple):
    x: np.ndarray
    g: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    roundtrip_error: np.ndarray

    @property
    def max_roundtrip_error(self) -> float:
        return float(self.roundtrip_error.max())


def transform_grid(spec: TransformSpec, points: int = 10**5, lo: float = -10.0,
                   hi: float = 10.0, tol: float = 1e-12) -> TransformGrid:
    """``G``, ``G'``, ``G''`` and ``|G^{-1}(G(x)) - x|`` on a uniform grid."""
    x = np.linspace(lo, hi, points)
    g = g_forward(x, spec)
    back = g_inverse(g, spec.alpha, spec.c, tol)
    return TransformGrid(x, g, g_deriv(x, spec), g_second(x, spec), np.abs(back - x))
