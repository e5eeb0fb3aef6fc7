"""Stationarity measures, descent margins, KL-inequality witnesses and rate fits.

Everything here is post-processing over a run state or a recorded trace.
Traces may be a list of :class:`~udna.engine.TraceRecord` or a mapping from
column name to array (as read back from CSV).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import DescentCoefficients, descent_coefficients
from .network import SpectralConstants

__all__ = [
    "DescentReport",
    "InsufficientSamples",
    "KLWitness",
    "RateFit",
    "descent_report",
    "final_iterate_distances",
    "kl_constants",
    "kl_step_constant",
    "kl_witness",
    "optimality_error",
    "rate_fit",
    "stationarity",
    "stationarity_check",
]


def _cons_sq(x):
    return float(np.sum((x - x.mean(axis=0)) ** 2))


def stationarity(state) -> float:
    """``||v||^2 + ||v - Mv||^2 + ||x - Mx||^2``."""
    return float(np.sum(state.v**2)) + _cons_sq(state.v) + _cons_sq(state.x)


def stationarity_check(state) -> float:
    """``||mean_i g_i||^2 + ||x - Mx||^2``; zero exactly at consensual stationary points."""
    return float(np.sum(state.g.mean(axis=0) ** 2)) + _cons_sq(state.x)


def optimality_error(state) -> float:
    """``||(1/n) sum_i grad f_i(x_i)|| + ||x - Mx||`` (from the stored gradients)."""
    return float(np.linalg.norm(state.g.mean(axis=0))) + math.sqrt(_cons_sq(state.x))


def _columns(trace) -> dict[str, np.ndarray]:
    if isinstance(trace, dict):
        return {k: np.asarray(v, dtype=float) for k, v in trace.items()}
    if not trace:
        return {}
    names = trace[0].__dataclass_fields__.keys()
    return {k: np.array([getattr(r, k) for r in trace], dtype=float) for k in names}


def _require_consecutive(cols):
    t = cols.get("t")
    if t is not None and t.size > 1 and np.any(np.diff(t) != 1):
        raise ValueError("diagnostics need a trace recorded at every iteration (record_every = 1)")


# -- descent -------------------------------------------------------------------

@dataclass(frozen=True)
class DescentReport:
    """Per-iteration slack of the potential decrease inequality.

    ``margins[t] = (P_t - P_{t+1}) - (a1 alpha |v_t|^2 + a2 |v_t - Mv_t|^2 + a3 |x_t - Mx_t|^2)``;
    a nonnegative margin means the inequality held at that step.
    """

    margins: np.ndarray
    increments: np.ndarray
    scale: float
    coefficients: DescentCoefficients | None

    @property
    def min_margin(self) -> float:
        return float(self.margins.min()) if self.margins.size else math.inf

    @property
    def max_increase(self) -> float:
        return float(self.increments.max()) if self.increments.size else -math.inf

    def ok(self, rtol: float = 1e-9) -> bool:
        return self.min_margin >= -rtol * self.scale

    def monotone(self, rtol: float = 1e-9) -> bool:
        return self.max_increase <= rtol * self.scale

    def to_dict(self) -> dict:
        c = self.coefficients
        return {
            "iterations": int(self.margins.size),
            "min_margin": self.min_margin,
            "max_potential_increase": self.max_increase,
            "scale": self.scale,
            "a1": None if c is None else c.a1,
            "a2": None if c is None else c.a2,
            "a3": None if c is None else c.a3,
            "holds": self.ok(),
            "monotone": self.monotone(),
        }


def descent_report(trace, coefficients: DescentCoefficients | None, alpha: float = 1.0) -> DescentReport:
    cols = _columns(trace)
    if not cols or cols["P"].size < 2:
        return DescentReport(np.empty(0), np.empty(0), 1.0, coefficients)
    _require_consecutive(cols)
    P = cols["P"]
    inc = np.diff(P)
    scale = 1.0 + float(np.max(np.abs(P)))
    if coefficients is None:
        return DescentReport(-inc, inc, scale, None)
    c = coefficients
    need = c.a1 * alpha * cols["v_sq"][:-1] + c.a2 * cols["tracking_sq"][:-1] + c.a3 * cols["consensus_sq"][:-1]
    return DescentReport(-inc - need, inc, scale, c)


# -- KL witnesses ------------------------------------------------------------

@dataclass
class KLWitness:
    """Constants and per-iteration slacks of the four KL-analysis inequalities.

    ``margins`` maps ``"descent"``, ``"step"``, ``"value"`` and ``"gradient"``
    to arrays of ``rhs - lhs``.  The value inequality uses the final
    potential as a proxy for its limit, which cancels on both sides.
    """

    gamma: float
    c1: float
    c2: float
    c3: float
    T: np.ndarray
    margins: dict[str, np.ndarray]
    scales: dict[str, float]
    proxy: bool = True
    notes: list[str] = field(default_factory=list)

    def min_margins(self) -> dict[str, float]:
        return {k: (float(m.min()) if m.size else math.inf) for k, m in self.margins.items()}

    def holds(self, rtol: float = 1e-9) -> dict[str, bool]:
        return {k: v >= -rtol * self.scales[k] for k, v in self.min_margins().items()}

    def ok(self, rtol: float = 1e-9) -> bool:
        return all(self.holds(rtol).values())

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "c1": self.c1,
            "c2": self.c2,
            "c3": self.c3,
            "proxy": self.proxy,
            "min_margins": self.min_margins(),
            "scales": self.scales,
            "holds": self.holds(),
            "notes": self.notes,
        }


def kl_step_constant(gamma: float, alpha: float, Psi: float) -> float:
    """``c1`` bounding ``||x+ - x||^2 <= c1 T^2``.

    >>> kl_step_constant(0.01, 1.0, 1.0)
    800.0
    """
    return 2.0 * max(alpha**2 * Psi**2, 4.0) / (gamma * min(1.0, alpha))


def kl_constants(sc: SpectralConstants, L: float, n: int, alpha: float, psi: float, Psi: float):
    """``(gamma, c1, c2, c3)`` for the KL analysis (``c1`` uses ``alpha^2 Psi^2``)."""
    gamma = descent_coefficients(sc, L, n, alpha, psi, Psi, check=False).gamma
    m = gamma * min(1.0, alpha)
    c1 = kl_step_constant(gamma, alpha, Psi)
    a2, c2s, d2 = sc.sigma_A**2, sc.sigma_C**2, sc.sigma_D**2
    k = (1 - a2) * (1 - c2s) / (4 * (1 + c2s) * L**2 * d2) if d2 > 0 else math.inf
    c2 = max(1.0, k) / m
    c3 = math.sqrt(3.0 * max(1.0, L**2) / (m * n * n))
    return gamma, c1, c2, c3


def kl_witness(trace, sc: SpectralConstants, L: float, n: int, alpha: float, psi: float, Psi: float) -> KLWitness:
    cols = _columns(trace)
    _require_consecutive(cols)
    gamma, c1, c2, c3 = kl_constants(sc, L, n, alpha, psi, Psi)
    notes = []
    if not gamma > 0:
        notes.append("gamma <= 0: step size outside the descent regime, witnesses are vacuous")
    inner = cols["v_sq"] + cols["tracking_sq"] + cols["consensus_sq"]
    T = np.sqrt(max(gamma, 0.0) * min(1.0, alpha) * inner)
    P, F = cols["P"], cols["F"]
    T0 = T[:-1]
    margins = {
        "descent": (P[:-1] - P[1:]) - T0**2,
        "step": math.sqrt(c1) * T0 - cols["dx_norm"][1:],
        "value": (F[:-1] + c2 * T0**2) - P[1:],
        "gradient": c3 * T - cols["gradF_norm"] / math.sqrt(n),
    }
    pscale = 1.0 + float(np.max(np.abs(P))) if P.size else 1.0
    scales = {
        "descent": pscale,
        "step": 1.0 + float(np.max(cols["dx_norm"], initial=0.0)),
        "value": pscale,
        "gradient": 1.0 + float(np.max(cols["gradF_norm"], initial=0.0)),
    }
    return KLWitness(gamma, c1, c2, c3, T, margins, scales, True, notes)


# -- rate fitting ------------------------------------------------------------

class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class RateFit:
    """Fitted convergence regime.

    ``parameter`` is the per-step ratio for ``"geometric"``, the exponent of
    ``t`` for ``"power"`` and the first index at the floor for ``"finite"``.
    """

    regime: str
    parameter: float
    r2: float
    window: tuple[int, int]
    alternatives: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "parameter": self.parameter,
            "r2": self.r2,
            "window": list(self.window),
            "alternatives": self.alternatives,
        }


def _linfit(u, z):
    A = np.column_stack([u, np.ones_like(u)])
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    resid = z - A @ coef
    ss_tot = float(np.sum((z - z.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    if ss_tot <= 1e-300:
        r2 = 1.0 if ss_res <= 1e-300 else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return float(coef[0]), r2


def rate_fit(
    residuals,
    t=None,
    *,
    discard: float = 0.2,
    floor: float = 1e-14,
    min_samples: int = 50,
) -> RateFit:
    """Classify a residual sequence as finite, geometric or power-law.

    The first ``discard`` fraction is dropped as transient, then
    ``log r`` is regressed on ``t`` (geometric) and on ``log t`` (power);
    the fit with larger R^2 wins.  A sequence that jumps below ``floor``
    and stays there is classified ``"finite"``; one that decays onto the
    floor gradually is fitted on the part above it.

    Examples
    --------
    >>> fit = rate_fit(0.9 ** np.arange(200))
    >>> fit.regime, round(fit.parameter, 6)
    ('geometric', 0.9)
    """
    r = np.asarray(residuals, dtype=float)
    t = np.arange(r.size, dtype=float) if t is None else np.asarray(t, dtype=float)
    if r.shape != t.shape:
        raise ValueError("residuals and t must have the same length")
    below = r < floor
    end = r.size
    if below.any() and below[np.argmax(below):].all():
        k = int(np.argmax(below))
        if k > 0 and r.size - k >= 2:
            # A finite regime jumps onto the floor; a geometric one glides down
            # to it.  Compare the last drop with the typical drop before it.
            steps = -np.diff(np.log(np.maximum(r[:k + 1], 1e-300)))
            typical = float(np.median(steps[:-1])) if k > 1 else 0.0
            if k < 3 or steps[-1] > 10.0 * max(typical, 1e-3):
                return RateFit("finite", float(t[k]), 1.0, (0, k))
            end = k
    start = int(math.floor(discard * end))
    keep = (np.arange(r.size) >= start) & (np.arange(r.size) < end)
    keep &= r >= floor
    keep &= np.isfinite(r)
    if keep.sum() < min_samples:
        raise InsufficientSamples(f"need at least {min_samples} post-transient samples, got {int(keep.sum())}")
    tt, z = t[keep], np.log(r[keep])
    slope_g, r2_g = _linfit(tt, z)
    alts = {"geometric": {"parameter": math.exp(slope_g), "r2": r2_g}}
    pos = tt > 0
    if pos.sum() >= min_samples:
        slope_p, r2_p = _linfit(np.log(tt[pos]), z[pos])
        alts["power"] = {"parameter": slope_p, "r2": r2_p}
    else:
        r2_p = -math.inf
    window = (int(np.flatnonzero(keep)[0]), int(np.flatnonzero(keep)[-1]) + 1)
    if r2_g >= r2_p:
        return RateFit("geometric", math.exp(slope_g), r2_g, window, alts)
    return RateFit("power", slope_p, r2_p, window, alts)


def final_iterate_distances(iterates) -> np.ndarray:
    """``||X_t - X_T||`` for ``t < T``, using the last iterate as the limit proxy."""
    xs = np.asarray(iterates, dtype=float)
    last = xs[-1]
    return np.sqrt(np.sum((xs[:-1] - last) ** 2, axis=tuple(range(1, xs.ndim))))
