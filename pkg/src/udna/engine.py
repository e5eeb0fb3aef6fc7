"""The unified decentralized iteration, its presets, and its theory constants.

One iteration, with stacked iterates ``x``, trackers ``v`` and local
gradients ``g`` (one row per node)::

    d   = -H v                        (per node, from the scheme memory)
    x+  = A x + alpha B d
    v+  = C v + D (g+ - g)

``A, B, C, D`` are polynomials in the mixing matrix ``W``.
"""
from __future__ import annotations

import math
import re
import time
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .directions import CurvaturePair, NodeMemory, SchemeParams, node_direction, scheme_bounds, update_memory
from .network import MixingMatrix, PolySpec, SpectralConstants, mix, mix_sum, spectral_constants

__all__ = [
    "PRESETS",
    "AlgoConfig",
    "DivergenceError",
    "RunResult",
    "RunState",
    "TraceRecord",
    "comm_rounds",
    "descent_coefficients",
    "init_run",
    "make_config",
    "max_stepsize",
    "potential",
    "potential_weight",
    "preset",
    "resolve_stepsize",
    "run",
    "step",
]

PRESETS = (
    "non-atc-gt",
    "atc-gt",
    "semi-atc-gt",
    "dqn",
    "dgm-bb-c(K)",
    "dsg",
    "udna1",
    "udna2",
    "udna3",
    "udna4",
)

_UDNA_SCHEMES = {"udna1": "sr1", "udna2": "bfgs", "udna3": "corrected-dk", "udna4": "corrected-hz"}


class DivergenceError(ArithmeticError):
    """Raised when an iterate stops being finite."""

    def __init__(self, t: int, what: str):
        super().__init__(f"non-finite {what} at iteration {t}")
        self.t = t
        self.what = what


def preset(name: str) -> tuple[PolySpec, PolySpec, PolySpec, PolySpec, str]:
    """Mixing polynomials and scheme tag of a named method.

    Examples
    --------
    >>> a, b, c, d, scheme = preset("non-atc-gt")
    >>> b.is_identity and d.is_identity, scheme
    (True, 'identity')
    >>> preset("dqn")[1].coefficients
    (0.0, 0.0, 1.0)
    """
    W = lambda kind: PolySpec.power(1, kind)  # noqa: E731
    I = PolySpec.identity  # noqa: E741
    m = re.fullmatch(r"dgm-bb-c\((\d+)\)", name)
    if m:
        k = int(m.group(1))
        if k < 1:
            raise ValueError("dgm-bb-c needs K >= 1")
        return (*(PolySpec.power(k, kind) for kind in "ABCD"), "bb")
    table = {
        "non-atc-gt": (W("A"), I("B"), W("C"), I("D"), "identity"),
        "atc-gt": (W("A"), W("B"), W("C"), W("D"), "identity"),
        "semi-atc-gt": (W("A"), W("B"), W("C"), I("D"), "identity"),
        "dqn": (W("A"), PolySpec.power(2, "B"), W("C"), W("D"), "dqn"),
        "dsg": (W("A"), I("B"), W("C"), I("D"), "dsg"),
    }
    if name in table:
        return table[name]
    if name in _UDNA_SCHEMES:
        return W("A"), W("B"), W("C"), W("D"), _UDNA_SCHEMES[name]
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")


@dataclass(frozen=True)
class AlgoConfig:
    """Everything that defines one run of the iteration (besides the problem)."""

    polyA: PolySpec
    polyB: PolySpec
    polyC: PolySpec
    polyD: PolySpec
    scheme: SchemeParams = field(default_factory=SchemeParams)
    alpha: float | str = "auto"
    max_iters: int = 1000
    stop_tol: float = 0.0
    psi: float | None = None
    Psi: float | None = None
    lipschitz: float | None = None
    record_every: int = 1
    name: str = "custom"

    def __post_init__(self):
        for attr, kind in zip(("polyA", "polyB", "polyC", "polyD"), "ABCD"):
            spec = getattr(self, attr)
            if not isinstance(spec, PolySpec):
                spec = PolySpec(tuple(spec), kind)
                object.__setattr__(self, attr, spec)
            if spec.kind != kind:
                object.__setattr__(self, attr, PolySpec(spec.coefficients, kind))
        if isinstance(self.alpha, str):
            if self.alpha != "auto":
                raise ValueError(f"alpha must be a positive number or 'auto', got {self.alpha!r}")
            if self.scheme.scheme == "dqn":
                raise ValueError("the dqn scheme has no eigenvalue certificate; give an explicit alpha")
        elif not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha!r}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise ValueError("max_iters must be a nonnegative integer")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be nonnegative")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if (self.psi is None) != (self.Psi is None):
            raise ValueError("psi and Psi must be overridden together")
        if self.psi is not None and not 0 < self.psi <= self.Psi:
            raise ValueError("need 0 < psi <= Psi")

    @property
    def merged_tracking(self) -> bool:
        return self.polyC.same_polynomial(self.polyD)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, PolySpec):
                val = list(val.coefficients)
            elif isinstance(val, SchemeParams):
                val = val.to_dict()
            out[f.name] = val
        return out


def make_config(name: str, scheme_params: SchemeParams | None = None, **kw) -> AlgoConfig:
    """Config for a named preset; ``scheme_params`` supplies safeguards (its tag is overridden)."""
    a, b, c, d, tag = preset(name)
    params = (scheme_params or SchemeParams()).with_scheme(tag)
    return AlgoConfig(a, b, c, d, params, name=name, **kw)


def comm_rounds(cfg: AlgoConfig) -> int:
    """Neighbor-exchange rounds per iteration.

    ``A x + alpha B d`` is evaluated as one polynomial in ``W`` (Horner with
    vector coefficients), so it costs ``max(deg A, deg B)`` rounds; the
    tracker update ``C v + D (g+ - g)`` likewise costs ``max(deg C, deg D)``.
    """
    return max(cfg.polyA.degree, cfg.polyB.degree) + max(cfg.polyC.degree, cfg.polyD.degree)


def _edge_count(w: MixingMatrix) -> int:
    if w.graph is not None:
        return w.graph.n_edges
    return int(np.count_nonzero(np.triu(w.weights, 1)))


# -- theory constants --------------------------------------------------------

def max_stepsize(sc: SpectralConstants, L: float, n: int, psi: float, Psi: float) -> float:
    """Largest step size covered by the descent theorem.

    Examples
    --------
    >>> sc = SpectralConstants(2/3, 2/3, 1.0, 2/3, 1.0)
    >>> round(max_stepsize(sc, 1.0, 3, 1.0, 1.0), 6)
    0.008038
    """
    if not L > 0:
        raise ValueError("L must be positive")
    if not 0 < psi <= Psi:
        raise ValueError("need 0 < psi <= Psi")
    a2, c2 = sc.sigma_A**2, sc.sigma_C**2
    if sc.sigma_A >= 1 or sc.sigma_C >= 1:
        raise ValueError("need sigma_A < 1 and sigma_C < 1")
    terms = [
        (1 - a2) * psi / ((2 * L + n + 8 * sc.sigma_B**2 * n) * Psi**2),
        (1 - a2) * n / (2 * L**2 * Psi**2),
    ]
    if sc.sigma_D > 0:
        terms.insert(0, (1 - a2) * (1 - c2) ** 2 * n / (64 * L**2 * sc.sigma_D**2 * Psi**2))
    else:
        warnings.warn("sigma_D = 0: dropping the tracking term of the step-size bound", RuntimeWarning, stacklevel=2)
    return min(terms)


def potential_weight(sc: SpectralConstants, L: float) -> float:
    """Weight of ``||v - Mv||^2`` in the potential.

    ``(1 - (1+tau) sA^2) / (4 (1 + 1/eta) L^2 sD^2)`` with
    ``tau = (1 - sA^2)/(2 sA^2)`` and ``eta = (1 - sC^2)/(2 sC^2)``, written in
    the equivalent closed form that stays finite when ``sA`` or ``sC`` is 0.
    """
    if sc.sigma_D <= 0:
        return math.inf
    a2, c2 = sc.sigma_A**2, sc.sigma_C**2
    return (1 - a2) * (1 - c2) / (8 * (1 + c2) * L**2 * sc.sigma_D**2)


def potential(F_bar: float, x: np.ndarray, v: np.ndarray, sc: SpectralConstants, L: float):
    """Potential value and its parts ``(P, F, consensus_sq, weighted_tracking)``.

    With a degenerate ``sigma_D`` the weight is infinite; ``P`` then omits the
    tracking part, which is still reported on its own (unweighted).
    """
    cons = float(np.sum((x - x.mean(axis=0)) ** 2))
    track = float(np.sum((v - v.mean(axis=0)) ** 2))
    k = potential_weight(sc, L)
    if math.isinf(k):
        return F_bar + cons, F_bar, cons, track
    return F_bar + cons + k * track, F_bar, cons, k * track


@dataclass(frozen=True)
class DescentCoefficients:
    a1: float
    a2: float
    a3: float

    @property
    def gamma(self) -> float:
        return min(self.a1, self.a2, self.a3)


def descent_coefficients(
    sc: SpectralConstants, L: float, n: int, alpha: float, psi: float, Psi: float, *, check: bool = True
) -> DescentCoefficients:
    """Per-iteration decrease coefficients of the potential.

    When ``check`` is set and ``alpha`` is within :func:`max_stepsize`, the
    theorem's lower bounds are asserted (the ``a3`` bound in its ``sigma_A``
    form).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    a2s, c2s, b2s, d2s = sc.sigma_A**2, sc.sigma_C**2, sc.sigma_B**2, sc.sigma_D**2
    a1 = psi / (2 * n) - (2 * L + n + 8 * b2s * n) * Psi**2 * alpha / (4 * n * (1 - a2s))
    if d2s > 0:
        a2 = (1 - a2s) * (1 - c2s) ** 2 / (32 * L**2 * d2s) - Psi**2 * alpha / n
    else:
        a2 = math.inf
    a3 = 1 - a2s - L**2 * Psi**2 * alpha / n
    out = DescentCoefficients(a1, a2, a3)
    if check and alpha <= max_stepsize(sc, L, n, psi, Psi) * (1 + 1e-12):
        tol = 1e-12
        ok = (
            a1 >= psi / (4 * n) - tol
            and (d2s == 0 or a2 >= (1 - a2s) * (1 - c2s) ** 2 / (64 * L**2 * d2s) - tol)
            and a3 >= (1 - a2s) / 2 - tol
        )
        if not ok:
            raise AssertionError(f"descent coefficients below their bounds for a compliant step: {out}")
    return out


def resolve_stepsize(cfg: AlgoConfig, sc: SpectralConstants, L: float, n: int):
    """``(alpha, bound, psi, Psi)``: the step used and the theorem's bound.

    ``bound`` is ``None`` when no eigenvalue certificate exists (DQN without
    overrides).
    """
    if cfg.psi is not None:
        bounds = (cfg.psi, cfg.Psi)
    else:
        bounds = scheme_bounds(cfg.scheme, L)
    bound = None
    if bounds is not None:
        bound = max_stepsize(sc, L, n, *bounds)
    if cfg.alpha == "auto":
        if bound is None:
            raise ValueError("alpha='auto' needs an eigenvalue certificate")
        alpha = bound
    else:
        alpha = float(cfg.alpha)
    psi, Psi = bounds if bounds is not None else (math.nan, math.nan)
    return alpha, bound, psi, Psi


# -- run state and iteration -------------------------------------------------

@dataclass
class RunState:
    """Mutable state of a run; ``step`` rebinds arrays and never edits them in place."""

    t: int
    x: np.ndarray
    v: np.ndarray
    g: np.ndarray
    f: np.ndarray
    memory: list[NodeMemory]
    volume: int = 0
    dx_norm: float = 0.0

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def tracking_gap(self) -> float:
        """``||mean(v) - mean(g)||``, zero in exact arithmetic."""
        return float(np.linalg.norm(self.v.mean(axis=0) - self.g.mean(axis=0)))


def init_run(cfg: AlgoConfig, problem, mixing: MixingMatrix, x0: np.ndarray | None = None) -> RunState:
    n, p = problem.n, problem.p
    if mixing.n != n:
        raise ValueError(f"mixing matrix is {mixing.n}x{mixing.n} but the problem has {n} nodes")
    if x0 is None:
        x = np.zeros((n, p))
    else:
        x = np.array(x0, dtype=float)
        if x.shape == (p,):
            x = np.tile(x, (n, 1))
        if x.shape != (n, p):
            raise ValueError(f"x0 must have shape ({n}, {p})")
    f, g = problem.local_values_grads(x)
    return RunState(0, x, g.copy(), g, f, [NodeMemory() for _ in range(n)])


def step(state: RunState, cfg: AlgoConfig, problem, mixing: MixingMatrix, alpha: float) -> RunState:
    """Advance ``state`` by one iteration (in place) and return it."""
    params = cfg.scheme
    d = np.stack([node_direction(params, mem, vi) for mem, vi in zip(state.memory, state.v)])
    x_new, r_x = mix_sum(mixing, (cfg.polyA, state.x), (cfg.polyB, alpha * d))
    if not np.all(np.isfinite(x_new)):
        raise DivergenceError(state.t + 1, "iterate")
    f_new, g_new = problem.local_values_grads(x_new)
    dg = g_new - state.g
    if cfg.merged_tracking:
        v_new, r_v = mix(cfg.polyC, mixing, state.v + dg)
    else:
        v_new, r_v = mix_sum(mixing, (cfg.polyC, state.v), (cfg.polyD, dg))
    if not (np.all(np.isfinite(v_new)) and np.all(np.isfinite(g_new))):
        raise DivergenceError(state.t + 1, "tracker or gradient")

    s = x_new - state.x
    y = v_new - state.v
    for i, mem in enumerate(state.memory):
        ctx = None
        if params.scheme == "dsg":
            nb = mixing.neighbors(i)
            ctx = (s[nb], mixing.weights[i, nb])
        update_memory(params, mem, CurvaturePair(s[i], y[i], dg[i]), dsg_context=ctx)

    rounds = r_x + r_v
    state.volume += rounds * _edge_count(mixing) * problem.p
    state.dx_norm = float(np.linalg.norm(s))
    state.x, state.v, state.g, state.f = x_new, v_new, g_new, f_new
    state.t += 1
    return state


# -- traces and the run loop -------------------------------------------------

TRACE_COLUMNS = ("t", "F", "consensus_sq", "tracking_sq", "v_sq", "P", "opt_err", "eps_stat", "volume")
EXTRA_COLUMNS = ("dx_norm", "gradF_norm")


@dataclass(frozen=True)
class TraceRecord:
    """One recorded iteration.

    ``dx_norm`` is ``||x^t - x^{t-1}||`` (0 at ``t = 0``) and ``gradF_norm``
    is ``||grad F(mean x^t)||``; both feed the KL witnesses.
    """

    t: int
    F: float
    consensus_sq: float
    tracking_sq: float
    v_sq: float
    P: float
    opt_err: float
    eps_stat: float
    volume: int
    dx_norm: float
    gradF_norm: float

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in TRACE_COLUMNS + EXTRA_COLUMNS)


def record(state: RunState, problem, sc: SpectralConstants, L: float) -> TraceRecord:
    xbar = state.x.mean(axis=0)
    F_bar, grad_bar = problem.F_and_grad(xbar)
    P, _, cons, _ = potential(F_bar, state.x, state.v, sc, L)
    track = float(np.sum((state.v - state.v.mean(axis=0)) ** 2))
    v_sq = float(np.sum(state.v**2))
    opt = float(np.linalg.norm(state.g.mean(axis=0)) + math.sqrt(cons))
    return TraceRecord(
        t=state.t,
        F=F_bar,
        consensus_sq=cons,
        tracking_sq=track,
        v_sq=v_sq,
        P=P,
        opt_err=opt,
        eps_stat=v_sq + track + cons,
        volume=state.volume,
        dx_norm=state.dx_norm,
        gradF_norm=float(np.linalg.norm(grad_bar)),
    )


@dataclass
class RunResult:
    config: AlgoConfig
    trace: list[TraceRecord]
    state: RunState
    alpha: float
    alpha_bound: float | None
    psi: float
    Psi: float
    L: float
    spectral: SpectralConstants
    rounds: int
    status: str
    wall_time: float
    certificates: dict

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.trace], dtype=float)

    def summary(self) -> dict:
        last = self.trace[-1]
        return {
            "preset": self.config.name,
            "status": self.status,
            "iterations": self.state.t,
            "final_opt_err": last.opt_err,
            "final_eps_stat": last.eps_stat,
            "final_consensus": math.sqrt(last.consensus_sq),
            "volume": self.state.volume,
            "rounds_per_iteration": self.rounds,
            "wall_time": self.wall_time,
            "alpha": self.alpha,
            "alpha_bound": self.alpha_bound,
            "psi": self.psi,
            "Psi": self.Psi,
            "L": self.L,
            "spectral": {
                "sigma": self.spectral.sigma,
                "sigma_A": self.spectral.sigma_A,
                "sigma_B": self.spectral.sigma_B,
                "sigma_C": self.spectral.sigma_C,
                "sigma_D": self.spectral.sigma_D,
                "flags": list(self.spectral.flags),
            },
            "certificates": self.certificates,
        }


def run(
    cfg: AlgoConfig,
    problem,
    mixing: MixingMatrix,
    x0: np.ndarray | None = None,
    *,
    callback=None,
    until=None,
    raise_on_divergence: bool = False,
) -> RunResult:
    """Run to ``max_iters`` or until the stationarity measure drops to ``stop_tol``.

    ``callback(state)`` is called after initialization and after every step.
    ``until(record)`` is an extra stopping rule checked on a fresh
    :class:`TraceRecord` after every step; when it returns true the run ends
    with status ``"converged"``.  Divergence ends the run with status
    ``"diverged"`` unless ``raise_on_divergence`` is set.
    """
    t0 = time.perf_counter()
    sc = spectral_constants(mixing, cfg.polyA, cfg.polyB, cfg.polyC, cfg.polyD)
    L = cfg.lipschitz if cfg.lipschitz is not None else problem.lipschitz()
    alpha, bound, psi, Psi = resolve_stepsize(cfg, sc, L, problem.n)
    state = init_run(cfg, problem, mixing, x0)
    trace = [record(state, problem, sc, L)]
    if callback is not None:
        callback(state)
    cert_lo, cert_hi, fallbacks = math.inf, -math.inf, 0
    status = "max_iters"
    if cfg.stop_tol > 0 and trace[0].eps_stat <= cfg.stop_tol:
        status = "converged"
    while status == "max_iters" and state.t < cfg.max_iters:
        try:
            step(state, cfg, problem, mixing, alpha)
        except DivergenceError:
            if raise_on_divergence:
                raise
            status = "diverged"
            break
        for mem in state.memory:
            c = mem.last
            if c is not None:
                cert_lo, cert_hi = min(cert_lo, c.lower), max(cert_hi, c.upper)
                fallbacks += bool(c.fallback)
        if callback is not None:
            callback(state)
        rec = None
        if state.t % cfg.record_every == 0 or state.t == cfg.max_iters:
            rec = record(state, problem, sc, L)
            trace.append(rec)
        if cfg.stop_tol > 0 or until is not None:
            if rec is None:
                rec = record(state, problem, sc, L)
            if (cfg.stop_tol > 0 and rec.eps_stat <= cfg.stop_tol) or (until is not None and until(rec)):
                if trace[-1] is not rec:
                    trace.append(rec)
                status = "converged"
    certs = {
        "scheme": cfg.scheme.scheme,
        "observed_lower": cert_lo if math.isfinite(cert_lo) else None,
        "observed_upper": cert_hi if math.isfinite(cert_hi) else None,
        "fallbacks": fallbacks,
    }
    return RunResult(
        cfg, trace, state, alpha, bound, psi, Psi, L, sc, comm_rounds(cfg), status,
        time.perf_counter() - t0, certs,
    )


def with_alpha(cfg: AlgoConfig, alpha) -> AlgoConfig:
    return replace(cfg, alpha=alpha)
