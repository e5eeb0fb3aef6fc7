"""Per-node Hessian-inverse approximations and their search directions.

Every kernel returns ``d = -H v`` using only vector arithmetic (a handful of
dot products); :func:`dense_direction_oracle` builds the same ``H`` as an
explicit matrix and is meant for tests.

Curvature information comes from the last step of a node:

* ``s``        iterate change ``x_i^{t+1} - x_i^t``
* ``y_check``  tracker change ``v_i^{t+1} - v_i^t``
* ``g_diff``   local gradient change ``g_i^{t+1} - g_i^t``
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

__all__ = [
    "SCHEMES",
    "CurvaturePair",
    "EigenCertificate",
    "NodeMemory",
    "SchemeParams",
    "bb_scale",
    "bfgs_ml_direction",
    "bfgs_ml_matrix",
    "corrected_direction",
    "corrected_lambda_min",
    "corrected_matrix",
    "dense_direction_oracle",
    "dqn_bfgs_update",
    "dsg_scale",
    "identity_direction",
    "scheme_bounds",
    "sr1_ml_direction",
]

SCHEMES = ("identity", "sr1", "bfgs", "corrected-dk", "corrected-hz", "bb", "dsg", "dqn")

# Relative gate for "denominator != 0" tests.
EPS_DEN = 1e-12


@dataclass(frozen=True)
class SchemeParams:
    """Scheme tag plus safeguard constants (defaults are the usual ranges)."""

    scheme: str = "identity"
    sr1_lo: float = 1e-6
    sr1_hi: float = 1e6
    bfgs_lo: float = 1e-6
    bfgs_hi: float = 1e6
    rho: float = 0.05
    lam: float = 0.7
    L_hat: float = 1.0
    delta_min: float = 1e-6
    delta_max: float = 1e6
    bb_lo: float = 1e-6
    bb_hi: float = 1e6
    bb_variant: str = "long"
    experimental: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        checks = [
            (0 < self.sr1_lo < self.sr1_hi, "need 0 < sr1_lo < sr1_hi"),
            (0 < self.bfgs_lo < self.bfgs_hi, "need 0 < bfgs_lo < bfgs_hi"),
            (self.rho > 0, "rho must be positive"),
            (0 < self.lam < 1, "lam must lie in (0, 1)"),
            (self.L_hat > 0, "L_hat must be positive"),
            (0 < self.delta_min < self.delta_max < math.inf, "need 0 < delta_min < delta_max < inf"),
            (0 < self.bb_lo <= self.bb_hi, "need 0 < bb_lo <= bb_hi"),
            (self.bb_variant in ("long", "short"), "bb_variant must be 'long' or 'short'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        if self.scheme == "dqn" and not self.experimental:
            raise ValueError("the dqn scheme has no eigenvalue certificate; set experimental=True")

    @property
    def tau(self) -> int:
        return 2 if self.scheme == "corrected-hz" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    def with_scheme(self, scheme: str) -> SchemeParams:
        return replace(self, scheme=scheme, experimental=self.experimental or scheme == "dqn")


@dataclass(frozen=True)
class CurvaturePair:
    s: np.ndarray
    y_check: np.ndarray
    g_diff: np.ndarray | None = None


@dataclass(frozen=True)
class EigenCertificate:
    """Eigenvalue interval of the ``H`` behind one direction."""

    lower: float
    upper: float
    scheme: str
    fallback: bool = False
    extra: dict = field(default_factory=dict)


def _norm2(a):
    return float(a @ a)


def identity_direction(v: np.ndarray) -> np.ndarray:
    return -v


def _identity(v, scheme, **extra):
    return -v, EigenCertificate(1.0, 1.0, scheme, fallback=True, extra=extra)


# -- memoryless SR1 ----------------------------------------------------------

def sr1_ml_direction(pair: CurvaturePair, v: np.ndarray, params: SchemeParams):
    """Safeguarded memoryless SR1 direction.

    ``H = I + u u^T / (u^T y)`` with ``u = s - y_check``.  The update is used
    only when ``u^T y`` is nonzero and both eigenvalues (1 and
    ``1 + |u|^2 / u^T y``) lie in ``[sr1_lo, sr1_hi]``; otherwise ``H = I``.
    """
    u = pair.s - pair.y_check
    uu = _norm2(u)
    denom = float(u @ pair.y_check)
    if not abs(denom) > EPS_DEN * math.sqrt(uu * _norm2(pair.y_check)):
        return _identity(v, "sr1", reason="zero denominator")
    eig = 1.0 + uu / denom
    lo, hi = min(1.0, eig), max(1.0, eig)
    if not (params.sr1_lo <= lo and hi <= params.sr1_hi):
        return _identity(v, "sr1", reason="eigenvalue outside safeguard")
    d = -v - (float(u @ v) / denom) * u
    return d, EigenCertificate(lo, hi, "sr1")


def sr1_ml_matrix(pair: CurvaturePair, params: SchemeParams) -> np.ndarray:
    """Dense safeguarded SR1 matrix; the safeguard uses a dense eigensolver."""
    p = pair.s.shape[0]
    u = pair.s - pair.y_check
    denom = float(u @ pair.y_check)
    if not abs(denom) > EPS_DEN * np.linalg.norm(u) * np.linalg.norm(pair.y_check):
        return np.eye(p)
    h = np.eye(p) + np.outer(u, u) / denom
    ev = np.linalg.eigvalsh(h)
    # Slack covers eigensolver rounding at the interval ends.
    slack = 1e-9 * max(1.0, abs(ev[-1]))
    if ev[0] < params.sr1_lo - slack or ev[-1] > params.sr1_hi + slack:
        return np.eye(p)
    return h


# -- memoryless BFGS -----------------------------------------------------------

def bfgs_eigen(s: np.ndarray, y: np.ndarray, sy: float | None = None) -> tuple[float, float, float]:
    """``(tau, lam_min, lam_max)`` of the memoryless BFGS matrix ``H(y)``.

    Requires ``s^T y > 0`` (pass ``sy`` when it is known more accurately than
    the dot product).  ``H(y)`` has ``p - 2`` eigenvalues equal to
    ``tau = s^T y / |y|^2`` and two roots of
    ``x^2 - 2|s|^2/(s^T y) x + |s|^2/|y|^2``.
    """
    ss, yy = _norm2(s), _norm2(y)
    sy = float(s @ y) if sy is None else sy
    tau = sy / yy
    scale = ss / sy
    disc = max(0.0, 1.0 - sy * sy / (ss * yy))
    root = math.sqrt(disc)
    # lam_min via the product relation avoids cancellation in 1 - root.
    lam_max = scale * (1.0 + root)
    lam_min = (ss / yy) / lam_max
    return tau, lam_min, lam_max


def bfgs_correction(pair: CurvaturePair, rho: float) -> tuple[np.ndarray, float]:
    """``(y_hat, h)`` with ``y_hat = g_diff + h s`` and ``s^T y_hat >= rho |s|^2``."""
    s, g = pair.s, pair.g_diff
    ss = _norm2(s)
    h = rho + max(-float(s @ g) / ss, 0.0)
    return g + h * s, h


def bfgs_ml_direction(pair: CurvaturePair, v: np.ndarray, params: SchemeParams):
    """Memoryless BFGS direction with adaptive choice between two ``y`` vectors.

    Returns ``(d, certificate, chosen)`` where ``chosen`` is ``"check"`` when
    the tracker variation passed the curvature and eigenvalue tests and
    ``"hat"`` when the corrected gradient variation was used.
    """
    s = pair.s
    ss = _norm2(s)
    if ss == 0.0:
        d, cert = _identity(v, "bfgs", reason="zero step")
        return d, cert, "none"
    y = pair.y_check
    sy = float(s @ y)
    chosen = "check"
    ok = sy > EPS_DEN * math.sqrt(ss * _norm2(y))
    if ok:
        tau, lo, hi = bfgs_eigen(s, y)
        ok = params.bfgs_lo <= lo and hi <= params.bfgs_hi
    if not ok:
        if pair.g_diff is None:
            raise ValueError("BFGS fallback needs the gradient variation g_diff")
        y, h = bfgs_correction(pair, params.rho)
        # When the max is active, s^T y_hat = rho |s|^2 exactly; the dot
        # product would cancel badly once |s| is at rounding level.
        sy = params.rho * ss if h > params.rho else float(s @ y)
        assert sy >= params.rho * ss * (1 - 1e-12), "corrected curvature lost positivity"
        tau, lo, hi = bfgs_eigen(s, y, sy)
        chosen = "hat"
    yy = _norm2(y)
    sv = float(s @ v)
    yv = float(y @ v)
    d = -(sy / yy) * v + (yv / yy - 2.0 * sv / sy) * s + (sv / yy) * y
    cert = EigenCertificate(lo, hi, "bfgs", extra={"tau": tau, "chosen": chosen})
    return d, cert, chosen


def bfgs_ml_matrix(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Dense ``H(y)`` in its rank-two update form."""
    p = s.shape[0]
    sy = float(s @ y)
    tau = sy / float(y @ y)
    sym = np.outer(s, y) + np.outer(y, s)
    return tau * (np.eye(p) - sym / sy) + (1.0 + tau * float(y @ y) / sy) * np.outer(s, s) / sy


def _bfgs_dense_select(pair: CurvaturePair, params: SchemeParams) -> np.ndarray:
    s = pair.s
    p = s.shape[0]
    if not np.any(s):
        return np.eye(p)
    y = pair.y_check
    if float(s @ y) > EPS_DEN * np.linalg.norm(s) * np.linalg.norm(y):
        h = bfgs_ml_matrix(s, y)
        ev = np.linalg.eigvalsh(h)
        slack = 1e-9 * max(1.0, abs(ev[-1]))
        if ev[0] >= params.bfgs_lo - slack and ev[-1] <= params.bfgs_hi + slack:
            return h
    y_hat, _ = bfgs_correction(pair, params.rho)
    return bfgs_ml_matrix(s, y_hat)


# -- corrected quasi-Newton (Dai-Kou / Hager-Zhang type) ---------------------

def corrected_eta(s: np.ndarray, y_check: np.ndarray, lam: float, L_hat: float) -> float:
    ss = _norm2(s)
    sy = float(s @ y_check)
    eta_hat = (1.0 - lam) * ss / (ss - sy) if sy <= lam * ss else 1.0
    ny = math.sqrt(_norm2(y_check))
    cap = L_hat * math.sqrt(ss) / ny if ny > 0 else math.inf
    return min(eta_hat, cap)


def corrected_pair(s, y_check, lam, L_hat):
    """``(eta, y_breve)`` with ``s^T y_breve >= lam |s|^2``."""
    eta = corrected_eta(s, y_check, lam, L_hat)
    return eta, eta * y_check + (1.0 - eta) * s


def corrected_lambda_min(q: float, tau: float) -> float:
    """Closed-form smallest eigenvalue given ``q = |y|^2 |s|^2 / (s^T y)^2``."""
    return 0.5 * (1.0 + tau * q - math.sqrt(max(0.0, tau * tau * q * q - 2.0 * tau * q + q)))


def corrected_direction(pair: CurvaturePair, v: np.ndarray, params: SchemeParams):
    """Symmetrized corrected quasi-Newton direction.

    ``H = I - (s z^T + z s^T) / (2 s^T y_breve)`` with
    ``z = y_breve - tau (|y_breve|^2 / s^T y_breve) s``; ``tau = 1`` gives the
    Dai-Kou type update and ``tau = 2`` the Hager-Zhang type update.
    """
    s = pair.s
    ss = _norm2(s)
    tau = params.tau
    scheme = params.scheme
    if ss == 0.0:
        return _identity(v, scheme, reason="zero step")
    eta, yb = corrected_pair(s, pair.y_check, params.lam, params.L_hat)
    syb = float(s @ yb)
    if not (0.0 < eta <= 1.0) or syb < params.lam * ss * (1 - 1e-12):
        raise ArithmeticError(f"corrected curvature violated: eta={eta}, s^T y={syb}, lam|s|^2={params.lam * ss}")
    yy = _norm2(yb)
    pbar = yy / syb
    z = yb - tau * pbar * s
    d = -v + (float(z @ v) / (2.0 * syb)) * s + (float(s @ v) / (2.0 * syb)) * z
    q = yy * ss / (syb * syb)
    lam_min = corrected_lambda_min(q, tau)
    upper = 2.0 * tau * (params.L_hat**2 + 1.0) / params.lam**2
    cert = EigenCertificate(0.5, upper, scheme, extra={"eta": eta, "q": q, "lambda_min": lam_min})
    return d, cert


def corrected_matrix(pair: CurvaturePair, params: SchemeParams) -> np.ndarray:
    s = pair.s
    p = s.shape[0]
    if not np.any(s):
        return np.eye(p)
    _, yb = corrected_pair(s, pair.y_check, params.lam, params.L_hat)
    syb = float(s @ yb)
    z = yb - params.tau * (float(yb @ yb) / syb) * s
    return np.eye(p) - 0.5 * (np.outer(s, z) + np.outer(z, s)) / syb


# -- scalar (spectral) schemes -------------------------------------------------

def bb_scale(pair: CurvaturePair, params: SchemeParams) -> tuple[float, EigenCertificate]:
    """Barzilai-Borwein scaling ``h`` (so ``H = h I``) projected onto ``[bb_lo, bb_hi]``."""
    s, g = pair.s, pair.g_diff
    sg = float(s @ g)
    num, den = (_norm2(s), sg) if params.bb_variant == "long" else (sg, _norm2(g))
    raw = num / den if den != 0.0 else math.nan
    if not math.isfinite(raw) or raw <= 0:
        h = params.bb_lo
    else:
        h = min(max(raw, params.bb_lo), params.bb_hi)
    return h, EigenCertificate(h, h, "bb", extra={"raw": raw})


def dsg_scale(
    s_i: np.ndarray,
    s_neighbors: np.ndarray,
    weights: np.ndarray,
    g_diff: np.ndarray,
    delta_prev: float,
    params: SchemeParams,
) -> float:
    """Spectral-like scalar ``delta`` (``H_i = I / delta``).

    ``s_neighbors`` holds one row per entry of ``weights`` (the nonzero row
    of the mixing matrix, node ``i`` itself included).
    """
    ss = _norm2(s_i)
    if ss == 0.0:
        return delta_prev
    inner = float(np.sum(weights * (1.0 - (s_neighbors @ s_i) / ss)))
    raw = float(s_i @ g_diff) / ss + delta_prev * inner
    return min(max(raw, params.delta_min), params.delta_max)


def dqn_bfgs_update(H_prev: np.ndarray, pair: CurvaturePair) -> np.ndarray:
    """Full BFGS inverse update with the tracker variation (no safeguard)."""
    s, y = pair.s, pair.y_check
    ys = float(y @ s)
    if not abs(ys) > EPS_DEN * np.linalg.norm(s) * np.linalg.norm(y):
        return H_prev
    p = s.shape[0]
    left = np.eye(p) - np.outer(s, y) / ys
    h = left @ H_prev @ left.T + np.outer(s, s) / ys
    return 0.5 * (h + h.T)


# -- per-node memory and dispatch -------------------------------------------

@dataclass
class NodeMemory:
    """What a node keeps between iterations for its scheme."""

    pair: CurvaturePair | None = None
    h: float = 1.0
    delta: float = 1.0
    H: np.ndarray | None = None
    last: EigenCertificate | None = None


def node_direction(params: SchemeParams, mem: NodeMemory, v: np.ndarray) -> np.ndarray:
    scheme = params.scheme
    if scheme == "identity":
        mem.last = EigenCertificate(1.0, 1.0, "identity")
        return -v
    if scheme in ("bb", "dsg"):
        h = mem.h if scheme == "bb" else 1.0 / mem.delta
        mem.last = EigenCertificate(h, h, scheme)
        return -h * v
    if scheme == "dqn":
        H = np.eye(v.shape[0]) if mem.H is None else mem.H
        mem.last = None
        return -(H @ v)
    if mem.pair is None:
        d, mem.last = _identity(v, scheme, reason="no curvature pair")
        return d
    if scheme == "sr1":
        d, mem.last = sr1_ml_direction(mem.pair, v, params)
    elif scheme == "bfgs":
        d, mem.last, _ = bfgs_ml_direction(mem.pair, v, params)
    else:
        d, mem.last = corrected_direction(mem.pair, v, params)
    return d


def update_memory(params: SchemeParams, mem: NodeMemory, pair: CurvaturePair, *, dsg_context=None) -> None:
    """Fold the newest curvature pair into a node's memory.

    ``dsg_context`` is ``(s_neighbors, weights)`` for the DSG scheme.
    """
    scheme = params.scheme
    stalled = not np.any(pair.s)
    if scheme in ("sr1", "bfgs", "corrected-dk", "corrected-hz"):
        mem.pair = None if stalled else pair
    elif scheme == "bb":
        if not stalled:
            mem.h, _ = bb_scale(pair, params)
    elif scheme == "dsg":
        s_nb, w = dsg_context
        mem.delta = dsg_scale(pair.s, s_nb, w, pair.g_diff, mem.delta, params)
    elif scheme == "dqn":
        if not stalled:
            H = np.eye(pair.s.shape[0]) if mem.H is None else mem.H
            mem.H = dqn_bfgs_update(H, pair)


def scheme_bounds(params: SchemeParams, L: float | None = None) -> tuple[float, float] | None:
    """Uniform eigenvalue bounds ``(psi, Psi)`` valid for every ``H`` the scheme can produce.

    ``L`` (the gradient Lipschitz constant) is needed for the BFGS scheme,
    whose corrected branch has ``lambda_min >= rho / (2 (2L + rho)^2)``.
    Returns ``None`` for the uncertified DQN scheme.
    """
    s = params.scheme
    if s == "identity":
        return 1.0, 1.0
    if s == "sr1":
        return min(params.sr1_lo, 1.0), max(params.sr1_hi, 1.0)
    if s == "bfgs":
        if L is None:
            raise ValueError("BFGS bounds need the Lipschitz constant L")
        r = params.rho
        return min(params.bfgs_lo, r / (2.0 * (2.0 * L + r) ** 2)), max(params.bfgs_hi, 2.0 / r)
    if s in ("corrected-dk", "corrected-hz"):
        return 0.5, 2.0 * params.tau * (params.L_hat**2 + 1.0) / params.lam**2
    if s == "bb":
        return params.bb_lo, params.bb_hi
    if s == "dsg":
        return 1.0 / params.delta_max, 1.0 / params.delta_min
    return None


def bfgs_nominal_interval(params: SchemeParams, L: float) -> tuple[float, float]:
    """Nominal BFGS interval ``[min(l, rho_hat/2), max(u, 2/rho)]``.

    ``rho_hat = 1/(2L + rho)^2 + 1/L``.  The lower end is only safe when the
    safeguard ``l`` is below the true floor ``rho / (2 (2L + rho)^2)`` used by
    :func:`scheme_bounds`; with a large ``l`` the corrected branch can go
    below ``rho_hat / 2``.
    """
    r = params.rho
    rho_hat = 1.0 / (4 * L * L + 4 * L * r + r * r) + 1.0 / L
    return min(params.bfgs_lo, rho_hat / 2.0), max(params.bfgs_hi, 2.0 / r)


def dense_matrix(scheme: str, pair: CurvaturePair | None, params: SchemeParams, **state) -> np.ndarray:
    """Materialize ``H`` for one node from its defining formula."""
    if scheme == "identity" or (pair is None and scheme in ("sr1", "bfgs", "corrected-dk", "corrected-hz")):
        p = state.get("p") if pair is None else pair.s.shape[0]
        return np.eye(p)
    p = pair.s.shape[0]
    if scheme == "sr1":
        return sr1_ml_matrix(pair, params)
    if scheme == "bfgs":
        return _bfgs_dense_select(pair, params)
    if scheme in ("corrected-dk", "corrected-hz"):
        return corrected_matrix(pair, params)
    if scheme == "bb":
        s, g = pair.s, pair.g_diff
        sg = sum(a * b for a, b in zip(s, g))
        if params.bb_variant == "long":
            raw = sum(a * a for a in s) / sg if sg != 0 else math.nan
        else:
            gg = sum(b * b for b in g)
            raw = sg / gg if gg != 0 else math.nan
        h = params.bb_lo if not (math.isfinite(raw) and raw > 0) else float(np.clip(raw, params.bb_lo, params.bb_hi))
        return h * np.eye(p)
    if scheme == "dsg":
        s_nb, w = state["s_neighbors"], state["weights"]
        delta_prev = state["delta_prev"]
        ss = sum(a * a for a in pair.s)
        if ss == 0:
            return np.eye(p) / delta_prev
        total = sum(a * b for a, b in zip(pair.s, pair.g_diff)) / ss
        for wj, sj in zip(w, s_nb):
            total += delta_prev * wj * (1.0 - sum(a * b for a, b in zip(sj, pair.s)) / ss)
        return np.eye(p) / float(np.clip(total, params.delta_min, params.delta_max))
    if scheme == "dqn":
        s, y = pair.s, pair.y_check
        H_prev = state.get("H_prev", np.eye(p))
        ys = float(y @ s)
        if not abs(ys) > EPS_DEN * np.linalg.norm(s) * np.linalg.norm(y):
            return H_prev
        # Expanded product form, independent of the factored kernel.
        rho = 1.0 / ys
        Hy = H_prev @ y
        return (
            H_prev
            - rho * (np.outer(s, Hy) + np.outer(Hy, s))
            + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
        )
    raise ValueError(f"unknown scheme {scheme!r}")


def dense_direction_oracle(scheme: str, pair, v: np.ndarray, params: SchemeParams, **state) -> np.ndarray:
    """``-H v`` with ``H`` materialized densely (test oracle, small ``p`` only)."""
    if v.shape[0] > 64:
        raise ValueError("dense oracle is limited to p <= 64")
    return -dense_matrix(scheme, pair, params, p=v.shape[0], **state) @ v
