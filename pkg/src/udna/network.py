"""Communication graphs, Metropolis mixing matrices and polynomial mixing.

Stacked node vectors are stored as ``(n, p)`` arrays: row ``i`` is the block
held by node ``i``.  The averaging operator ``M`` is never materialized; it is
applied as a column mean broadcast back to every row.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

__all__ = [
    "SIGMA_FLOOR",
    "Graph",
    "MixingMatrix",
    "PolySpec",
    "SpectralConstants",
    "average",
    "build_graph",
    "consensus_residual",
    "contraction_check",
    "metropolis_weights",
    "mix",
    "mix_sum",
    "mixing_from_json",
    "spectral_constants",
]

# Floor applied wherever a rate constant divides by a sigma-derived quantity.
SIGMA_FLOOR = 1e-12


class DegenerateSpectrumWarning(UserWarning):
    """Raised (as a warning) when sigma or sigma_D vanishes."""


@dataclass(frozen=True)
class Graph:
    """Undirected connected graph on nodes ``0..n-1`` without self-loops."""

    n: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"graph needs at least 2 nodes, got n={self.n}")
        for i, j in self.edges:
            if not (0 <= i < j < self.n):
                raise ValueError(f"edge {(i, j)} must satisfy 0 <= i < j < n")
        if not _is_connected(self.n, self.edges):
            raise ValueError("graph is not connected")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def density(self) -> float:
        return self.n_edges / (self.n * (self.n - 1) / 2)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)


def _is_connected(n: int, edges) -> bool:
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == n


def target_edge_count(n: int, density: float) -> int:
    """Edge count realizing ``density`` on ``n`` nodes (nearest integer)."""
    total = n * (n - 1) / 2
    # 1e-9 absorbs binary representation error, e.g. 0.56 * 45.
    count = int(math.floor(density * total + 0.5 + 1e-9))
    return min(max(count, n - 1), int(total))


def build_graph(n: int, density: float, seed: int | None = 0) -> Graph:
    """Sample a connected graph with the requested edge density.

    A uniform random spanning tree (decoded from a random Pruefer sequence)
    guarantees connectivity; extra edges are then drawn uniformly without
    replacement from the remaining node pairs.

    Parameters
    ----------
    n : int
        Number of nodes, at least 2.
    density : float
        Target edge density in ``(0, 1]``.  Must be at least ``2 / n``, the
        density of a spanning tree.
    seed : int, optional
        Seed for :func:`numpy.random.default_rng`.

    Returns
    -------
    Graph
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if not (0.0 < density <= 1.0):
        raise ValueError(f"density must lie in (0, 1], got {density}")
    if density * n < 2.0 - 1e-12:
        raise ValueError(
            f"density {density} is below the spanning-tree minimum 2/n = {2.0 / n:.6g}"
        )
    rng = np.random.default_rng(seed)
    if n == 2:
        tree = {(0, 1)}
    else:
        prufer = rng.integers(0, n, size=n - 2).tolist()
        t = nx.from_prufer_sequence(prufer)
        tree = {(min(u, v), max(u, v)) for u, v in t.edges()}
    m = target_edge_count(n, density)
    rest = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in tree]
    extra = m - len(tree)
    edges = set(tree)
    if extra > 0:
        picks = rng.choice(len(rest), size=extra, replace=False)
        edges.update(rest[k] for k in sorted(picks))
    return Graph(n, frozenset(edges))


def path_graph(n: int) -> Graph:
    return Graph(n, frozenset((i, i + 1) for i in range(n - 1)))


def complete_graph(n: int) -> Graph:
    return Graph(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)))


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Symmetric doubly stochastic weight matrix with cached spectrum.

    ``eigenvalues`` are sorted in decreasing order; ``sigma`` is the largest
    magnitude among all but the leading (unit) eigenvalue.
    """

    weights: np.ndarray
    graph: Graph | None = None
    eigenvalues: np.ndarray = field(init=False, repr=False)
    sigma: float = field(init=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("mixing matrix must be square")
        n = w.shape[0]
        if np.any(w < 0):
            raise ValueError("mixing matrix has negative entries")
        if np.max(np.abs(w - w.T)) > 1e-12:
            raise ValueError("mixing matrix is not symmetric")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("mixing matrix rows do not sum to one")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        # LAPACK syevd: Householder tridiagonalization followed by implicit QL/QR.
        eig = np.sort(np.linalg.eigvalsh(w))[::-1].copy()
        eig.setflags(write=False)
        object.__setattr__(self, "eigenvalues", eig)
        sigma = float(np.max(np.abs(eig[1:]))) if n > 1 else 0.0
        object.__setattr__(self, "sigma", sigma)
        if n > 1 and sigma < SIGMA_FLOOR:
            warnings.warn(
                "mixing matrix has sigma = 0 (exact averaging in one round); "
                f"rate constants use the floor {SIGMA_FLOOR:g}",
                DegenerateSpectrumWarning,
                stacklevel=3,
            )

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.n > 1 and self.sigma < SIGMA_FLOOR

    def stochasticity_residual(self) -> float:
        w = self.weights
        return float(max(np.max(np.abs(w.sum(axis=1) - 1)), np.max(np.abs(w.sum(axis=0) - 1))))

    def neighbors(self, i: int) -> np.ndarray:
        """Indices ``j`` with ``W[i, j] > 0``, node ``i`` included."""
        return np.flatnonzero(self.weights[i] > 0)

    def to_json(self) -> str:
        n = self.n
        edges = [] if self.graph is None else [list(e) for e in self.graph.sorted_edges()]
        weights = [
            [i, j, float(self.weights[i, j])]
            for i in range(n)
            for j in range(i, n)
            if self.weights[i, j] != 0
        ]
        return json.dumps({"n": n, "edges": edges, "weights": weights})


def mixing_from_json(text: str) -> MixingMatrix:
    doc = json.loads(text)
    n = int(doc["n"])
    w = np.zeros((n, n))
    for i, j, val in doc["weights"]:
        w[i, j] = w[j, i] = val
    graph = Graph(n, frozenset((min(i, j), max(i, j)) for i, j in doc["edges"])) if doc["edges"] else None
    return MixingMatrix(w, graph)


def metropolis_weights(g: Graph) -> MixingMatrix:
    """Metropolis constant edge weights ``1 / (max(deg i, deg j) + 1)``."""
    deg = g.degrees()
    w = np.zeros((g.n, g.n))
    for i, j in g.edges:
        w[i, j] = w[j, i] = 1.0 / (max(deg[i], deg[j]) + 1)
    w[np.diag_indices(g.n)] = 1.0 - w.sum(axis=1)
    return MixingMatrix(w, g)


@dataclass(frozen=True)
class PolySpec:
    """Polynomial ``sum_k c_k W^k`` in the mixing matrix.

    ``kind`` is one of ``"A"``, ``"B"``, ``"C"``, ``"D"``.  Trailing zero
    coefficients are dropped, so ``degree`` equals the number of neighbor
    exchanges needed to apply the polynomial.
    """

    coefficients: tuple[float, ...]
    kind: str = "A"

    def __post_init__(self):
        coeffs = [float(c) for c in self.coefficients]
        while len(coeffs) > 1 and coeffs[-1] == 0.0:
            coeffs.pop()
        if not coeffs:
            raise ValueError("polynomial needs at least one coefficient")
        object.__setattr__(self, "coefficients", tuple(coeffs))
        if self.kind not in ("A", "B", "C", "D"):
            raise ValueError(f"unknown polynomial kind {self.kind!r}")
        if abs(sum(coeffs) - 1.0) > 1e-12:
            raise ValueError(
                f"coefficients of {self.kind} must sum to 1 (doubly stochastic), got {sum(coeffs)!r}"
            )
        if self.kind in ("A", "C") and len(coeffs) < 2:
            raise ValueError(f"{self.kind} must have degree >= 1")

    @classmethod
    def identity(cls, kind: str) -> PolySpec:
        return cls((1.0,), kind)

    @classmethod
    def power(cls, k: int, kind: str) -> PolySpec:
        return cls(tuple([0.0] * k + [1.0]), kind)

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def is_identity(self) -> bool:
        return self.coefficients == (1.0,)

    def __call__(self, lam):
        """Evaluate the scalar polynomial (Horner) at ``lam``."""
        out = np.zeros_like(np.asarray(lam, dtype=float)) + self.coefficients[-1]
        for c in reversed(self.coefficients[:-1]):
            out = out * lam + c
        return out

    def matrix(self, w: MixingMatrix) -> np.ndarray:
        return mix(self, w, np.eye(w.n))[0]

    def same_polynomial(self, other: PolySpec) -> bool:
        return self.coefficients == other.coefficients


@dataclass(frozen=True)
class SpectralConstants:
    """Spectral radii of ``X - M`` for the mixing polynomials and of ``W - M``."""

    sigma: float
    sigma_A: float
    sigma_B: float
    sigma_C: float
    sigma_D: float
    flags: tuple[str, ...] = ()


def spectral_constants(w: MixingMatrix, a: PolySpec, b: PolySpec, c: PolySpec, d: PolySpec) -> SpectralConstants:
    lam = w.eigenvalues[1:]

    def rho(spec):
        if spec.is_identity:
            return 1.0
        return float(np.max(np.abs(spec(lam)))) if lam.size else 0.0

    flags = []
    if w.degenerate:
        flags.append("sigma_zero")
    sd = rho(d)
    if sd < SIGMA_FLOOR:
        flags.append("sigma_D_zero")
        warnings.warn(
            "sigma_D = 0: the tracking weight of the potential is undefined",
            DegenerateSpectrumWarning,
            stacklevel=2,
        )
    return SpectralConstants(w.sigma, rho(a), rho(b), rho(c), sd, tuple(flags))


def mix(spec: PolySpec, w: MixingMatrix, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Apply ``sum_k c_k W^k`` to stacked vectors by repeated neighbor exchange.

    Returns the mixed array and the number of communication rounds used.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] != w.n:
        raise ValueError(f"expected {w.n} node blocks, got {x.shape[0]}")
    coeffs = spec.coefficients
    if len(coeffs) == 1:
        return coeffs[0] * x if coeffs[0] != 1.0 else x.copy(), 0
    out = coeffs[-1] * x
    for ck in reversed(coeffs[:-1]):
        out = w.weights @ out
        if ck != 0.0:
            out = out + ck * x
    return out, spec.degree


def mix_sum(w: MixingMatrix, *terms: tuple[PolySpec, np.ndarray]) -> tuple[np.ndarray, int]:
    """``sum_j P_j(W) x_j`` evaluated as a single polynomial with vector coefficients.

    One Horner sweep over the highest degree mixes every term at once, so
    ``W x + W^2 d = W (x + W d)`` costs two rounds rather than three.
    """
    arrays = [np.asarray(x, dtype=float) for _, x in terms]
    for x in arrays:
        if x.shape[0] != w.n:
            raise ValueError(f"expected {w.n} node blocks, got {x.shape[0]}")
    deg = max(spec.degree for spec, _ in terms)

    def coeff(k):
        out = None
        for (spec, _), x in zip(terms, arrays):
            c = spec.coefficients[k] if k < len(spec.coefficients) else 0.0
            if c != 0.0:
                out = c * x if out is None else out + c * x
        return out

    out = coeff(deg)
    for k in range(deg - 1, -1, -1):
        out = w.weights @ out
        ck = coeff(k)
        if ck is not None:
            out = out + ck
    return out, deg


def average(x: np.ndarray) -> np.ndarray:
    """``M x``: every block replaced by the block mean."""
    return np.broadcast_to(x.mean(axis=0), x.shape)


def consensus_residual(x: np.ndarray) -> np.ndarray:
    """``x - M x``."""
    return x - x.mean(axis=0)


def contraction_check(w: MixingMatrix, x: np.ndarray, k: int) -> float:
    """Ratio ``||W^k x - M x|| / ||x - M x||`` (0 for consensual ``x``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=float)
    denom = np.linalg.norm(consensus_residual(x))
    if denom <= 1e-15 * max(1.0, np.linalg.norm(x)):
        return 0.0
    y, _ = mix(PolySpec.power(k, "A"), w, x)
    return float(np.linalg.norm(y - x.mean(axis=0)) / denom)
