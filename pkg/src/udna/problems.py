"""Local objective oracles, LIBSVM ingestion and data partitioning.

Each node ``i`` owns a local function ``f_i``; the global objective is
``F(z) = (1/n) sum_i f_i(z)``.  For the nonconvex logistic model the node
functions are

    f_i(z) = sum_{j in shard i} log(1 + exp(-b_j a_j^T z))
             + (reg / n) * sum_k z_k^2 / (1 + z_k^2)

so that ``sum_i f_i`` is the usual whole-dataset objective with a single
regularizer of weight ``reg``.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

__all__ = [
    "Dataset",
    "LibsvmParseError",
    "LogisticOracle",
    "Problem",
    "QuadraticOracle",
    "Shard",
    "estimate_lipschitz",
    "logistic_eval",
    "parse_libsvm",
    "partition",
    "synthetic_problem",
]


class LibsvmParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True, eq=False)
class Dataset:
    """Binary-labelled sparse samples; ``features`` is CSR with shape (m, p)."""

    labels: np.ndarray
    features: sp.csr_matrix

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=float)
        if labels.ndim != 1 or labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels and features disagree on the sample count")
        if not np.all(np.abs(labels) == 1.0):
            raise ValueError("labels must be +1 or -1")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", sp.csr_matrix(self.features, dtype=float))

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def sample(self, j: int) -> tuple[float, dict[int, float]]:
        """Label and 1-based ``{index: value}`` features of sample ``j``."""
        row = self.features.getrow(j)
        return float(self.labels[j]), {int(k) + 1: float(v) for k, v in zip(row.indices, row.data)}

    def metadata(self) -> dict:
        return {"m": self.m, "p": self.p, "n_pos": int(np.sum(self.labels > 0))}

    def to_libsvm(self) -> str:
        lines = []
        for j in range(self.m):
            label, feats = self.sample(j)
            toks = [f"{int(label):+d}"] + [f"{k}:{v!r}" for k, v in sorted(feats.items())]
            lines.append(" ".join(toks))
        return "\n".join(lines) + "\n"


def parse_libsvm(stream, p: int | None = None) -> Dataset:
    """Read LIBSVM text (``<label> <idx>:<val> ...`` per line).

    Labels other than +-1 are mapped by sign; a zero label is an error.
    Indices are 1-based and may appear in any order, but not twice within
    one sample.  ``p`` raises the feature dimension above the largest index
    seen; an index beyond an explicit ``p`` is an error.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    labels: list[float] = []
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    max_idx = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        try:
            label = float(toks[0])
        except ValueError:
            raise LibsvmParseError(lineno, f"bad label {toks[0]!r}") from None
        if label == 0 or not math.isfinite(label):
            raise LibsvmParseError(lineno, f"label {toks[0]!r} has no sign")
        row = len(labels)
        labels.append(1.0 if label > 0 else -1.0)
        seen: set[int] = set()
        for tok in toks[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LibsvmParseError(lineno, f"malformed token {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise LibsvmParseError(lineno, f"malformed token {tok!r}") from None
            if idx < 1:
                raise LibsvmParseError(lineno, f"feature index {idx} must be >= 1")
            if p is not None and idx > p:
                raise LibsvmParseError(lineno, f"feature index {idx} exceeds p={p}")
            if idx in seen:
                raise LibsvmParseError(lineno, f"duplicate feature index {idx}")
            seen.add(idx)
            rows.append(row)
            cols.append(idx - 1)
            vals.append(val)
            max_idx = max(max_idx, idx)
    dim = max_idx if p is None else p
    feats = sp.csr_matrix((vals, (rows, cols)), shape=(len(labels), dim))
    feats.sort_indices()
    return Dataset(np.array(labels), feats)


@dataclass(frozen=True, eq=False)
class Shard:
    node: int
    indices: np.ndarray
    labels: np.ndarray
    features: sp.csr_matrix

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]


def partition(d: Dataset, n: int, scheme: str = "contiguous", seed: int | None = None) -> list[Shard]:
    """Split samples across ``n`` nodes; sizes differ by at most one.

    ``contiguous`` hands out consecutive blocks, larger blocks first.
    ``strided`` gives node ``k`` the samples ``k, k + n, k + 2n, ...``.
    If ``seed`` is given, sample order is shuffled first.
    """
    if n < 1:
        raise ValueError("need at least one node")
    if n > d.m:
        raise ValueError(f"cannot split {d.m} samples over {n} nodes")
    order = np.arange(d.m)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(d.m)
    if scheme == "contiguous":
        parts = np.array_split(order, n)
    elif scheme == "strided":
        parts = [order[k::n] for k in range(n)]
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    return [Shard(k, idx, d.labels[idx], d.features[idx]) for k, idx in enumerate(parts)]


class LogisticOracle:
    """Node-local nonconvex logistic loss of one shard."""

    kind = "logistic-nonconvex"

    def __init__(self, features, labels, reg: float, n_nodes: int):
        self.features = sp.csr_matrix(features, dtype=float)
        self.labels = np.asarray(labels, dtype=float)
        self.reg = float(reg)
        self.n_nodes = int(n_nodes)
        self._lipschitz = None
        # Dense copy for small dense shards; sparse products carry large overhead per call.
        a = self.features
        dense = a.shape[0] * a.shape[1] <= 1_000_000 and a.nnz >= 0.25 * a.shape[0] * a.shape[1]
        self._a = a.toarray() if dense else a
        self._at = self._a.T if dense else a.T.tocsr()

    @classmethod
    def from_shard(cls, shard: Shard, reg: float, n_nodes: int) -> LogisticOracle:
        return cls(shard.features, shard.labels, reg, n_nodes)

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def reg_weight(self) -> float:
        return self.reg / self.n_nodes

    def value_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        z = np.asarray(z, dtype=float)
        margins = self.labels * (self._a @ z)
        value = float(np.sum(np.logaddexp(0.0, -margins)))
        coef = -self.labels * expit(-margins)
        grad = self._at @ coef
        z2 = z * z
        c = self.reg_weight
        value += c * float(np.sum(z2 / (1.0 + z2)))
        grad = grad + c * 2.0 * z / (1.0 + z2) ** 2
        return value, np.asarray(grad).ravel()

    def value(self, z) -> float:
        return self.value_grad(z)[0]

    def grad(self, z) -> np.ndarray:
        return self.value_grad(z)[1]

    def lipschitz(self) -> float:
        """``lambda_max(A^T A) / 4 + 2 reg / n``."""
        if self._lipschitz is None:
            self._lipschitz = 0.25 * _power_iteration(self.features) + 2.0 * self.reg_weight
        return self._lipschitz


def logistic_eval(shard: Shard, reg: float, z: np.ndarray, n_nodes: int = 1) -> tuple[float, np.ndarray]:
    """Value and gradient of the shard's local nonconvex logistic loss."""
    return LogisticOracle.from_shard(shard, reg, n_nodes).value_grad(z)


class QuadraticOracle:
    """``f(z) = z^T Q z / 2 - b^T z`` with symmetric ``Q``."""

    kind = "quadratic-synthetic"

    def __init__(self, Q: np.ndarray, b: np.ndarray):
        Q = np.asarray(Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T, atol=1e-12):
            raise ValueError("Q must be a symmetric square matrix")
        self.Q = Q
        self.b = np.asarray(b, dtype=float)

    @property
    def p(self) -> int:
        return self.b.shape[0]

    def value_grad(self, z):
        z = np.asarray(z, dtype=float)
        qz = self.Q @ z
        return float(0.5 * z @ qz - self.b @ z), qz - self.b

    def value(self, z) -> float:
        return self.value_grad(z)[0]

    def grad(self, z) -> np.ndarray:
        return self.Q @ np.asarray(z, dtype=float) - self.b

    def lipschitz(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvalsh(self.Q))))


def _power_iteration(a: sp.spmatrix, rtol: float = 1e-10, max_iter: int = 20000) -> float:
    """Largest eigenvalue of ``A^T A`` by power iteration on matvecs."""
    p = a.shape[1]
    if a.nnz == 0 or p == 0:
        return 0.0
    x = np.random.default_rng(0).standard_normal(p) + 1.0
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = a.T @ (a @ x)
        new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if abs(new - lam) <= rtol * abs(new):
            # ny >= Rayleigh quotient; return the larger of the two.
            return max(new, float(ny))
        lam = new
    return max(lam, float(ny))


def estimate_lipschitz(items: Sequence, reg: float = 0.0, n_nodes: int | None = None) -> float:
    """Common Lipschitz constant of the local gradients.

    ``items`` may be shards (logistic model with regularizer ``reg`` spread
    over ``n_nodes`` nodes, default ``len(items)``) or oracle objects exposing
    ``lipschitz()``.
    """
    if not items:
        raise ValueError("no local objectives given")
    n = len(items) if n_nodes is None else n_nodes
    best = 0.0
    for it in items:
        if isinstance(it, Shard):
            it = LogisticOracle.from_shard(it, reg, n)
        best = max(best, it.lipschitz())
    return best


@dataclass(eq=False)
class Problem:
    """The local oracles of all nodes plus bookkeeping."""

    oracles: list
    dataset: Dataset | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.oracles)

    @property
    def p(self) -> int:
        return self.oracles[0].p

    def local_values_grads(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        vals = np.empty(self.n)
        grads = np.empty((self.n, self.p))
        for i, o in enumerate(self.oracles):
            vals[i], grads[i] = o.value_grad(x[i])
        return vals, grads

    def grads(self, x: np.ndarray) -> np.ndarray:
        return self.local_values_grads(x)[1]

    def F(self, z: np.ndarray) -> float:
        return sum(o.value(z) for o in self.oracles) / self.n

    def gradF(self, z: np.ndarray) -> np.ndarray:
        return sum(o.grad(z) for o in self.oracles) / self.n

    def F_and_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        val, grad = 0.0, np.zeros(self.p)
        for o in self.oracles:
            fv, gv = o.value_grad(z)
            val += fv
            grad += gv
        return val / self.n, grad / self.n

    def lipschitz(self) -> float:
        return estimate_lipschitz(self.oracles)


def logistic_problem(d: Dataset, n: int, reg: float = 1.0, scheme: str = "contiguous", seed=None) -> Problem:
    shards = partition(d, n, scheme, seed)
    oracles = [LogisticOracle.from_shard(s, reg, n) for s in shards]
    meta = dict(d.metadata(), kind="logistic-nonconvex", reg=reg, n=n, partition=scheme)
    return Problem(oracles, d, meta)


def synthetic_problem(
    seed: int,
    n: int,
    p: int,
    m: int | None = None,
    kind: str = "logistic",
    *,
    reg: float = 1.0,
    flip: float = 0.1,
    feature_scale: float | None = None,
    eig_range: tuple[float, float] = (0.5, 2.0),
) -> Problem:
    """Deterministic synthetic test problem.

    ``logistic``: ``m`` Gaussian samples (std ``feature_scale``, default
    ``1/sqrt(p)``) labelled by a planted separator with a fraction ``flip``
    of labels flipped, split contiguously over ``n`` nodes.

    ``quadratic``: per-node ``Q_i = U diag(e) U^T`` with eigenvalues ``e``
    uniform in ``eig_range`` and Gaussian ``b_i``; the consensual minimizer
    ``z* = (sum Q_i)^{-1} sum b_i`` is stored in ``metadata["z_star"]``.
    """
    rng = np.random.default_rng(seed)
    if kind == "logistic":
        if m is None or m < n:
            raise ValueError("logistic synthetic problem needs m >= n samples")
        scale = 1.0 / math.sqrt(p) if feature_scale is None else feature_scale
        a = scale * rng.standard_normal((m, p))
        w_true = rng.standard_normal(p)
        labels = np.where(a @ w_true >= 0, 1.0, -1.0)
        flips = rng.random(m) < flip
        labels[flips] *= -1
        d = Dataset(labels, sp.csr_matrix(a))
        prob = logistic_problem(d, n, reg)
        prob.metadata.update(seed=seed, w_true=w_true.tolist())
        return prob
    if kind == "quadratic":
        lo, hi = eig_range
        Qs, bs = [], []
        for _ in range(n):
            u, _ = np.linalg.qr(rng.standard_normal((p, p)))
            e = rng.uniform(lo, hi, size=p)
            q = (u * e) @ u.T
            Qs.append(0.5 * (q + q.T))
            bs.append(rng.standard_normal(p))
        return quadratic_problem(Qs, bs, seed=seed)
    raise ValueError(f"unknown synthetic problem kind {kind!r}")


def quadratic_problem(Qs: Iterable, bs: Iterable, **meta) -> Problem:
    oracles = [QuadraticOracle(q, b) for q, b in zip(Qs, bs)]
    qsum = sum(o.Q for o in oracles)
    bsum = sum(o.b for o in oracles)
    z_star = np.linalg.solve(qsum, bsum)
    meta = dict(meta, kind="quadratic-synthetic", n=len(oracles), p=oracles[0].p, z_star=z_star.tolist())
    return Problem(oracles, None, meta)


def write_metadata(d: Dataset, path) -> None:
    with open(path, "w") as fh:
        json.dump(d.metadata(), fh)
