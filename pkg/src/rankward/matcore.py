"""Partial-matrix numerics.

Numerical rank from singular values, soft-impute style alternating ridge
least squares for low-rank completion, and constructive checks for the
minimal-rank results on partially observed reward matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

EPS64 = float(np.finfo(np.float64).eps)
# LAPACK is used up to this many entries per side, randomized sketching beyond.
DENSE_SVD_LIMIT = 2000


class NoRankReducingCompletion(ArithmeticError):
    """The single hole cannot be filled so that the determinant vanishes."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PartialMatrix:
    """Dense value grid plus the observed-index mask.

    ``values`` is stored already projected: entries outside the mask are 0.
    Both arrays are read-only.
    """

    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        observed = np.asarray(self.observed, dtype=bool)
        if values.ndim != 2 or values.shape != observed.shape:
            raise ValueError(
                f"values {values.shape} and observed {observed.shape} must be matching 2-d grids"
            )
        object.__setattr__(self, "values", _readonly(np.where(observed, values, 0.0)))
        object.__setattr__(self, "observed", _readonly(observed))

    @classmethod
    def from_entries(cls, n_rows: int, n_cols: int, entries) -> "PartialMatrix":
        """Build from ``{(i, j): value}`` or an iterable of ``(i, j, value)``."""
        if isinstance(entries, dict):
            entries = ((i, j, v) for (i, j), v in entries.items())
        values = np.zeros((n_rows, n_cols))
        observed = np.zeros((n_rows, n_cols), dtype=bool)
        for i, j, v in entries:
            if observed[i, j]:
                raise ValueError(f"entry ({i}, {j}) given twice")
            values[i, j] = v
            observed[i, j] = True
        return cls(values, observed)

    @classmethod
    def full(cls, matrix) -> "PartialMatrix":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix, np.ones(matrix.shape, dtype=bool))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    def projected(self) -> np.ndarray:
        """P_Omega of the stored grid (a writable copy)."""
        return self.values.copy()

    def row_counts(self) -> np.ndarray:
        return self.observed.sum(axis=1)

    def entries(self) -> list[tuple[int, int, float]]:
        rows, cols = np.nonzero(self.observed)
        return [(int(i), int(j), float(self.values[i, j])) for i, j in zip(rows, cols)]

    def take_rows(self, rows: Sequence[int]) -> "PartialMatrix":
        rows = np.asarray(rows, dtype=int)
        return PartialMatrix(self.values[rows], self.observed[rows])

    def drop_empty(self) -> tuple["PartialMatrix", np.ndarray, np.ndarray]:
        """Remove fully unobserved rows and columns; returns kept row/col indices."""
        rows = np.flatnonzero(self.observed.any(axis=1))
        cols = np.flatnonzero(self.observed.any(axis=0))
        sub = PartialMatrix(self.values[np.ix_(rows, cols)], self.observed[np.ix_(rows, cols)])
        return sub, rows, cols

    # text format: header "rows cols", then "i j value" per observed entry
    def to_text(self) -> str:
        lines = [f"{self.n_rows} {self.n_cols}"]
        lines += [f"{i} {j} {v:.17g}" for i, j, v in self.entries()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PartialMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty partial-matrix text")
        n_rows, n_cols = (int(t) for t in lines[0].split())
        entries = []
        for ln in lines[1:]:
            i, j, v = ln.split()
            entries.append((int(i), int(j), float(v)))
        return cls.from_entries(n_rows, n_cols, entries)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PartialMatrix":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Factorization:
    """Low-rank certificate ``left @ right.T``."""

    left: np.ndarray
    right: np.ndarray
    rank_budget: int
    objective_trace: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        left = _readonly(np.asarray(self.left, dtype=np.float64))
        right = _readonly(np.asarray(self.right, dtype=np.float64))
        if left.shape[1] != self.rank_budget or right.shape[1] != self.rank_budget:
            raise ValueError("factor widths must equal rank_budget")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def reconstruct(self) -> np.ndarray:
        return self.left @ self.right.T

    @property
    def iterations(self) -> int:
        return max(len(self.objective_trace) - 1, 0)


@dataclass(frozen=True)
class SvdSpectrum:
    singular_values: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.singular_values, dtype=np.float64).ravel()
        if s.size and (np.any(np.diff(s) > 1e-12 * max(s[0], 1.0)) or s[-1] < -1e-12 * max(s[0], 1.0)):
            raise ValueError("singular values must be non-increasing and non-negative")
        object.__setattr__(self, "singular_values", _readonly(np.clip(s, 0.0, None)))

    def __len__(self) -> int:
        return self.singular_values.size


def _randomized_singular_values(a: np.ndarray, k: int, rng: np.random.Generator, n_iter: int = 4) -> np.ndarray:
    n, m = a.shape
    sketch = min(k + 10, min(n, m))
    omega = rng.standard_normal((m, sketch))
    y = a @ omega
    for _ in range(n_iter):
        y, _ = np.linalg.qr(y)
        y = a @ (a.T @ y)
    q, _ = np.linalg.qr(y)
    return np.linalg.svd(q.T @ a, compute_uv=False)


def svd_spectrum(matrix, method: str = "auto", seed: int = 0) -> SvdSpectrum:
    """Singular values of a dense matrix.

    ``method="dense"`` uses LAPACK; ``"randomized"`` grows a range sketch until
    its trailing singular value drops under the rank cutoff, which keeps the
    count from :func:`numerical_rank` exact for numerically low-rank inputs.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if a.size == 0:
        return SvdSpectrum(np.zeros(0))
    if method == "auto":
        method = "dense" if max(a.shape) <= DENSE_SVD_LIMIT else "randomized"
    if method == "dense":
        return SvdSpectrum(np.linalg.svd(a, compute_uv=False))
    if method != "randomized":
        raise ValueError(f"unknown svd method {method!r}")
    rng = np.random.default_rng(seed)
    full = min(a.shape)
    k = min(64, full)
    while True:
        s = _randomized_singular_values(a, k, rng)
        if s.size == 0 or s[0] == 0.0:
            return SvdSpectrum(s)
        cutoff = max(a.shape) * EPS64 * s[0]
        if s.size >= full or s[-1] <= cutoff:
            return SvdSpectrum(s)
        k = min(2 * k, full)


def numerical_rank(spectrum: SvdSpectrum, n_rows: int, n_cols: int, eps_machine: float = EPS64) -> int:
    """Count singular values strictly above ``max(n_rows, n_cols) * eps * sigma_1``."""
    s = spectrum.singular_values
    if s.size == 0 or s[0] == 0.0:
        return 0
    threshold = max(n_rows, n_cols) * eps_machine * s[0]
    return int(np.count_nonzero(s > threshold))


def matrix_rank(matrix, eps_machine: float = EPS64) -> int:
    a = np.asarray(matrix, dtype=np.float64)
    if a.size == 0:
        return 0
    return numerical_rank(svd_spectrum(a), a.shape[0], a.shape[1], eps_machine)


# -- soft-impute ALS ---------------------------------------------------------


def als_objective(m: PartialMatrix, left: np.ndarray, right: np.ndarray, trace_penalty: float) -> float:
    resid = (m.values - left @ right.T) * m.observed
    return float((resid**2).sum() + trace_penalty * ((left**2).sum() + (right**2).sum()))


def _ridge_rows(mask: np.ndarray, x: np.ndarray, other: np.ndarray, penalty: float) -> np.ndarray:
    # each row solves (sum_{j in Omega_i} b_j b_j^T + penalty I) a_i = sum_j x_ij b_j
    n = mask.shape[0]
    r = other.shape[1]
    outer = (other[:, :, None] * other[:, None, :]).reshape(other.shape[0], r * r)
    gram = (mask @ outer).reshape(n, r, r) + penalty * np.eye(r)
    rhs = x @ other
    # the normal equations are only trusted when the penalty keeps them well conditioned
    scale = np.diagonal(gram, axis1=1, axis2=2).max(axis=1)
    ill = penalty <= 1e-8 * scale
    out = np.zeros((n, r))
    if not ill.all():
        out[~ill] = np.linalg.solve(gram[~ill], rhs[~ill][..., None])[..., 0]
    # row-wise least squares on [B_obs; sqrt(penalty) I], which avoids squaring
    # the condition number; minimum-norm when singular, zero for empty rows
    ridge = np.sqrt(penalty) * np.eye(r)
    for i in np.flatnonzero(ill):
        obs = mask[i] > 0
        if obs.any():
            a = np.vstack([other[obs], ridge])
            b = np.concatenate([x[i, obs], np.zeros(r)])
            out[i] = np.linalg.lstsq(a, b, rcond=None)[0]
    return out


def spectral_init(m: PartialMatrix, rank_budget: int) -> Factorization:
    """Balanced top-``r`` SVD factors of the zero-filled matrix rescaled by ``nm / |Omega|``."""
    if m.n_observed == 0:
        raise ValueError("matrix has no observed entries")
    x = m.projected() * (m.n_rows * m.n_cols / m.n_observed)
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    root = np.sqrt(s[:rank_budget])
    return Factorization(u[:, :rank_budget] * root, vt[:rank_budget].T * root, rank_budget)


def soft_impute_als(
    m: PartialMatrix,
    rank_budget: int,
    trace_penalty: float = 1e-4,
    max_iters: int = 1000,
    seed: int = 0,
    rel_tol: float = 1e-10,
    init: Factorization | str | None = None,
) -> Factorization:
    """Complete ``m`` at rank ``rank_budget`` by alternating ridge least squares.

    Minimizes ``||P_Omega(X - A B^T)||_F^2 + trace_penalty (||A||_F^2 + ||B||_F^2)``.
    Every half-step is an exact block minimization over observed entries, so
    the recorded objective trace never increases. Stops at ``max_iters`` or
    when the relative objective change falls below ``rel_tol``.

    ``init`` is a seeded Gaussian (scaled ``1/sqrt(r)``) by default, a given
    :class:`Factorization`, or ``"spectral"`` for :func:`spectral_init`.
    """
    if rank_budget < 1:
        raise ValueError("rank_budget must be >= 1")
    if rank_budget > min(m.shape):
        raise ValueError(f"rank_budget {rank_budget} exceeds min dimension {min(m.shape)}")
    if trace_penalty < 0:
        raise ValueError("trace_penalty must be non-negative")
    if m.n_observed == 0:
        raise ValueError("matrix has no observed entries")
    mask = m.observed.astype(np.float64)
    x = m.values
    if isinstance(init, str):
        if init != "spectral":
            raise ValueError(f"unknown init {init!r}")
        init = spectral_init(m, rank_budget)
    if init is None:
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(rank_budget)
        left = rng.standard_normal((m.n_rows, rank_budget)) * scale
        right = rng.standard_normal((m.n_cols, rank_budget)) * scale
    else:
        left, right = np.array(init.left), np.array(init.right)
    trace = [als_objective(m, left, right, trace_penalty)]
    for _ in range(max_iters):
        left = _ridge_rows(mask, x, right, trace_penalty)
        right = _ridge_rows(mask.T, x.T, left, trace_penalty)
        trace.append(als_objective(m, left, right, trace_penalty))
        prev, cur = trace[-2], trace[-1]
        if abs(prev - cur) <= rel_tol * abs(prev):
            break
    return Factorization(left, right, rank_budget, tuple(trace))


def best_of_restarts(m: PartialMatrix, rank_budget: int, restarts: int = 3, seed: int = 0, **kw) -> Factorization:
    """Lowest observed-MSE factorization over seeded restarts."""
    fits = [soft_impute_als(m, rank_budget, seed=seed + s, **kw) for s in range(restarts)]
    return min(fits, key=lambda f: observed_mse(m, f))


def observed_mse(m: PartialMatrix, f, normalize: str = "observed") -> float:
    """Squared error on observed entries.

    ``normalize="observed"`` divides by ``|Omega|``; ``"all"`` divides by
    ``n_rows * n_cols`` as in the minimal eps-rank definition. ``f`` may be a
    :class:`Factorization` or a dense prediction grid.
    """
    if m.n_observed == 0:
        raise ValueError("matrix has no observed entries")
    pred = f.reconstruct() if isinstance(f, Factorization) else np.asarray(f, dtype=np.float64)
    if pred.shape != m.shape:
        raise ValueError(f"prediction shape {pred.shape} != matrix shape {m.shape}")
    sse = float((((m.values - pred) * m.observed) ** 2).sum())
    if normalize == "observed":
        return sse / m.n_observed
    if normalize == "all":
        return sse / (m.n_rows * m.n_cols)
    raise ValueError(f"unknown normalization {normalize!r}")


# -- constructive verifiers ----------------------------------------------------


def _cofactor(a: np.ndarray, i: int, j: int) -> float:
    minor = np.delete(np.delete(a, i, axis=0), j, axis=1)
    det = np.linalg.det(minor) if minor.size else 1.0
    return float((-1) ** (i + j) * det)


def complete_one_missing(m: PartialMatrix, zero_tol: float = 1e-12) -> float:
    """Fill the single hole of a square matrix so the determinant vanishes.

    The hole is permuted to (0, 0); the determinant is expanded along the
    first column, giving ``x = -(sum_{i>0} a_i0 C_i0) / C_00``. A cofactor
    below ``zero_tol * scale**(k-1)`` counts as zero.
    """
    k = m.n_rows
    if m.n_cols != k:
        raise ValueError("complete_one_missing needs a square matrix")
    holes = np.argwhere(~m.observed)
    if len(holes) != 1:
        raise ValueError(f"expected exactly one unobserved entry, found {len(holes)}")
    hi, hj = (int(t) for t in holes[0])
    if k == 1:
        return 0.0
    rows = [hi] + [r for r in range(k) if r != hi]
    cols = [hj] + [c for c in range(k) if c != hj]
    a = m.values[np.ix_(rows, cols)]
    scale = max(float(np.abs(a).max()), 1.0)
    c00 = _cofactor(a, 0, 0)
    residual = sum(a[i, 0] * _cofactor(a, i, 0) for i in range(1, k))
    tol = zero_tol * scale ** (k - 1)
    if abs(c00) <= tol:
        if abs(residual) <= tol * scale:
            return 0.0
        raise NoRankReducingCompletion(
            f"leading minor is zero (|C00|={abs(c00):.3g}) but the rest of the expansion is {residual:.3g}"
        )
    return -residual / c00


def fill_hole(m: PartialMatrix, value: float) -> np.ndarray:
    out = m.projected()
    out[~m.observed] = value
    return out


def rank_one_complete(m: PartialMatrix) -> np.ndarray:
    """Fill every row with its single observed value (zeros for empty rows)."""
    counts = m.row_counts()
    if np.any(counts > 1):
        bad = int(np.flatnonzero(counts > 1)[0])
        raise ValueError(f"row {bad} has {int(counts[bad])} observations; at most one allowed")
    row_value = m.values.sum(axis=1)
    return np.repeat(row_value[:, None], m.n_cols, axis=1)


def build_triangular_instance(k: int) -> PartialMatrix:
    """Identity diagonal and zeros below it observed; everything above hidden."""
    if k < 2:
        raise ValueError("k must be >= 2")
    observed = np.tril(np.ones((k, k), dtype=bool))
    return PartialMatrix(np.eye(k), observed)


def single_occurrence_rows(m: PartialMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Row indices with exactly one observation and with two or more."""
    counts = m.row_counts()
    return np.flatnonzero(counts == 1), np.flatnonzero(counts >= 2)


def split_single_occurrence_rows(m: PartialMatrix) -> tuple[PartialMatrix, PartialMatrix]:
    singles, multi = single_occurrence_rows(m)
    return m.take_rows(singles), m.take_rows(multi)


def stacked_block_completion(m: PartialMatrix, rank_budget: int, **als_kw) -> tuple[np.ndarray, Factorization | None]:
    """Rank-1 fill on single-observation rows stacked with soft-impute on the rest.

    The returned completion has rank at most ``rank_budget + 1``. Rows with no
    observation are filled with zeros.
    """
    singles, multi = single_occurrence_rows(m)
    out = np.zeros(m.shape)
    if singles.size:
        out[singles] = rank_one_complete(m.take_rows(singles))
    fit = None
    if multi.size:
        block = m.take_rows(multi)
        sub, _, cols = block.drop_empty()
        fit = soft_impute_als(sub, min(rank_budget, min(sub.shape)), **als_kw)
        rows_fill = np.zeros((multi.size, m.n_cols))
        rows_fill[:, cols] = fit.reconstruct()
        out[multi] = rows_fill
    return out, fit


def row_sample_rank(
    row_oracle: Callable[[object], np.ndarray],
    contexts: Sequence,
    sizes: Iterable[int],
) -> list[tuple[int, int]]:
    """Numerical rank of the stacked rows for the first ``N`` contexts, per ``N``.

    Rows are computed once and reused, so the sampled submatrices are nested
    and the reported rank is non-decreasing.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if sizes and sizes[-1] > len(contexts):
        raise ValueError(f"largest size {sizes[-1]} exceeds {len(contexts)} contexts")
    rows: list[np.ndarray] = []
    out = []
    for n in sizes:
        while len(rows) < n:
            rows.append(np.asarray(row_oracle(contexts[len(rows)]), dtype=np.float64).ravel())
        if n == 0:
            out.append((0, 0))
            continue
        out.append((n, matrix_rank(np.vstack(rows[:n]))))
    return out
