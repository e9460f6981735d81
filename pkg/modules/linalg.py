"""
Dense linear algebra kernel.

Column-pivoted Householder QR (Businger-Golub), interpolative decompositions
built from it, power-iteration spectral norms and the rank diagnostics used to
choose how many columns to keep.

Conventions: a factorization of A (n x m) satisfies A[:, perm] = Q R, and an
interpolative decomposition satisfies A ~= A[:, indices] @ t with
t[:, indices] equal to the identity.
"""
import bisect
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.linalg import solve_triangular

from . import config
from .errors import InvalidInputError, RankDeficiencyError
from .utils import log


# =============================================================================
# TYPES
# =============================================================================

def as_matrix(a, name="matrix") -> np.ndarray:
    """Validates external input as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must be nonempty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf entries")
    return arr


@dataclass(frozen=True)
class RankCriterion:
    """How many columns an ID keeps: a fixed k or an accuracy epsilon."""

    mode: str
    k: Optional[int] = None
    epsilon: Optional[float] = None
    certify: bool = False

    def __post_init__(self):
        if self.mode == "fixed":
            if self.k is None or int(self.k) < 1:
                raise InvalidInputError(f"fixed rank needs k >= 1, got {self.k}")
        elif self.mode == "epsilon":
            if self.epsilon is None or not 0.0 < float(self.epsilon) < 1.0:
                raise InvalidInputError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        else:
            raise InvalidInputError(f"unknown rank criterion mode '{self.mode}'")

    @classmethod
    def fixed(cls, k: int) -> "RankCriterion":
        return cls(mode="fixed", k=int(k))

    @classmethod
    def tolerance(cls, epsilon: float, certify: bool = False) -> "RankCriterion":
        return cls(mode="epsilon", epsilon=float(epsilon), certify=bool(certify))

    def describe(self) -> str:
        if self.mode == "fixed":
            return f"k={self.k}"
        return f"eps={self.epsilon}{' (certified)' if self.certify else ''}"


@dataclass(frozen=True)
class PivotedQR:
    """
    Result of `column_pivoted_qr`.

    `r` holds the first `rows` rows of the triangularized matrix (rows == steps
    for a partial factorization, min(n, m) for a complete one). `residual` is
    the not yet reduced trailing block, (n - rows) x (m - rows); it is empty
    once the factorization is complete. `q` is only formed on request.
    """

    r: np.ndarray
    perm: np.ndarray
    steps: int
    residual: np.ndarray
    n_rows: int
    q: Optional[np.ndarray] = None

    @property
    def rows(self) -> int:
        return self.r.shape[0]

    @property
    def n_cols(self) -> int:
        return self.r.shape[1]

    @property
    def is_complete(self) -> bool:
        return self.rows == min(self.n_rows, self.n_cols)

    def diagonal(self) -> np.ndarray:
        """|r_ii| for the pivoted steps, non-increasing."""
        return np.abs(np.diag(self.r[:self.steps, :self.steps]))

    def trailing_block(self, k: int) -> np.ndarray:
        """R22 at split index k, in rotated coordinates (same singular values)."""
        if not 0 <= k <= self.rows:
            raise InvalidInputError(f"split index {k} outside [0, {self.rows}]")
        top = self.r[k:, k:]
        bottom = np.hstack([
            np.zeros((self.residual.shape[0], self.rows - k)),
            self.residual,
        ])
        return np.vstack([top, bottom])


@dataclass(frozen=True)
class Interpolation:
    """A ~= A[:, indices] @ t."""

    indices: np.ndarray
    t: np.ndarray
    achieved_error: float
    certified: bool

    @property
    def rank(self) -> int:
        return len(self.indices)

    @property
    def width(self) -> int:
        return self.t.shape[1]


class ProfilePoint(NamedTuple):
    k: int
    proxy: float
    trailing_norm: float


# =============================================================================
# COLUMN-PIVOTED QR
# =============================================================================

def _reflect(work: np.ndarray, j: int) -> Optional[np.ndarray]:
    """Applies the Householder reflector zeroing work[j+1:, j]; returns its unit vector."""
    x = work[j:, j]
    norm_x = np.linalg.norm(x)
    if norm_x == 0.0:
        return None
    alpha = -np.copysign(norm_x, x[0])
    v = x.copy()
    v[0] -= alpha
    v /= np.linalg.norm(v)
    block = work[j:, j:]
    block -= 2.0 * np.outer(v, v @ block)
    work[j, j] = alpha
    work[j + 1:, j] = 0.0
    return v


def _select_pivot(norms: np.ndarray, perm: np.ndarray, j: int) -> int:
    """Largest residual norm from column j on; ties go to the lowest original index."""
    candidates = norms[j:]
    ties = np.flatnonzero(candidates == candidates.max())
    return j + int(ties[np.argmin(perm[j + ties])])


def _downdate_norms(work, norms, exact, j):
    """Downdates residual column norms after step j, recomputing stale ones."""
    if j + 1 >= work.shape[1]:
        return
    old = norms[j + 1:]
    row = work[j, j + 1:]
    ratio = np.divide(row, old, out=np.zeros_like(row), where=old > 0)
    updated = old * np.sqrt(np.maximum(0.0, 1.0 - ratio * ratio))
    stale = updated < config.NORM_RECOMPUTE_RATIO * exact[j + 1:]
    if np.any(stale):
        cols = j + 1 + np.flatnonzero(stale)
        fresh = np.linalg.norm(work[j + 1:, cols], axis=0)
        updated[stale] = fresh
        exact[cols] = fresh
    norms[j + 1:] = updated


def _accumulate_q(n_rows: int, width: int, reflectors) -> np.ndarray:
    q = np.eye(n_rows, width)
    for j, v in reversed(reflectors):
        if v is not None:
            q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return q


def column_pivoted_qr(a, max_steps: Optional[int] = None, full: bool = False,
                      accumulate_q: bool = False) -> PivotedQR:
    """
    Householder QR with Businger-Golub column pivoting, run for `max_steps`
    pivot steps (default min(n, m)). With `full=True` a partial factorization
    is completed without pivoting so that `r` is min(n, m) x m.
    """
    work = np.array(as_matrix(a), dtype=np.float64, copy=True)
    n, m = work.shape
    ell = min(n, m)
    steps = ell if max_steps is None else int(max_steps)
    if not 1 <= steps <= ell:
        raise InvalidInputError(f"max_steps must lie in [1, {ell}], got {max_steps}")

    perm = np.arange(m)
    norms = np.linalg.norm(work, axis=0)
    exact = norms.copy()
    reflectors = []

    for j in range(steps):
        p = _select_pivot(norms, perm, j)
        if p != j:
            work[:, [j, p]] = work[:, [p, j]]
            perm[[j, p]] = perm[[p, j]]
            norms[[j, p]] = norms[[p, j]]
            exact[[j, p]] = exact[[p, j]]
        reflectors.append((j, _reflect(work, j)))
        _downdate_norms(work, norms, exact, j)

    rows = steps
    if full and steps < ell:
        for j in range(steps, ell):
            reflectors.append((j, _reflect(work, j)))
        rows = ell

    q = _accumulate_q(n, rows, reflectors) if accumulate_q else None
    log(f"[QR] {n}x{m} factorized for {steps} pivot steps", "DEBUG")
    return PivotedQR(
        r=np.triu(work[:rows, :]),
        perm=perm,
        steps=steps,
        residual=work[rows:, rows:].copy(),
        n_rows=n,
        q=q,
    )


def _block_norm(block: np.ndarray) -> float:
    """Exact 2-norm; an empty block has norm 0."""
    return float(np.linalg.norm(block, 2)) if block.size else 0.0


def numerical_rank(qr: PivotedQR) -> int:
    """Number of pivot steps whose |r_kk| / |r_11| clears the singularity cutoff."""
    d = qr.diagonal()
    if d.size == 0 or d[0] == 0.0:
        return 0
    return int(np.count_nonzero(d / d[0] >= config.SINGULARITY_CUTOFF))


# =============================================================================
# RANK SELECTION & INTERPOLATIVE DECOMPOSITION
# =============================================================================

def _proxy_rank(qr: PivotedQR, epsilon: float) -> int:
    d = qr.diagonal()
    if d[0] == 0.0:
        return 1
    below = np.flatnonzero(d / d[0] <= epsilon)
    if below.size:
        return max(1, int(below[0]))
    if qr.steps < min(qr.n_rows, qr.n_cols):
        raise InvalidInputError(
            "epsilon rank selection needs a complete factorization "
            f"(only {qr.steps} pivot steps available)"
        )
    return qr.steps


def _certify_rank(qr: PivotedQR, a: np.ndarray, epsilon: float, k: int) -> int:
    """Smallest k' >= k with ||R22(k')||_2 <= epsilon ||A||_2."""
    norm_a = np.linalg.norm(qr.r, 2) if qr.is_complete else np.linalg.norm(a, 2)
    threshold = epsilon * norm_a
    candidates = list(range(k, qr.rows + 1))
    # Trailing blocks are nested submatrices, so their norms are monotone in k
    pos = bisect.bisect_left(
        candidates, True,
        key=lambda kk: bool(_block_norm(qr.trailing_block(kk)) <= threshold),
    )
    return candidates[min(pos, len(candidates) - 1)]


def select_rank(qr: PivotedQR, criterion: RankCriterion, a=None) -> int:
    """Chooses the ID rank for a factorization of `a`."""
    ell = min(qr.n_rows, qr.n_cols)
    if criterion.mode == "fixed":
        return min(int(criterion.k), ell)
    k = _proxy_rank(qr, float(criterion.epsilon))
    if criterion.certify:
        if a is None and not qr.is_complete:
            raise InvalidInputError("certification needs the factorized matrix")
        k = _certify_rank(qr, a, float(criterion.epsilon), k)
    return k


def _zero_interpolation(m: int, k: int) -> Interpolation:
    t = np.zeros((k, m))
    t[np.arange(k), np.arange(k)] = 1.0
    return Interpolation(indices=np.arange(k), t=t, achieved_error=0.0, certified=True)


def _interpolation_matrix(qr: PivotedQR, k: int) -> np.ndarray:
    """T = [I_k  R11^{-1} R12] Pi^T."""
    r11 = qr.r[:k, :k]
    r12 = qr.r[:k, k:]
    coeffs = solve_triangular(r11, r12, lower=False) if r12.size else r12
    t = np.empty((k, qr.n_cols))
    t[:, qr.perm] = np.hstack([np.eye(k), coeffs])
    return t


def interpolative_decomposition(a, criterion: RankCriterion) -> Interpolation:
    """
    Column ID of `a` from a column-pivoted QR. Fixed mode runs k pivot steps;
    epsilon mode factors completely and picks k from the diagonal proxy (and,
    with certify, from the exact trailing norm).
    """
    a = as_matrix(a)
    n, m = a.shape
    ell = min(n, m)
    if not np.any(a):
        k = min(int(criterion.k), ell) if criterion.mode == "fixed" else 1
        return _zero_interpolation(m, k)

    if criterion.mode == "fixed":
        k = min(int(criterion.k), ell)
        qr = column_pivoted_qr(a, max_steps=k)
    else:
        qr = column_pivoted_qr(a)
        k = select_rank(qr, criterion, a)

    d = qr.diagonal()
    if d[k - 1] / d[0] < config.SINGULARITY_CUTOFF:
        raise RankDeficiencyError(k, numerical_rank(qr))

    t = _interpolation_matrix(qr, k)
    exact = criterion.mode == "fixed" or criterion.certify
    if exact:
        error = _block_norm(qr.trailing_block(k))
    else:
        error = float(d[k]) if k < d.size else 0.0
    log(f"[ID] {n}x{m} -> rank {k} ({criterion.describe()}), error {error:.3e}", "DEBUG")
    return Interpolation(indices=qr.perm[:k].copy(), t=t, achieved_error=error, certified=exact)


def reconstruct(interp: Interpolation, a) -> np.ndarray:
    """A[:, indices] @ T."""
    return np.asarray(a, dtype=np.float64)[:, interp.indices] @ interp.t


# =============================================================================
# NORMS & DIAGNOSTICS
# =============================================================================

def spectral_norm(a, tol: Optional[float] = None, max_iter: Optional[int] = None) -> float:
    """Largest singular value by power iteration on A^T A from a fixed start vector."""
    tol = config.SPECTRAL_TOL if tol is None else tol
    max_iter = config.SPECTRAL_MAX_ITER if max_iter is None else max_iter
    if max_iter < 1:
        raise InvalidInputError(f"power iteration needs max_iter >= 1, got {max_iter}")
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.size == 0 or not np.any(arr):
        return 0.0

    v = np.random.default_rng(0).standard_normal(arr.shape[1])
    v /= np.linalg.norm(v)
    previous = 0.0
    estimate = 0.0
    for _ in range(max_iter):
        w = arr @ v
        estimate = float(np.linalg.norm(w))
        v = arr.T @ w
        norm_v = np.linalg.norm(v)
        if norm_v == 0.0 or abs(estimate - previous) <= tol * estimate:
            return estimate
        v /= norm_v
        previous = estimate
    log(f"[Norm] Power iteration hit {max_iter} iterations", "DEBUG")
    return estimate


def singular_value_profile(a) -> List[ProfilePoint]:
    """
    Both rank diagnostics for k = 0 .. min(n, m) - 1. A zero matrix has
    numerical rank 0, so both curves are 0 everywhere.
    """
    a = as_matrix(a)
    if not np.any(a):
        return [ProfilePoint(k=k, proxy=0.0, trailing_norm=0.0) for k in range(min(a.shape))]
    qr = column_pivoted_qr(a)
    d = qr.diagonal()
    norm_r = spectral_norm(qr.r)
    return [
        ProfilePoint(
            k=k,
            proxy=float(d[k] / d[0]),
            trailing_norm=spectral_norm(qr.trailing_block(k)) / norm_r,
        )
        for k in range(qr.rows)
    ]
