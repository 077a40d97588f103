"""Dense matrix helpers, splittable RNG streams and a one-sided Jacobi SVD.

Matrices are plain 2-D ``float64`` numpy arrays; the helpers here add the
shape checks and serialization the rest of the package relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class ConvergenceError(RuntimeError):
    pass


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name}: expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: non-finite entries")
    return m


def matrix_to_json(m: np.ndarray) -> dict:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": [float(v) for v in m.ravel()]}


def matrix_from_json(obj: dict) -> np.ndarray:
    try:
        rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed matrix record: {exc!r}") from None
    if rows < 1 or cols < 1 or len(data) != rows * cols:
        raise ShapeError(f"matrix record: {len(data)} values for shape {rows}x{cols}")
    return as_matrix(np.array(data, dtype=np.float64).reshape(rows, cols))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape[0]}x{a.shape[1]} times {b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


# --------------------------------------------------------------------------
# random streams


class Rng:
    """Seeded Philox stream addressable by ``(seed, *stream_index)``.

    Two ``Rng`` objects with the same seed and index produce identical draws;
    :meth:`substream` derives statistically independent children, which is
    how Monte Carlo samples get reproducible per-slot noise.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def substream(self, *index: int) -> Rng:
        return Rng(self.seed, self.stream + tuple(index))

    def standard_normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def sample_gaussian(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"sample_gaussian: negative std {std}")
    if std == 0:
        return np.full((rows, cols), float(mean))
    return mean + std * rng.standard_normal((rows, cols))


def sample_matrix_normal(rng: Rng, mean: np.ndarray, row_cov_diag, col_cov_diag) -> np.ndarray:
    """Draw from MN(mean, diag(row_cov_diag), diag(col_cov_diag)).

    Entry (i, j) is independent N(mean_ij, row_i * col_j).
    """
    mean = np.asarray(mean, dtype=np.float64)
    rows = np.asarray(row_cov_diag, dtype=np.float64).ravel()
    cols = np.asarray(col_cov_diag, dtype=np.float64).ravel()
    if rows.shape[0] != mean.shape[0] or cols.shape[0] != mean.shape[1]:
        raise ShapeError(
            f"sample_matrix_normal: covariance diagonals {rows.shape[0]}/{cols.shape[0]} "
            f"do not match mean shape {mean.shape}"
        )
    if np.any(rows <= 0) or np.any(cols <= 0):
        raise ValueError("sample_matrix_normal: covariance diagonals must be positive")
    scale = np.sqrt(np.outer(rows, cols))
    return mean + scale * rng.standard_normal(mean.shape)


# --------------------------------------------------------------------------
# SVD


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _complete_orthonormal(q: np.ndarray, filled: np.ndarray) -> np.ndarray:
    # Replace the columns of q not flagged in `filled` with an orthonormal completion.
    q = q.copy()
    n = q.shape[0]
    basis = [q[:, j] for j in range(q.shape[1]) if filled[j]]
    candidates = iter(np.eye(n))
    for j in range(q.shape[1]):
        if filled[j]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            norm = np.linalg.norm(w)
            if norm > 1e-6:
                q[:, j] = w / norm
                basis.append(q[:, j])
                break
    return q


def svd(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Columns are orthogonalized pairwise until every pair satisfies
    ``|<a_p, a_q>| <= tol * ||a_p|| * ||a_q||``. Returns ``k = min(rows, cols)``
    singular triplets sorted by descending singular value.
    """
    a = as_matrix(m, "svd input")
    rows, cols = a.shape
    if rows < cols:
        t = svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=t.v, sigma=t.sigma, v=t.u)

    work = a.copy()
    v = np.eye(cols)
    scale = np.abs(work).max()
    tiny = np.finfo(float).tiny if scale == 0 else (scale * 1e-300)
    converged = cols == 1
    for _ in range(max_sweeps):
        if converged:
            break
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                ap, aq = work[:, p], work[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha <= tiny or beta <= tiny:
                    continue
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                work[:, p], work[:, q] = new_p, new_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            converged = True
    if not converged:
        raise ConvergenceError(f"svd: no convergence after {max_sweeps} sweeps on a {rows}x{cols} matrix")

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    filled = sigma > sigma[0] * 1e-13 if sigma[0] > 0 else np.zeros(cols, dtype=bool)
    u = np.zeros((rows, cols))
    u[:, filled] = work[:, filled] / sigma[filled]
    if not np.all(filled):
        sigma = np.where(filled, sigma, 0.0)
        u = _complete_orthonormal(u, filled)
    return SvdResult(u=u, sigma=sigma, v=v)
