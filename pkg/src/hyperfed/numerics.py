"""Dense float64 linear algebra and seeded randomness.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The routines
here that feed the calibration path (``matmul``, ``outer_accumulate``) use an
explicit, fixed summation order so results do not depend on the BLAS build.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .errors import CapacityError, ParameterError, ShapeError, SingularityError

JITTER_SCALE = 1e-8


@dataclass(frozen=True)
class Rng:
    """A (seed, stream) pair naming one reproducible random stream.

    Child streams are addressed by integer paths, so ``rng.child(3, 7)`` is the
    same stream no matter how many other children were drawn before it.
    """

    seed: int
    stream: tuple[int, ...] = field(default=())

    def child(self, *ids: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(ss))


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with the summation order of the naive triple loop.

    ``out[i, j] = (((0 + a[i,0] b[0,j]) + a[i,1] b[1,j]) + ...)``, with no fused
    multiply-add, so it matches a scalar reference bit for bit.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def outer_accumulate(acc: np.ndarray, u, v) -> np.ndarray:
    """``acc += u v^T`` in place; returns ``acc``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or acc.shape != (u.shape[0], v.shape[0]):
        raise ShapeError(f"outer_accumulate: acc {acc.shape}, u {u.shape}, v {v.shape}")
    acc += u[:, None] * v[None, :]
    return acc


def orthonormal_rows(c: int, l: int, rng: Rng) -> np.ndarray:
    """C x l matrix with orthonormal rows.

    Classical Gram-Schmidt over a Gaussian matrix, with a second
    orthogonalization pass per row.
    """
    if c < 1 or l < 1:
        raise ParameterError("orthonormal_rows needs c >= 1 and l >= 1")
    if c > l:
        raise CapacityError(f"cannot fit {c} orthonormal rows in dimension {l}")
    g = rng.generator().standard_normal((c, l))
    q = np.zeros((c, l))
    for i in range(c):
        v = g[i].copy()
        for _ in range(2):
            if i:
                v -= q[:i].T @ (q[:i] @ v)
        norm = np.linalg.norm(v)
        if norm <= 1e-12 * np.linalg.norm(g[i]):
            # probability zero for Gaussian input
            raise SingularityError("Gaussian draw was rank deficient", pivot=i)
        q[i] = v / norm
    return q


@dataclass
class SpdSolution:
    x: np.ndarray
    regularized: bool = False
    jitter: float = 0.0


def _cholesky_solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray | None, int]:
    """Returns (x, 0) on success or (None, pivot) for the first bad pivot."""
    n = a.shape[0]
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        return None, info - 1
    if info < 0:
        raise ShapeError(f"dpotrf argument {-info} invalid")
    anorm = np.abs(a).sum(axis=0).max()
    rcond, info = lapack.dpocon(c, anorm, uplo="L")
    if info != 0 or not rcond > n * np.finfo(float).eps:
        diag = np.diag(c)
        return None, int(np.argmin(diag))
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        return None, 0
    return x, 0


def solve_spd(a, b) -> SpdSolution:
    """Solve ``a x = b`` for symmetric positive definite ``a`` by Cholesky.

    A factorization that breaks down, or whose reciprocal condition number is
    below ``n * eps``, is retried once on ``a + 1e-8 * tr(a)/n * I`` and the
    result is flagged as regularized.
    """
    a = as_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b[:, None]
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"solve_spd: a must be square, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != n:
        raise ShapeError(f"solve_spd: b has shape {b.shape}, expected ({n}, k)")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ParameterError("solve_spd: non-finite input")
    scale = np.abs(a).max()
    if np.abs(a - a.T).max() > 1e-9 * max(scale, np.finfo(float).tiny):
        raise ShapeError("solve_spd: matrix is not symmetric")

    x, pivot = _cholesky_solve(a, b)
    if x is not None:
        return SpdSolution(x[:, 0] if vector_rhs else x)
    jitter = JITTER_SCALE * np.trace(a) / n
    if jitter > 0:
        x, pivot = _cholesky_solve(a + jitter * np.eye(n), b)
        if x is not None:
            return SpdSolution(x[:, 0] if vector_rhs else x, regularized=True, jitter=jitter)
    raise SingularityError(f"matrix is singular even after diagonal jitter (pivot {pivot})", pivot=pivot)


def dirichlet(alpha: float, k: int, rng: Rng) -> np.ndarray:
    """Symmetric Dirichlet draw by normalizing k Gamma(alpha, 1) variates."""
    if not alpha > 0:
        raise ParameterError(f"dirichlet alpha must be positive, got {alpha}")
    if k < 1:
        raise ParameterError(f"dirichlet needs k >= 1, got {k}")
    gen = rng.generator()
    g = gen.standard_gamma(alpha, size=k)
    total = g.sum()
    if total == 0.0:
        # all draws underflowed (tiny alpha): the limit is a random vertex
        g = np.zeros(k)
        g[gen.integers(k)] = 1.0
        total = 1.0
    return g / total
