"""Dense linear algebra and seeded sampling used throughout the toolkit.

Everything works on float64 numpy arrays. A "matrix" is a 2-D array; the
helpers here add the shape checks and error messages the rest of the code
relies on, plus a cyclic Jacobi eigensolver and a Cholesky-based SPD solver.

Random draws come from :class:`RngStream`, a Philox (counter-based) bit
generator feeding numpy's ziggurat normal sampler. The same seed gives the
same draw sequence on every run.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from bxv.errors import DataError, NumericalError, ShapeError

BXM_MAGIC = b"BXM1"


def as_matrix(a, name="matrix"):
    """Return ``a`` as a 2-D float64 array, rejecting NaN/Inf entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")
    return m


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


class RngStream:
    """Seeded stream of random draws.

    ``split(k)`` derives an independent child stream keyed by ``k``; the
    parent stream is not advanced, so splitting is order-independent.
    """

    def __init__(self, seed=0, _key=None):
        if _key is None:
            seed = int(seed)
            if seed < 0 or seed >= 2**64:
                raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
            _key = (seed,)
        self.key = tuple(int(k) for k in _key)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(list(self.key))))

    @property
    def seed(self):
        return self.key[0]

    def split(self, k):
        return RngStream(_key=self.key + (int(k),))

    def normal(self, shape):
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        """Integers in ``[low, high]`` (inclusive on both ends)."""
        if high is None:
            low, high = 0, low
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n):
        return self._gen.permutation(n)


class ConstantNoise(RngStream):
    """Test hook: an RngStream whose normal draws are all ``value``.

    Passing ``ConstantNoise(0.0)`` wherever weight noise is drawn forces
    every sampled weight onto the posterior mean.
    """

    def __init__(self, value=0.0):
        super().__init__(0)
        self.value = float(value)

    def split(self, k):
        return ConstantNoise(self.value)

    def normal(self, shape):
        return np.full(shape, self.value, dtype=np.float64)


def zero_noise():
    return ConstantNoise(0.0)


def gaussian_sample(rng, rows, cols):
    if rows < 1 or cols < 1:
        raise ShapeError(f"gaussian_sample needs rows, cols >= 1, got {rows}x{cols}")
    return rng.normal((rows, cols))


def _check_symmetric(a, tol):
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > tol * scale:
        raise ShapeError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def sym_eig(a, tol=1e-14, max_sweeps=60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors stored as columns.
    """
    a = _check_symmetric(a, 1e-9).copy()
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a[offdiag] ** 2))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    a = _check_symmetric(a, 1e-9)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("matrix is not positive definite (Cholesky pivot <= 0)") from exc


def solve_spd(a, b):
    """Solve ``a @ x = b`` for SPD ``a`` via Cholesky; ``b`` may be 1-D or 2-D."""
    low = cholesky(a)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != low.shape[0]:
        raise ShapeError(f"cannot solve {low.shape} system with right-hand side {b.shape}")
    y = solve_triangular(low, b, lower=True)
    return solve_triangular(low.T, y, lower=False)


def logdet_spd(a):
    low = cholesky(a)
    return 2.0 * float(np.sum(np.log(np.diag(low))))


def floor_eigenvalues(a, floor):
    """Symmetric matrix with every eigenvalue raised to at least ``floor``."""
    w, v = sym_eig(a)
    w = np.maximum(w, floor)
    return (v * w) @ v.T


def write_bxm(path, matrix):
    """Write a matrix (or vector, as one row) in the BXM1 binary format."""
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"BXM1 stores 2-D data, got shape {m.shape}")
    rows, cols = m.shape
    with open(path, "wb") as f:
        f.write(BXM_MAGIC)
        f.write(struct.pack("<II", rows, cols))
        f.write(np.ascontiguousarray(m).tobytes())


def read_bxm(path):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != BXM_MAGIC:
        raise DataError(f"{path}: not a BXM1 file")
    rows, cols = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != rows * cols * 8:
        raise DataError(f"{path}: expected {rows}x{cols} doubles, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
