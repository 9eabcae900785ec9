"""Differentiable matrix square root and an independent eigen oracle.

ns_sqrt runs a trace-normalized coupled Newton iteration unrolled on
the tape, so its gradient is exact backprop through the iterates.
jacobi_eigh is a plain-numpy cyclic Jacobi eigensolver used only as a
cross-checking oracle; it shares no code path with ns_sqrt.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

TRACE_FLOOR = 1e-12


def _check_square_symmetric(data: np.ndarray, name: str) -> None:
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise ValueError(f"{name}: need a square matrix, got shape {data.shape}")
    tol = 1e-9 * max(1.0, float(np.max(np.abs(data))))
    asym = float(np.max(np.abs(data - data.T)))
    if asym > tol:
        raise ValueError(f"{name}: input not symmetric (max asymmetry {asym:.3e})")


def ns_sqrt(a: Tensor, iters: int = 5) -> Tensor:
    """Approximate sqrt of a symmetric PSD matrix, differentiable.

    Normalizes by the trace, runs `iters` coupled iterations
    y <- y @ t, z <- t @ z with t = (3I - z y)/2 starting from
    y = a/tr(a), z = I, then rescales by sqrt(tr(a)). A trace at or
    below TRACE_FLOOR short-circuits to the zero matrix.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    _check_square_symmetric(a.data, "ns_sqrt")
    if iters < 1:
        raise ValueError(f"ns_sqrt: iters must be >= 1, got {iters}")
    d = a.shape[0]
    eye = Tensor(np.eye(d, dtype=a.data.dtype), dtype=a.data.dtype.type)
    tr = T.tsum(T.mul(a, eye))
    if float(tr.data) <= TRACE_FLOOR:
        return T.mul(a, 0.0)
    y = T.div(a, tr)
    z = eye
    three_eye = Tensor(3.0 * np.eye(d, dtype=a.data.dtype), dtype=a.data.dtype.type)
    for _ in range(iters):
        t = T.mul(T.sub(three_eye, T.matmul(z, y)), 0.5)
        y = T.matmul(y, t)
        z = T.matmul(t, z)
    return T.mul(y, T.sqrt(tr))


def add_ridge(a: Tensor, scale: float) -> Tensor:
    """a + eps*I with eps = scale * tr(a) / d, on the tape."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    d = a.shape[0]
    eye = Tensor(np.eye(d, dtype=a.data.dtype), dtype=a.data.dtype.type)
    tr = T.tsum(T.mul(a, eye))
    eps = T.mul(tr, scale / d)
    return T.add(a, T.mul(eye, eps))


# ---------------------------------------------------------------------------
# oracle: cyclic Jacobi eigendecomposition (numpy only, not differentiable)

def jacobi_eigh(a: np.ndarray, tol: float = 1e-12,
                max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and orthonormal eigenvectors of a symmetric matrix.

    Cyclic sweeps of 2x2 rotations until the off-diagonal Frobenius
    norm drops below tol relative to the matrix norm. Raises if not
    converged after max_sweeps.
    """
    _check_square_symmetric(np.asarray(a, dtype=np.float64), "jacobi_eigh")
    m = np.array(a, dtype=np.float64)
    n = m.shape[0]
    v = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(m)))
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(m - np.diag(np.diag(m))))
        if off <= tol * scale:
            return np.diag(m).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e12:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                m[:, [p, q]] = m[:, [p, q]] @ rot
                m[[p, q], :] = rot.T @ m[[p, q], :]
                v[:, [p, q]] = v[:, [p, q]] @ rot
    raise RuntimeError(f"jacobi_eigh: no convergence after {max_sweeps} sweeps")


def eig_sqrt_oracle(a: np.ndarray) -> np.ndarray:
    """Reference matrix sqrt: eigendecompose, clamp negatives, rebuild."""
    w, v = jacobi_eigh(a)
    w = np.maximum(w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def random_spd(d: int, rng: np.random.Generator, cond: float = 100.0) -> np.ndarray:
    """Random SPD matrix with the given condition number."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    w = np.logspace(0.0, np.log10(cond), d)
    return (q * w) @ q.T
