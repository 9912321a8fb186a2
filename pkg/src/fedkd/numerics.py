"""Dense linear algebra, seeded sampling and small statistics helpers.

Matrices are plain ``numpy`` float64 arrays; the functions here add the shape
and finiteness checks the rest of the package relies on.
"""
from __future__ import annotations

import hashlib

import numpy as np
import scipy.linalg

EPS_VAR = 1e-12
EPS_NORM = 1e-12


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix handed to :func:`solve_spd` is not SPD."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {a.shape}")
    return a


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` by Cholesky.

    A failed factorisation raises :class:`NotPositiveDefiniteError`; the
    matrix is never jittered to make it pass.
    """
    a = as_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    vector_rhs = b.ndim == 1
    b = b[:, None] if vector_rhs else as_matrix(b)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"rhs has {b.shape[0]} rows, matrix has {a.shape[0]}")
    scale = max(np.abs(a).max(), 1.0)
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * scale):
        raise NotPositiveDefiniteError("matrix is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None
    x = scipy.linalg.cho_solve(factor, b)
    x = _check_finite(x, "solve_spd")
    return x[:, 0] if vector_rhs else x


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def standardize(v, axis: int = -1) -> np.ndarray:
    """Centre and scale to unit population variance.

    Slices whose variance is at most ``EPS_VAR`` map to zeros, so a following
    softmax gives uniform weights.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("standardize of an empty vector")
    mean = v.mean(axis=axis, keepdims=True)
    var = v.var(axis=axis, keepdims=True)
    degenerate = var <= EPS_VAR
    out = (v - mean) / np.sqrt(np.where(degenerate, 1.0, var))
    return np.where(degenerate, 0.0, out)


def cosine(u, w) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    if u.shape != w.shape:
        raise ShapeError(f"length mismatch: {u.size} vs {w.size}")
    nu, nw = np.linalg.norm(u), np.linalg.norm(w)
    if nu < EPS_NORM or nw < EPS_NORM:
        return 0.0
    return float(np.clip(u @ w / (nu * nw), -1.0, 1.0))


def rowwise_cosine(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cosine between matching rows of two equally shaped matrices."""
    u, w = as_matrix(u), as_matrix(w)
    if u.shape != w.shape:
        raise ShapeError(f"shape mismatch: {u.shape} vs {w.shape}")
    nu = np.linalg.norm(u, axis=1)
    nw = np.linalg.norm(w, axis=1)
    ok = (nu >= EPS_NORM) & (nw >= EPS_NORM)
    dots = np.einsum("ij,ij->i", u, w)
    out = np.zeros(u.shape[0])
    out[ok] = dots[ok] / (nu[ok] * nw[ok])
    return np.clip(out, -1.0, 1.0)


def make_rng(seed, *stream) -> np.random.Generator:
    """PCG64 generator keyed by a master seed plus optional stream ids.

    ``make_rng(seed, "client", 3)`` always yields the same stream, and
    different stream keys yield statistically independent streams.
    """
    keys = [int(seed)] + [_stream_key(s) for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


def _stream_key(s) -> int:
    if isinstance(s, (int, np.integer)):
        return int(s)
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(str(s).encode("utf-8")).digest()[:8], "little")


def rng_normal(rng: np.random.Generator, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    return mean + std * rng.standard_normal(n)


def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))
