"""Dense matrix primitives: covariances, Jacobi eigensolver, whitening, bicubic resampling.

Matrices are plain 2-D ``float64`` numpy arrays. Feature matrices hold one
sample per column (``p x n``).
"""
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, InputError

MATRIX_MAGIC = b"M2FM"

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise InputError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class CovarianceSet:
    sxx: np.ndarray
    syy: np.ndarray
    sxy: np.ndarray
    lam_x: float
    lam_y: float

    @property
    def syx(self):
        return self.sxy.T


class EigenDecomposition(NamedTuple):
    values: np.ndarray   # descending
    vectors: np.ndarray  # unit-norm eigenvectors as columns


def default_ridge(s):
    """Ridge weight ``1e-4 * trace(S) / m`` for an ``m x m`` covariance."""
    return 1e-4 * float(np.trace(s)) / s.shape[0]


def covariances(x, y, lam=None):
    """Within- and between-set sample covariances of column-sample matrices.

    ``lam=None`` uses :func:`default_ridge` separately for each within-set
    block; a float applies the same ridge to both.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise InputError(f"sample count mismatch: x has {x.shape[1]}, y has {y.shape[1]}")
    n = x.shape[1]
    if n < 2:
        raise InputError("need at least two samples")
    if lam is not None and lam < 0:
        raise InputError("ridge lambda must be non-negative")

    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    sxx = (xc @ xc.T) / (n - 1)
    syy = (yc @ yc.T) / (n - 1)
    sxy = (xc @ yc.T) / (n - 1)
    # exact symmetry; the products above agree only up to rounding
    sxx = np.triu(sxx) + np.triu(sxx, 1).T
    syy = np.triu(syy) + np.triu(syy, 1).T

    lam_x = default_ridge(sxx) if lam is None else float(lam)
    lam_y = default_ridge(syy) if lam is None else float(lam)
    sxx[np.diag_indices_from(sxx)] += lam_x
    syy[np.diag_indices_from(syy)] += lam_y
    return CovarianceSet(sxx, syy, sxy, lam_x, lam_y)


def _round_robin(m):
    # circle-method tournament: m-1 (or m) rounds of disjoint index pairs
    n = m + (m % 2)
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        keep = (p < m) & (q < m)
        p, q = p[keep], q[keep]
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(a):
    # direct sum over off-diagonal entries; ||A||^2 - ||diag||^2 cancels
    # catastrophically and stalls near sqrt(eps) * ||A||
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def sym_eig(s, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the rotations of one round touch disjoint rows and can be applied
    together. Iteration stops when the off-diagonal Frobenius norm drops
    below ``tol * ||S||_F``.
    """
    a = as_matrix(s, "s").copy()
    m = a.shape[0]
    if a.shape[1] != m:
        raise InputError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise InputError("sym_eig input is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(m)

    norm = np.linalg.norm(a)
    rounds = _round_robin(m) if m > 1 else []
    for _ in range(max_sweeps):
        off = _off_norm(a)
        if off <= tol * norm:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            theta = np.where(active, (a[q, q] - a[p, p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.where(active, np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            t[active & (theta == 0.0)] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * c

            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - sn * aq
            a[:, q] = sn * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - sn[:, None] * aq
            a[q, :] = sn[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0

            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - sn * vq
            v[:, q] = sn * vp + c * vq
    else:
        off = _off_norm(a)
        if off > tol * norm:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (off-norm {off:.3e})")

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    v = v[:, order]
    v /= np.linalg.norm(v, axis=0)
    # deterministic sign: largest-magnitude component of each vector positive
    pivot = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivot, np.arange(m)])
    signs[signs == 0] = 1.0
    return EigenDecomposition(values, v * signs)


def inv_sqrt(s, eps=1e-12, eig=None):
    """``S^(-1/2)`` with eigenvalues clamped from below at ``eps``.

    ``eig`` may carry a precomputed :func:`sym_eig` result for ``s``.
    """
    values, vectors = sym_eig(s) if eig is None else eig
    floor = -1e-8 * max(1.0, abs(float(values[0])))
    if values[-1] < floor:
        raise InputError(f"matrix is not positive semi-definite (eigenvalue {values[-1]:.3e})")
    d = np.maximum(values, eps) ** -0.5
    out = (vectors * d) @ vectors.T
    return 0.5 * (out + out.T)


def _cubic_kernel(x, a=-0.5):
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _resize_axis0(img, out_n):
    n = img.shape[0]
    dst = np.arange(out_n, dtype=np.float64)
    src = (dst + 0.5) * (n / out_n) - 0.5
    base = np.floor(src)
    frac = src - base
    base = base.astype(np.int64)
    offsets = np.arange(-1, 3)
    idx = np.clip(base[:, None] + offsets[None, :], 0, n - 1)
    w = _cubic_kernel(frac[:, None] - offsets[None, :])
    ref = np.clip(base, 0, n - 1)
    r = img[ref]
    # weights sum to one, so expanding around a reference tap keeps
    # constant inputs exactly constant
    return r + np.einsum("ik,ik...->i...", w, img[idx] - r[:, None])


def bicubic_resize(img, out_h, out_w):
    """Bicubic resampling (Keys kernel, a=-0.5), replicate edges, pixel-center alignment."""
    img = as_matrix(img, "img")
    if out_h < 1 or out_w < 1:
        raise InputError("output size must be at least 1x1")
    out = img if out_h == img.shape[0] else _resize_axis0(img, out_h)
    if out_w != img.shape[1]:
        out = _resize_axis0(out.T, out_w).T
    return np.ascontiguousarray(out)


def write_matrix_to(fh, m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    fh.write(MATRIX_MAGIC)
    fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrix_from(fh):
    magic = fh.read(4)
    if magic != MATRIX_MAGIC:
        raise InputError(f"bad matrix magic {magic!r}")
    rows, cols = struct.unpack("<II", fh.read(8))
    raw = fh.read(8 * rows * cols)
    if len(raw) != 8 * rows * cols:
        raise InputError("truncated matrix payload")
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_matrix(path, m):
    with open(path, "wb") as fh:
        write_matrix_to(fh, m)


def read_matrix(path):
    with open(path, "rb") as fh:
        return read_matrix_from(fh)
