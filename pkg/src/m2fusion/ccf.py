"""Canonical correlation analysis and the two feature-fusion operators."""
import struct
from dataclasses import dataclass

import numpy as np

from .cnn import FeatureMatrix
from .errors import InputError, RankDeficiencyError
from .numerics import (as_matrix, covariances, inv_sqrt, read_matrix_from,
                       sym_eig, write_matrix_to)

CCA_MAGIC = b"M2FC"
RANK_TOL = 1e-10


@dataclass(frozen=True)
class CcaTransform:
    a: np.ndarray            # p x d
    b: np.ndarray            # q x d
    correlations: np.ndarray  # d, descending, in [0, 1]
    mean_x: np.ndarray       # p
    mean_y: np.ndarray       # q

    @property
    def d(self):
        return self.a.shape[1]

    @property
    def p(self):
        return self.a.shape[0]

    @property
    def q(self):
        return self.b.shape[0]


def _whitener(s, lam, name):
    eig = sym_eig(s)
    top = max(float(eig.values[0]), 0.0)
    if lam == 0 and (top == 0.0 or eig.values[-1] <= RANK_TOL * top):
        raise RankDeficiencyError(
            f"{name} covariance is rank deficient (smallest eigenvalue {eig.values[-1]:.3e}); "
            "use a ridge lambda > 0 or reduce the feature dimension")
    return inv_sqrt(s, eps=max(RANK_TOL * top, 1e-300), eig=eig)


def fit_cca(x, y, lam=None, d=None):
    """Fit canonical directions for column-sample matrices ``x`` (p x n) and ``y`` (q x n).

    With ``Wx = Sxx^-1/2`` and ``Wy = Syy^-1/2`` the singular vectors of
    ``Wx Sxy Wy`` give ``A = Wx U`` and ``B = Wy V``, so each variate has unit
    variance and the i-th pair has correlation ``sigma_i``. ``lam=None``
    applies the default relative ridge; ``d=None`` keeps every direction
    above the numerical rank threshold.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    p, q = x.shape[0], y.shape[0]
    if d is not None and not 1 <= d <= min(p, q):
        raise InputError(f"canonical dimension {d} outside [1, {min(p, q)}]")
    cov = covariances(x, y, lam)
    wx = _whitener(cov.sxx, cov.lam_x, "X")
    wy = _whitener(cov.syy, cov.lam_y, "Y")
    m = wx @ cov.sxy @ wy

    # thin SVD through the smaller Gram matrix; the other side follows from M
    if p <= q:
        eig = sym_eig(m @ m.T)
        sigma = np.sqrt(np.maximum(eig.values, 0.0))
        rank = int(np.sum(sigma > RANK_TOL * max(sigma[0], 1e-300)))
        keep = min(d or rank, rank)
        if keep == 0:
            raise RankDeficiencyError("X and Y have no correlated directions")
        u = eig.vectors[:, :keep]
        v = (m.T @ u) / sigma[:keep]
    else:
        eig = sym_eig(m.T @ m)
        sigma = np.sqrt(np.maximum(eig.values, 0.0))
        rank = int(np.sum(sigma > RANK_TOL * max(sigma[0], 1e-300)))
        keep = min(d or rank, rank)
        if keep == 0:
            raise RankDeficiencyError("X and Y have no correlated directions")
        v = eig.vectors[:, :keep]
        u = (m @ v) / sigma[:keep]

    return CcaTransform(
        a=wx @ u,
        b=wy @ v,
        correlations=np.clip(sigma[:keep], 0.0, 1.0),
        mean_x=x.mean(axis=1),
        mean_y=y.mean(axis=1),
    )


def transform(t, x, y):
    """Canonical variates ``(A^T (X - mean_x), B^T (Y - mean_y))``, each d x n."""
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[0] != t.p or y.shape[0] != t.q:
        raise InputError(f"transform expects {t.p}- and {t.q}-row inputs, got {x.shape[0]} and {y.shape[0]}")
    if x.shape[1] != y.shape[1]:
        raise InputError("x and y sample counts differ")
    xp = t.a.T @ (x - t.mean_x[:, None])
    yp = t.b.T @ (y - t.mean_y[:, None])
    return xp, yp


def fuse_sum(xp, yp):
    xp = np.asarray(xp, dtype=np.float64)
    yp = np.asarray(yp, dtype=np.float64)
    if xp.shape != yp.shape:
        raise InputError(f"fuse_sum shape mismatch {xp.shape} vs {yp.shape}")
    return xp + yp


def fuse_concat(f1, f2):
    """Stack two feature sets row-wise; column order is preserved."""
    a = np.asarray(f1, dtype=np.float64)
    b = np.asarray(f2, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InputError(f"fuse_concat needs equal sample counts, got {a.shape} and {b.shape}")
    layers = [getattr(f, "source_layer", "") for f in (f1, f2)]
    return FeatureMatrix(np.vstack([a, b]), source_layer="+".join(l for l in layers if l))


def save_transform(path, t):
    with open(path, "wb") as fh:
        fh.write(CCA_MAGIC)
        fh.write(struct.pack("<III", t.p, t.q, t.d))
        for m in (t.a, t.b, t.correlations[None, :], t.mean_x[None, :], t.mean_y[None, :]):
            write_matrix_to(fh, m)


def load_transform(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CCA_MAGIC:
            raise InputError(f"{path}: not a CCA transform file")
        p, q, d = struct.unpack("<III", fh.read(12))
        a, b, corr, mx, my = (read_matrix_from(fh) for _ in range(5))
    if a.shape != (p, d) or b.shape != (q, d):
        raise InputError(f"{path}: inconsistent transform dimensions")
    return CcaTransform(a, b, corr[0], mx[0], my[0])
