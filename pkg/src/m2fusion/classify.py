"""One-vs-all linear SVM (dual coordinate descent) and decision-level max fusion."""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .numerics import read_matrix_from, write_matrix_to

SVM_MAGIC = b"M2FS"


@dataclass(frozen=True)
class SvmModel:
    weights: np.ndarray  # classes x d, on standardized features
    biases: np.ndarray   # classes
    c: float
    mean: np.ndarray     # d
    scale: np.ndarray    # d

    @property
    def classes(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]


@dataclass(frozen=True)
class ScoreVector:
    scores: np.ndarray
    normalized: bool = False


def _standardize_stats(z):
    mean = z.mean(axis=1)
    scale = z.std(axis=1)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def dual_cd(x, y, c, epochs, rng, tol=1e-6):
    """Hinge-loss linear SVM ``min 1/2||w||^2 + c sum max(0, 1 - y w.x)`` in the dual.

    ``x`` is n x d (rows are samples, bias column already appended), ``y`` in {-1, +1}.
    Returns ``(w, alpha, gap)``; sweeps stop once the duality gap drops below
    ``tol * max(1, primal)``.
    """
    n, dim = x.shape
    alpha = np.zeros(n)
    w = np.zeros(dim)
    qii = np.einsum("ij,ij->i", x, x)
    rows = list(x)
    gap = np.inf
    for _ in range(epochs):
        for i in rng.permutation(n):
            if qii[i] <= 0.0:
                continue
            yi = y[i]
            g = yi * rows[i].dot(w) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == c:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg != 0.0:
                new = min(max(a - g / qii[i], 0.0), c)
                if new != a:
                    w += (new - a) * yi * rows[i]
                    alpha[i] = new
        ww = w.dot(w)
        primal = 0.5 * ww + c * np.maximum(0.0, 1.0 - y * (x @ w)).sum()
        dual = alpha.sum() - 0.5 * ww
        gap = primal - dual
        if gap < tol * max(1.0, primal):
            break
    return w, alpha, gap


def train_svm(z, labels, c=1.0, epochs=1000, seed=0, tol=1e-6):
    """Train one binary SVM per class on column-sample features ``z`` (d x n)."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[1] != len(labels):
        raise InputError(f"features {z.shape} do not match {len(labels)} labels")
    if not np.all(np.isfinite(z)):
        raise InputError("features contain non-finite values")
    classes = int(labels.max()) + 1 if len(labels) else 0
    if classes < 2 or len(np.unique(labels)) < 2:
        raise InputError("SVM training needs at least two distinct classes")
    if labels.min() < 0:
        raise InputError("labels must be non-negative")
    if c <= 0:
        raise InputError("c must be positive")

    mean, scale = _standardize_stats(z)
    xs = ((z - mean[:, None]) / scale[:, None]).T
    xa = np.hstack([xs, np.ones((xs.shape[0], 1))])
    weights = np.zeros((classes, z.shape[0]))
    biases = np.zeros(classes)
    seeds = np.random.SeedSequence(seed).spawn(classes)
    for k in range(classes):
        y = np.where(labels == k, 1.0, -1.0)
        w, _, _ = dual_cd(xa, y, c, epochs, np.random.default_rng(seeds[k]), tol)
        weights[k] = w[:-1]
        biases[k] = w[-1]
    return SvmModel(weights, biases, float(c), mean, scale)


def decision_scores(m, z):
    """Raw margins for a batch, classes x n."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != m.dim:
        raise InputError(f"feature dimension {z.shape[0]} does not match model dimension {m.dim}")
    zs = (z - m.mean[:, None]) / m.scale[:, None]
    return m.weights @ zs + m.biases[:, None]


def predict_scores(m, z):
    return ScoreVector(decision_scores(m, z)[:, 0], normalized=False)


def predict(m, z):
    return decision_scores(m, z).argmax(axis=0)


def softmax_normalize(s):
    if s.normalized:
        raise InputError("scores are already normalized")
    v = np.asarray(s.scores, dtype=np.float64)
    e = np.exp(v - v.max())
    return ScoreVector(e / e.sum(), normalized=True)


def max_fuse(s1, s2):
    """Label with the largest per-class maximum of two normalized score vectors.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class index.
    """
    if not (s1.normalized and s2.normalized):
        raise InputError("max_fuse needs softmax-normalized scores")
    if len(s1.scores) != len(s2.scores):
        raise InputError("score vectors have different class counts")
    return int(np.argmax(np.maximum(s1.scores, s2.scores)))


def save_svm(path, m):
    with open(path, "wb") as fh:
        fh.write(SVM_MAGIC)
        fh.write(struct.pack("<II", m.classes, m.dim))
        for a in (m.weights, m.biases[None, :], m.mean[None, :], m.scale[None, :], np.array([[m.c]])):
            write_matrix_to(fh, a)


def load_svm(path):
    with open(path, "rb") as fh:
        if fh.read(4) != SVM_MAGIC:
            raise InputError(f"{path}: not an SVM model file")
        classes, dim = struct.unpack("<II", fh.read(8))
        w, b, mean, scale, c = (read_matrix_from(fh) for _ in range(5))
    if w.shape != (classes, dim):
        raise InputError(f"{path}: inconsistent SVM dimensions")
    return SvmModel(w, b[0], float(c[0, 0]), mean[0], scale[0])
