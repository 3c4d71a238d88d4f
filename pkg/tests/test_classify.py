import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from m2fusion import classify
from m2fusion.classify import ScoreVector, SvmModel
from m2fusion.errors import InputError

scores = arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50, allow_nan=False))


def clusters(seed=0, n=40):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, size=(2, n)) + np.array([[5.0], [0.0]])
    b = rng.uniform(-1, 1, size=(2, n)) - np.array([[5.0], [0.0]])
    return np.hstack([a, b]), np.repeat([0, 1], n)


def blobs(seed=0, classes=4, n=30, d=5, spread=1.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=3.0, size=(classes, d))
    labels = np.repeat(np.arange(classes), n)
    z = centers[labels].T + spread * rng.normal(size=(d, classes * n))
    return z, labels


# --- training ---------------------------------------------------------------

def test_separable_clusters_fit_perfectly():
    z, y = clusters()
    m = classify.train_svm(z, y)
    assert np.array_equal(classify.predict(m, z), y)


def test_identical_labels_rejected():
    z, _ = clusters()
    with pytest.raises(InputError):
        classify.train_svm(z, np.zeros(z.shape[1], dtype=int))
    with pytest.raises(InputError):
        classify.train_svm(z, np.zeros(3, dtype=int))
    with pytest.raises(InputError):
        classify.train_svm(z, np.repeat([0, 1], 40), c=0.0)


def test_same_seed_same_weights():
    z, y = blobs(1)
    a = classify.train_svm(z, y, seed=3)
    b = classify.train_svm(z, y, seed=3)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)


def test_dual_solution_is_certified_optimal():
    rng = np.random.default_rng(2)
    x = np.hstack([rng.normal(size=(60, 3)), np.ones((60, 1))])
    y = np.where(x[:, 0] + 0.5 * rng.normal(size=60) > 0, 1.0, -1.0)
    c = 0.7
    w, alpha, gap = classify.dual_cd(x, y, c, 5000, np.random.default_rng(0), tol=1e-12)
    assert np.all((alpha >= 0) & (alpha <= c))
    assert np.allclose(w, (alpha * y) @ x, atol=1e-10)
    # weak duality: primal >= dual, so a vanishing gap proves optimality
    primal = 0.5 * w @ w + c * np.maximum(0, 1 - y * (x @ w)).sum()
    dual = alpha.sum() - 0.5 * w @ w
    assert primal - dual < 1e-8 * max(1.0, primal)
    g = y * (x @ w) - 1
    viol = np.where(alpha <= 0, np.maximum(-g, 0), np.where(alpha >= c, np.maximum(g, 0), np.abs(g)))
    assert viol.max() < 1e-6


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 100.0))
def test_positive_rescaling_keeps_predictions(alpha):
    z, y = blobs(3, spread=2.0)
    base = classify.predict(classify.train_svm(z, y), z)
    scaled = classify.predict(classify.train_svm(alpha * z, y), alpha * z)
    assert np.array_equal(base, scaled)


def test_multiclass_blobs():
    z, y = blobs(4, classes=5, spread=0.5)
    m = classify.train_svm(z, y)
    assert m.classes == 5 and m.dim == 5
    assert np.mean(classify.predict(m, z) == y) == 1.0


def test_constant_feature_is_harmless():
    z, y = clusters()
    z = np.vstack([z, np.full((1, z.shape[1]), 3.0)])
    m = classify.train_svm(z, y)
    assert m.scale[-1] == 1.0
    assert np.array_equal(classify.predict(m, z), y)


# --- scores -----------------------------------------------------------------

def test_zero_model_scores():
    m = SvmModel(np.zeros((3, 2)), np.zeros(3), 1.0, np.zeros(2), np.ones(2))
    assert np.array_equal(classify.predict_scores(m, np.array([1.0, -2.0])).scores, np.zeros(3))


def test_mirrored_two_class_scores_are_opposite():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(2, 30)) + np.array([[3.0], [0.0]])
    z = np.hstack([a, -a])
    y = np.repeat([0, 1], 30)
    m = classify.train_svm(z, y, epochs=5000, tol=1e-12)
    s = classify.decision_scores(m, rng.normal(size=(2, 10)))
    assert np.allclose(s[0], -s[1], atol=1e-4)


def test_argmax_of_scores_is_prediction():
    z, y = blobs(6)
    m = classify.train_svm(z, y)
    for j in range(0, z.shape[1], 7):
        assert int(np.argmax(classify.predict_scores(m, z[:, j]).scores)) == classify.predict(m, z[:, j:j + 1])[0]


def test_dimension_mismatch():
    z, y = blobs(7)
    m = classify.train_svm(z, y)
    with pytest.raises(InputError):
        classify.decision_scores(m, z[:3])


# --- normalization and fusion -----------------------------------------------

def test_softmax_uniform():
    out = classify.softmax_normalize(ScoreVector(np.full(4, 2.5)))
    assert out.normalized
    assert np.array_equal(out.scores, np.full(4, 0.25))


def test_softmax_two_values():
    out = classify.softmax_normalize(ScoreVector(np.array([10.0, 0.0]))).scores
    assert abs(out[0] - 1.0) < 1e-4 and abs(out[1]) < 1e-4
    assert out[1] == pytest.approx(np.exp(-10) / (1 + np.exp(-10)), rel=1e-12)


def test_softmax_only_once():
    s = classify.softmax_normalize(ScoreVector(np.array([1.0, 2.0])))
    with pytest.raises(InputError):
        classify.softmax_normalize(s)


@settings(max_examples=200, deadline=None)
@given(scores)
def test_softmax_keeps_argmax(v):
    # exp(v - max) rounds gaps far below machine epsilon to exact ties
    top2 = np.sort(v)[-2:]
    assume(top2[1] - top2[0] > 1e-12)
    out = classify.softmax_normalize(ScoreVector(v)).scores
    assert np.argmax(out) == np.argmax(v)
    assert abs(out.sum() - 1.0) < 1e-12


def test_max_fuse_examples():
    s1 = ScoreVector(np.array([0.7, 0.2, 0.1]), True)
    s2 = ScoreVector(np.array([0.1, 0.8, 0.1]), True)
    assert classify.max_fuse(s1, s2) == 1
    tie = ScoreVector(np.array([0.5, 0.5]), True)
    assert classify.max_fuse(tie, tie) == 0


@settings(max_examples=200, deadline=None)
@given(scores)
def test_max_fuse_idempotent(v):
    s = classify.softmax_normalize(ScoreVector(v))
    assert classify.max_fuse(s, s) == int(np.argmax(s.scores))


def test_max_fuse_preconditions():
    raw = ScoreVector(np.array([1.0, 2.0]))
    norm = classify.softmax_normalize(raw)
    with pytest.raises(InputError):
        classify.max_fuse(raw, norm)
    with pytest.raises(InputError):
        classify.max_fuse(norm, classify.softmax_normalize(ScoreVector(np.zeros(3))))


def test_svm_file_round_trip(tmp_path):
    z, y = blobs(8)
    m = classify.train_svm(z, y, c=0.5)
    classify.save_svm(tmp_path / "m.m2fs", m)
    back = classify.load_svm(tmp_path / "m.m2fs")
    assert back.c == 0.5
    for name in ("weights", "biases", "mean", "scale"):
        assert np.array_equal(getattr(back, name), getattr(m, name))
    (tmp_path / "x.m2fs").write_bytes(b"ABCD")
    with pytest.raises(InputError):
        classify.load_svm(tmp_path / "x.m2fs")
