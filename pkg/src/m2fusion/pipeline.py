"""The three multilevel fusion frameworks and the repeated 80/20 evaluation protocol.

multistage  four CNN branches (SFI, Prewitt-SFI, signal image, Prewitt signal
            image); fc1 features concatenated per modality; the depth block
            is bicubic-resized to the inertial block's height; CCA-sum fusion;
            one SVM.
hybrid      the same four branches and concatenations; one SVM per modality;
            softmax-normalized scores combined by per-class maximum.
efficient   two branches: green-magenta composite of the signal image with its
            Prewitt response, and the SFI stack; CCA-sum fusion; one SVM.
"""
import copy
import csv
import hashlib
import json
import os
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ccf, classify, cnn, imaging
from .dataset import SplitSpec, split_indices
from .errors import InputError
from .numerics import bicubic_resize

FRAMEWORKS = ("multistage", "hybrid", "efficient")

FRAMEWORK_BRANCHES = {
    "multistage": (("sfi", "sfi_prewitt"), ("si", "si_prewitt")),
    "hybrid": (("sfi", "sfi_prewitt"), ("si", "si_prewitt")),
    "efficient": (("sfi",), ("composite",)),
}

FEATURE_LAYER = "fc1"


@dataclass
class PipelineConfig:
    sfi_segments: int = 5
    motion_threshold: float = 10.0
    sfi_size: int = 64
    window_stride: int = imaging.WINDOW_STRIDE
    signal_hidden: int = 500
    depth_hidden: int = 500
    signal_train: cnn.TrainConfig = field(default_factory=cnn.TrainConfig.table_iii)
    depth_train: cnn.TrainConfig = field(default_factory=cnn.TrainConfig.table_ii)
    ccf_lambda: float = None
    ccf_dim: int = None
    svm_c: float = 1.0
    svm_epochs: int = 1000
    split: SplitSpec = field(default_factory=SplitSpec)

    @classmethod
    def desk(cls, **kw):
        """Small settings that train in seconds on the synthetic dataset."""
        base = dict(
            sfi_size=32,
            signal_hidden=32,
            depth_hidden=32,
            signal_train=cnn.TrainConfig(initial_lr=0.001, max_epochs=4, minibatch=16),
            depth_train=cnn.TrainConfig(initial_lr=0.001, max_epochs=4, minibatch=16),
            ccf_lambda=1000.0,
        )
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("signal_train", "depth_train"):
            if key in d and isinstance(d[key], dict):
                d[key] = cnn.TrainConfig(**d[key])
        if "split" in d and isinstance(d["split"], dict):
            d["split"] = SplitSpec(**d["split"])
        return cls(**d)


# --- encoding ---------------------------------------------------------------

@dataclass
class Encoded:
    """Per-window images. ``groups`` maps each window back to its recording."""
    si: np.ndarray       # (M, 24, 52) in [0, 1]
    sfi: np.ndarray      # (M, S, S, K) in [0, 1]
    labels: np.ndarray   # (M,)
    groups: np.ndarray   # (M,)

    def take(self, idx):
        return Encoded(self.si[idx], self.sfi[idx], self.labels[idx], self.groups[idx])

    def __len__(self):
        return len(self.labels)


def encode_sfi_stack(frames, cfg):
    sfis = imaging.make_sfi(frames, cfg.sfi_segments, cfg.motion_threshold)
    if sfis.shape[1:] != (cfg.sfi_size, cfg.sfi_size):
        sfis = np.stack([np.clip(bicubic_resize(s, cfg.sfi_size, cfg.sfi_size), 0.0, 1.0) for s in sfis])
    return np.moveaxis(sfis, 0, -1)


def encode(dataset, cfg):
    si, sfi, labels, groups = [], [], [], []
    for g, sample in enumerate(dataset.samples):
        stack = encode_sfi_stack(sample.depth, cfg)
        for img in imaging.signal_windows(sample.inertial, cfg.window_stride):
            si.append(img)
            sfi.append(stack)
            labels.append(sample.label)
            groups.append(g)
    return Encoded(np.stack(si), np.stack(sfi), np.array(labels, dtype=np.int64), np.array(groups))


def branch_images(branch, enc):
    """CNN input batch (NHWC) for one branch."""
    if branch == "si":
        return enc.si[..., None]
    if branch == "si_prewitt":
        return np.stack([imaging.prewitt(s) for s in enc.si])[..., None]
    if branch == "composite":
        return np.stack([imaging.composite(s, imaging.rescale01(imaging.prewitt(s))).channels_last()
                         for s in enc.si])
    if branch == "sfi":
        return enc.sfi
    if branch == "sfi_prewitt":
        return np.stack([np.stack([imaging.prewitt(ch) for ch in np.moveaxis(stack, -1, 0)], axis=-1)
                         for stack in enc.sfi])
    raise InputError(f"unknown branch {branch!r}")


def branch_model(branch, cfg, classes, input_shape):
    hidden = cfg.depth_hidden if branch.startswith("sfi") else cfg.signal_hidden
    h, w, c = input_shape
    return cnn.build_signal_cnn(h, w, hidden_fc=hidden, classes=classes, channels=c)


def branch_train_config(branch, cfg, seed):
    base = cfg.depth_train if branch.startswith("sfi") else cfg.signal_train
    tc = copy.copy(base)
    tc.seed = seed
    return tc


def branch_seed(split_seed, repeat, branch):
    return int(np.random.SeedSequence([split_seed, repeat, zlib.crc32(branch.encode())]).generate_state(1)[0])


class ExtractorCache:
    """Memoizes trained extractors by a hash of (branch, architecture, schedule, training data).

    With ``directory`` set, models persist across processes as ``<key>.m2fn``.
    """

    def __init__(self, directory=None):
        self.directory = directory
        self.memory = {}
        self.hits = 0
        self.misses = 0
        if directory:
            os.makedirs(directory, exist_ok=True)

    @staticmethod
    def key(branch, model, tc, images, labels):
        h = hashlib.sha256()
        h.update(branch.encode())
        h.update(json.dumps([asdict(s) for s in model.layers], sort_keys=True).encode())
        h.update(repr(model.input_shape).encode())
        h.update(json.dumps(asdict(tc), sort_keys=True).encode())
        h.update(np.ascontiguousarray(images).tobytes())
        h.update(np.ascontiguousarray(labels).tobytes())
        return h.hexdigest()[:32]

    def get(self, key):
        if key in self.memory:
            self.hits += 1
            return self.memory[key]
        if self.directory:
            path = os.path.join(self.directory, key + ".m2fn")
            if os.path.exists(path):
                self.hits += 1
                model = cnn.load_model(path)
                self.memory[key] = model
                return model
        self.misses += 1
        return None

    def put(self, key, model):
        self.memory[key] = model
        if self.directory:
            cnn.save_model(os.path.join(self.directory, key + ".m2fn"), model)


def train_extractor(branch, images, labels, classes, cfg, seed, cache=None):
    model = branch_model(branch, cfg, classes, images.shape[1:])
    tc = branch_train_config(branch, cfg, seed)
    key = ExtractorCache.key(branch, model, tc, images, labels) if cache is not None else None
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit, 0.0
    t0 = time.perf_counter()
    trained = cnn.train(model, images, labels, tc)
    elapsed = time.perf_counter() - t0
    if cache is not None:
        cache.put(key, trained)
    return trained, elapsed


def match_rows(block, rows):
    """Bicubic-resize a feature block (p x n) to ``rows`` rows, columns untouched."""
    if block.shape[0] == rows:
        return block
    return bicubic_resize(block, rows, block.shape[1])


# --- fitted frameworks ------------------------------------------------------

@dataclass
class RepeatResult:
    y_true: np.ndarray
    y_pred: np.ndarray
    modality_pred: dict
    inference_us: float
    train_seconds: float
    extractor_calls: int


class FittedFramework:
    """Everything learned on one training split; ``predict`` never mutates it."""

    def __init__(self, kind, cfg, extractors, depth_rows, cca, svm, svm_depth, svm_inertial):
        self.kind = kind
        self.cfg = cfg
        self.extractors = extractors
        self.depth_rows = depth_rows
        self.cca = cca
        self.svm = svm
        self.svm_depth = svm_depth
        self.svm_inertial = svm_inertial

    @property
    def extractor_calls(self):
        return len(self.extractors)

    def modality_features(self, enc, counter=None):
        depth_branches, inertial_branches = FRAMEWORK_BRANCHES[self.kind]
        blocks = []
        for names in (depth_branches, inertial_branches):
            feats = None
            for b in names:
                f = cnn.extract_features(self.extractors[b], FEATURE_LAYER, branch_images(b, enc))
                if counter is not None:
                    counter.append(b)
                feats = f if feats is None else ccf.fuse_concat(feats, f)
            blocks.append(np.asarray(feats))
        return blocks

    def _fused(self, depth, inertial):
        xp, yp = ccf.transform(self.cca, match_rows(depth, self.depth_rows), inertial)
        return ccf.fuse_sum(xp, yp)

    def predict_fused(self, enc, counter=None):
        depth, inertial = self.modality_features(enc, counter)
        if self.kind == "hybrid":
            sd = classify.decision_scores(self.svm_depth, depth)
            si = classify.decision_scores(self.svm_inertial, inertial)
            return np.array([
                classify.max_fuse(classify.softmax_normalize(classify.ScoreVector(sd[:, j])),
                                  classify.softmax_normalize(classify.ScoreVector(si[:, j])))
                for j in range(sd.shape[1])], dtype=np.int64), depth, inertial
        return classify.predict(self.svm, self._fused(depth, inertial)), depth, inertial

    def predict(self, enc):
        """Fused and single-modality predictions plus per-sample inference time (microseconds)."""
        calls = []
        t0 = time.perf_counter()
        fused, depth, inertial = self.predict_fused(enc, calls)
        elapsed = time.perf_counter() - t0
        # each branch extractor runs once per test window
        per_sample_calls = len(calls)
        modality = {
            "depth": classify.predict(self.svm_depth, depth),
            "inertial": classify.predict(self.svm_inertial, inertial),
        }
        return fused, modality, 1e6 * elapsed / len(enc), per_sample_calls

    def fingerprint(self):
        h = hashlib.sha256()
        for name in sorted(self.extractors):
            h.update(name.encode())
            h.update(self.extractors[name].param_vector().tobytes())
        for m in (self.svm, self.svm_depth, self.svm_inertial):
            if m is not None:
                for a in (m.weights, m.biases, m.mean, m.scale):
                    h.update(np.ascontiguousarray(a).tobytes())
        if self.cca is not None:
            for a in (self.cca.a, self.cca.b, self.cca.correlations, self.cca.mean_x, self.cca.mean_y):
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def fit_framework(kind, train_enc, classes, cfg, repeat=0, cache=None):
    if kind not in FRAMEWORKS:
        raise InputError(f"unknown framework {kind!r}; choose from {', '.join(FRAMEWORKS)}")
    depth_branches, inertial_branches = FRAMEWORK_BRANCHES[kind]
    extractors, train_seconds = {}, 0.0
    for b in depth_branches + inertial_branches:
        seed = branch_seed(cfg.split.seed, repeat, b)
        extractors[b], secs = train_extractor(b, branch_images(b, train_enc), train_enc.labels, classes,
                                              cfg, seed, cache)
        train_seconds += secs

    fitted = FittedFramework(kind, cfg, extractors, None, None, None, None, None)
    depth, inertial = fitted.modality_features(train_enc)
    labels = train_enc.labels
    svm_seed = branch_seed(cfg.split.seed, repeat, "svm")
    t0 = time.perf_counter()
    fitted.svm_depth = classify.train_svm(depth, labels, cfg.svm_c, cfg.svm_epochs, svm_seed)
    fitted.svm_inertial = classify.train_svm(inertial, labels, cfg.svm_c, cfg.svm_epochs, svm_seed)
    if kind != "hybrid":
        fitted.depth_rows = inertial.shape[0]
        fitted.cca = ccf.fit_cca(match_rows(depth, fitted.depth_rows), inertial, cfg.ccf_lambda, cfg.ccf_dim)
        z = fitted._fused(depth, inertial)
        fitted.svm = classify.train_svm(z, labels, cfg.svm_c, cfg.svm_epochs, svm_seed)
    train_seconds += time.perf_counter() - t0
    return fitted, train_seconds


def run_repeat(kind, enc, classes, cfg, repeat, cache=None):
    n_groups = int(enc.groups.max()) + 1
    train_g, test_g = split_indices(n_groups, cfg.split, repeat)
    train_enc = enc.take(np.isin(enc.groups, train_g))
    test_enc = enc.take(np.isin(enc.groups, test_g))
    fitted, train_seconds = fit_framework(kind, train_enc, classes, cfg, repeat, cache)
    fused, modality, us, calls = fitted.predict(test_enc)
    return RepeatResult(test_enc.labels, fused, modality, us, train_seconds, calls)


# --- reporting --------------------------------------------------------------

@dataclass
class RunReport:
    framework: str
    classes: int
    repeat_accuracies: list
    mean_accuracy: float
    modality_accuracies: dict
    modality_mean_accuracies: dict
    confusion: list              # classes x classes, true labels on rows, summed over repeats
    repeat_confusions: list
    extractor_calls_per_sample: int
    inference_us: float
    train_seconds: float
    class_names: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def confusion_matrix(y_true, y_pred, classes):
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def evaluate(results, framework, classes, class_names=(), config=None):
    if not results:
        raise InputError("evaluate needs at least one completed repeat")
    accs = [float(np.mean(r.y_true == r.y_pred)) for r in results]
    confs = [confusion_matrix(r.y_true, r.y_pred, classes) for r in results]
    modality = {}
    for name in results[0].modality_pred:
        modality[name] = [float(np.mean(r.y_true == r.modality_pred[name])) for r in results]
    calls = {r.extractor_calls for r in results}
    if len(calls) != 1:
        raise InputError(f"extractor call count changed between repeats: {sorted(calls)}")
    return RunReport(
        framework=framework,
        classes=classes,
        repeat_accuracies=accs,
        mean_accuracy=float(np.mean(accs)),
        modality_accuracies=modality,
        modality_mean_accuracies={k: float(np.mean(v)) for k, v in modality.items()},
        confusion=np.sum(confs, axis=0).tolist(),
        repeat_confusions=[c.tolist() for c in confs],
        extractor_calls_per_sample=calls.pop(),
        inference_us=float(np.mean([r.inference_us for r in results])),
        train_seconds=float(np.sum([r.train_seconds for r in results])),
        class_names=list(class_names),
        config=config or {},
    )


def run_framework(kind, dataset, cfg, cache=None, progress=None, enc=None):
    """Encode once, then fit and test ``cfg.split.repeats`` random splits."""
    if enc is None:
        enc = encode(dataset, cfg)
    results = []
    for r in range(cfg.split.repeats):
        results.append(run_repeat(kind, enc, dataset.classes, cfg, r, cache))
        if progress:
            progress(r, results[-1])
    return evaluate(results, kind, dataset.classes, dataset.class_names, cfg.to_dict())


def run_multistage(dataset, cfg, cache=None, **kw):
    return run_framework("multistage", dataset, cfg, cache, **kw)


def run_hybrid(dataset, cfg, cache=None, **kw):
    return run_framework("hybrid", dataset, cfg, cache, **kw)


def run_efficient(dataset, cfg, cache=None, **kw):
    return run_framework("efficient", dataset, cfg, cache, **kw)


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, f"report_{report.framework}.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    csv_path = os.path.join(out_dir, f"confusion_{report.framework}.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        names = report.class_names or [str(k) for k in range(report.classes)]
        writer.writerow(["true\\pred"] + names)
        for name, row in zip(names, report.confusion):
            writer.writerow([name] + row)
    return json_path, csv_path
