"""Small convolutional networks in numpy: 2-D signal/depth CNN, 1-D baseline.

Activations are NHWC ``float64`` arrays. A 1-D network sees its
``(timesteps, channels)`` input as an ``H x 1`` image internally.
"""
import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, TrainingDiverged

MODEL_MAGIC = b"M2FN"
MODEL_VERSION = 1

LAYER_KINDS = ("conv2d", "conv1d", "maxpool", "fully_connected", "relu", "softmax")
PARAM_KINDS = ("conv2d", "conv1d", "fully_connected")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    filters: int = 0
    kernel: tuple = ()
    stride: int = 1
    units: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InputError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", tuple(self.kernel))


@dataclass
class TrainConfig:
    momentum: float = 0.9
    initial_lr: float = 0.001
    lr_drop_factor: float = 0.5
    lr_drop_period: int = 10
    l2: float = 0.004
    max_epochs: int = 100
    minibatch: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise InputError("momentum must lie in [0, 1)")
        if self.initial_lr <= 0:
            raise InputError("initial learning rate must be positive")
        if not 0.0 < self.lr_drop_factor <= 1.0:
            raise InputError("learning-rate drop factor must lie in (0, 1]")
        if self.lr_drop_period < 1 or self.minibatch < 1 or self.max_epochs < 0:
            raise InputError("drop period and minibatch must be >= 1, epochs >= 0")

    @classmethod
    def table_ii(cls, **kw):
        """Fine-tuning schedule used for the depth backbone."""
        return cls(**{**dict(initial_lr=0.005, max_epochs=50, minibatch=128), **kw})

    @classmethod
    def table_iii(cls, **kw):
        """Schedule for the signal-image CNN (the defaults)."""
        return cls(**kw)

    def lr_at(self, epoch):
        return self.initial_lr * self.lr_drop_factor ** (epoch // self.lr_drop_period)


class CnnModel:
    """Layer stack plus weights. ``params[name]`` holds ``{"w": ..., "b": ...}``."""

    def __init__(self, layers, input_shape, classes, params=None, seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.classes = int(classes)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise InputError("layer names must be unique")
        self.shapes = self._shape_chain()
        if self.shapes[-1] != (self.classes,):
            raise InputError(f"network output {self.shapes[-1]} does not match {self.classes} classes")
        self.params = params if params is not None else self.init_params(seed)

    @property
    def is_1d(self):
        return len(self.input_shape) == 2

    def _shape_chain(self):
        shape = self.input_shape if not self.is_1d else (self.input_shape[0], 1, self.input_shape[1])
        out = []
        for spec in self.layers:
            if spec.kind in ("conv2d", "conv1d"):
                kh, kw = _conv_kernel(spec)
                h, w, _ = shape
                if h < kh or w < kw:
                    raise InputError(f"input {shape} too small for {spec.name} kernel {(kh, kw)}")
                shape = (h - kh + 1, w - kw + 1, spec.filters)
            elif spec.kind == "maxpool":
                kh, kw = _pool_kernel(spec)
                h, w, c = shape
                if h < kh or w < kw:
                    raise InputError(f"input {shape} too small for pool {spec.name}")
                shape = (h // kh, w // kw, c)
            elif spec.kind == "fully_connected":
                shape = (spec.units,)
            out.append(shape)
        return out

    def fan_in(self, idx):
        spec = self.layers[idx]
        prev = self.shapes[idx - 1] if idx else (
            self.input_shape if not self.is_1d else (self.input_shape[0], 1, self.input_shape[1]))
        if spec.kind == "fully_connected":
            return int(np.prod(prev))
        kh, kw = _conv_kernel(spec)
        return kh * kw * prev[-1]

    def weight_shape(self, idx):
        spec = self.layers[idx]
        fan = self.fan_in(idx)
        if spec.kind == "fully_connected":
            return (spec.units, fan)
        kh, kw = _conv_kernel(spec)
        cin = fan // (kh * kw)
        if spec.kind == "conv1d":
            return (spec.filters, cin, kh)
        return (spec.filters, cin, kh, kw)

    def init_params(self, seed):
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for i, spec in enumerate(self.layers):
            if spec.kind not in PARAM_KINDS:
                continue
            limit = math.sqrt(6.0 / self.fan_in(i))
            shape = self.weight_shape(i)
            params[spec.name] = {
                "w": rng.uniform(-limit, limit, size=shape),
                "b": np.zeros(shape[0]),
            }
        return params

    def copy(self):
        params = {k: {n: a.copy() for n, a in p.items()} for k, p in self.params.items()}
        return CnnModel(self.layers, self.input_shape, self.classes, params)

    def layer_index(self, name):
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise InputError(f"model has no layer named {name!r}")

    def param_vector(self):
        return np.concatenate([self.params[s.name][k].ravel()
                               for s in self.layers if s.kind in PARAM_KINDS for k in ("w", "b")])

    def forward(self, x, upto=None):
        """Output of layer ``upto`` (default: class probabilities)."""
        out, _ = _forward(self, _to_nhwc(self, x), upto=upto)
        return out

    def predict(self, x, chunk=64):
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([self.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)]).argmax(axis=1)


def _conv_kernel(spec):
    if spec.kind == "conv1d":
        return (spec.kernel[0], 1)
    return spec.kernel


def _pool_kernel(spec):
    k = spec.kernel
    return (k[0], k[1] if len(k) > 1 else 1)


def _to_nhwc(model, x):
    x = np.asarray(x, dtype=np.float64)
    expected = model.input_shape
    if x.shape[1:] != expected:
        if not model.is_1d and x.ndim == 3 and expected[2] == 1 and x.shape[1:] == expected[:2]:
            x = x[..., None]
        else:
            raise InputError(f"input batch shape {x.shape[1:]} does not match model input {expected}")
    if model.is_1d:
        x = x[:, :, None, :]
    return x


def _conv_forward(x, w4, b):
    n, h, wd, c = x.shape
    f, _, kh, kw = w4.shape
    ho, wo = h - kh + 1, wd - kw + 1
    cols = sliding_window_view(x, (kh, kw), axis=(1, 2)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w4.reshape(f, -1).T
    out += b
    return out.reshape(n, ho, wo, f), cols


def _conv_backward(dout, x_shape, w4, cols, need_dx):
    n, h, wd, c = x_shape
    f, _, kh, kw = w4.shape
    ho, wo = h - kh + 1, wd - kw + 1
    d2 = dout.reshape(-1, f)
    dw = (d2.T @ cols).reshape(w4.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w4.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + ho, j:j + wo, :] += dcols[..., i, j]
    return dx, dw, db


def _pool_forward(x, kh, kw):
    n, h, w, c = x.shape
    ho, wo = h // kh, w // kw
    xr = x[:, :ho * kh, :wo * kw, :].reshape(n, ho, kh, wo, kw, c)
    xr = xr.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, kh * kw)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, x_shape, arg, kh, kw):
    n, h, w, c = x_shape
    ho, wo = h // kh, w // kw
    dxr = np.zeros((n, ho, wo, c, kh * kw))
    np.put_along_axis(dxr, arg[..., None], dout[..., None], axis=-1)
    dxr = dxr.reshape(n, ho, wo, c, kh, kw).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * kh, wo * kw, c)
    if ho * kh == h and wo * kw == w:
        return dxr
    dx = np.zeros(x_shape)
    dx[:, :ho * kh, :wo * kw, :] = dxr
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(model, x, upto=None, keep=False):
    """Run layers in order; with ``keep`` also return per-layer caches."""
    stop = len(model.layers) - 1 if upto is None else model.layer_index(upto)
    caches = []
    for spec in model.layers[:stop + 1]:
        cache = None
        if spec.kind in ("conv2d", "conv1d"):
            p = model.params[spec.name]
            w4 = p["w"] if spec.kind == "conv2d" else p["w"][..., None]
            shape_in = x.shape
            x, cols = _conv_forward(x, w4, p["b"])
            cache = (shape_in, cols) if keep else None
        elif spec.kind == "maxpool":
            kh, kw = _pool_kernel(spec)
            shape_in = x.shape
            x, arg = _pool_forward(x, kh, kw)
            cache = (shape_in, arg) if keep else None
        elif spec.kind == "fully_connected":
            p = model.params[spec.name]
            flat = x.reshape(x.shape[0], -1)
            x = flat @ p["w"].T + p["b"]
            cache = flat if keep else None
        elif spec.kind == "relu":
            mask = x > 0
            x = x * mask
            cache = mask if keep else None
        elif spec.kind == "softmax":
            x = _softmax(x)
        caches.append(cache)
    return x, caches


def _backward(model, caches, dlogits, shapes_in):
    """Backpropagate from the pre-softmax logits. Returns ``{name: {"w", "b"}}``."""
    grads = {}
    d = dlogits
    layers = model.layers
    last = len(layers) - 1
    if layers[last].kind == "softmax":
        last -= 1
    for i in range(last, -1, -1):
        spec = layers[i]
        cache = caches[i]
        need_dx = i > 0
        if spec.kind in ("conv2d", "conv1d"):
            p = model.params[spec.name]
            w4 = p["w"] if spec.kind == "conv2d" else p["w"][..., None]
            shape_in, cols = cache
            d, dw, db = _conv_backward(d, shape_in, w4, cols, need_dx)
            grads[spec.name] = {"w": dw if spec.kind == "conv2d" else dw[..., 0], "b": db}
        elif spec.kind == "maxpool":
            kh, kw = _pool_kernel(spec)
            shape_in, arg = cache
            d = _pool_backward(d, shape_in, arg, kh, kw)
        elif spec.kind == "fully_connected":
            p = model.params[spec.name]
            flat = cache
            grads[spec.name] = {"w": d.T @ flat, "b": d.sum(axis=0)}
            if need_dx:
                d = (d @ p["w"]).reshape(shapes_in[i])
        elif spec.kind == "relu":
            d = d * cache
        elif spec.kind == "softmax":
            raise InputError("softmax is only supported as the final layer")
    return grads


def _layer_input_shapes(model, n):
    first = model.input_shape if not model.is_1d else (model.input_shape[0], 1, model.input_shape[1])
    return [(n,) + tuple(s) for s in [first] + model.shapes[:-1]]


def loss_and_grads(model, x, y, l2=0.0):
    """Mean cross-entropy (+ ``l2/2 * sum ||W||^2`` over weights) and its gradient."""
    x = _to_nhwc(model, x)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    logits, caches = _forward(model, x, upto=_logit_layer(model), keep=True)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    caches = caches + [None] * (len(model.layers) - len(caches))
    grads = _backward(model, caches, dlogits, _layer_input_shapes(model, n))
    if l2:
        for name, p in model.params.items():
            loss += 0.5 * l2 * float(np.sum(p["w"] ** 2))
            grads[name]["w"] = grads[name]["w"] + l2 * p["w"]
    return float(loss), grads, np.exp(logp)


def _logit_layer(model):
    last = model.layers[-1]
    if last.kind == "softmax":
        return model.layers[-2].name
    return last.name


def loss(model, x, y, l2=0.0):
    x = _to_nhwc(model, x)
    y = np.asarray(y, dtype=np.int64)
    logits, _ = _forward(model, x, upto=_logit_layer(model))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = -logp[np.arange(len(y)), y].mean()
    if l2:
        value += 0.5 * l2 * sum(float(np.sum(p["w"] ** 2)) for p in model.params.values())
    return float(value)


# --- builders -----------------------------------------------------------------

def build_signal_cnn(input_h=24, input_w=52, hidden_fc=500, classes=27, channels=1, seed=0):
    """Two conv/pool stages (50 then 100 kernels of 5x5), fc1 + ReLU, classifier."""
    if classes < 2:
        raise InputError("need at least two classes")
    layers = [
        LayerSpec("conv2d", "conv1", filters=50, kernel=(5, 5)),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1", kernel=(2, 2), stride=2),
        LayerSpec("conv2d", "conv2", filters=100, kernel=(5, 5)),
        LayerSpec("relu", "relu2"),
        LayerSpec("maxpool", "pool2", kernel=(2, 2), stride=2),
        LayerSpec("fully_connected", "fc1", units=hidden_fc),
        LayerSpec("relu", "relu3"),
        LayerSpec("fully_connected", "fc2", units=classes),
        LayerSpec("softmax", "prob"),
    ]
    if (input_h - 4) // 2 < 5 or (input_w - 4) // 2 < 5 or ((input_h - 4) // 2 - 4) // 2 < 1 \
            or ((input_w - 4) // 2 - 4) // 2 < 1:
        raise InputError(f"input {input_h}x{input_w} too small for two valid 5x5 convs with pooling")
    return CnnModel(layers, (input_h, input_w, channels), classes, seed=seed)


def build_1d_cnn(timesteps=52, channels=6, classes=27, seed=0):
    """Baseline over raw inertial windows: 50 then 100 kernels of length 5."""
    if classes < 2:
        raise InputError("need at least two classes")
    if ((timesteps - 4) // 2 - 4) // 2 < 1:
        raise InputError(f"{timesteps} timesteps is too short for the 1-D baseline")
    layers = [
        LayerSpec("conv1d", "conv1", filters=50, kernel=(5,)),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1", kernel=(2, 1), stride=2),
        LayerSpec("conv1d", "conv2", filters=100, kernel=(5,)),
        LayerSpec("relu", "relu2"),
        LayerSpec("maxpool", "pool2", kernel=(2, 1), stride=2),
        LayerSpec("fully_connected", "fc1", units=classes),
        LayerSpec("softmax", "prob"),
    ]
    return CnnModel(layers, (timesteps, channels), classes, seed=seed)


# --- training ---------------------------------------------------------------

class MomentumSGD:
    """Classical momentum: ``v <- m*v - lr*g``, ``w <- w + v``."""

    def __init__(self, params, momentum):
        self.momentum = momentum
        self.velocity = {k: {n: np.zeros_like(a) for n, a in p.items()} for k, p in params.items()}

    def step(self, params, grads, lr):
        for name, p in params.items():
            for key in ("w", "b"):
                v = self.velocity[name][key]
                v *= self.momentum
                v -= lr * grads[name][key]
                p[key] += v


def zero_grads(params):
    return {k: {n: np.zeros_like(a) for n, a in p.items()} for k, p in params.items()}


def train(model, images, labels, cfg, log=None, reinit=True):
    """Minibatch SGD with momentum and step-decayed learning rate.

    Weight initialisation (when ``reinit``) and shuffling are keyed to
    ``cfg.seed``. ``log`` may be a list; one dict per epoch is appended.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels) or len(labels) == 0:
        raise InputError("images and labels must be non-empty and equally long")
    if labels.min() < 0 or labels.max() >= model.classes:
        raise InputError(f"labels must lie in [0, {model.classes})")

    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    model = model.copy()
    if reinit:
        model.params = model.init_params(init_seq)
    opt = MomentumSGD(model.params, cfg.momentum)
    rng = np.random.default_rng(shuffle_seq)
    n = len(labels)

    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            batch_loss, grads, probs = loss_and_grads(model, images[idx], labels[idx], cfg.l2)
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(epoch, batch_loss)
            opt.step(model.params, grads, lr)
            total += batch_loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        if log is not None:
            log.append({"epoch": epoch, "lr": lr, "train_loss": total / n, "train_accuracy": correct / n})
    return model


def write_training_log(path, log):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "train_accuracy"])
        writer.writeheader()
        writer.writerows(log)


# --- features ---------------------------------------------------------------

@dataclass
class FeatureMatrix:
    """Column-per-sample features (``dim x samples``) tapped from a named layer."""
    data: np.ndarray
    source_layer: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise InputError("feature matrix must be 2-D")

    @property
    def dim(self):
        return self.data.shape[0]

    @property
    def samples(self):
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def extract_features(model, layer, batch, chunk=64):
    """Output of ``layer`` itself as columns; for ``fc1`` that is before its ReLU."""
    idx = model.layer_index(layer)
    batch = np.asarray(batch, dtype=np.float64)
    parts = [model.forward(batch[i:i + chunk], upto=layer) for i in range(0, len(batch), chunk)]
    feats = np.concatenate(parts).reshape(len(batch), -1)
    return FeatureMatrix(feats.T.copy(), source_layer=model.layers[idx].name)


# --- gradient check ---------------------------------------------------------

def _logits(model, x):
    logits, _ = _forward(model, _to_nhwc(model, x), upto=_logit_layer(model))
    return logits


def _ce_difference(z_up, z_down, y):
    """``CE(z_up) - CE(z_down)`` summed over the batch, without subtracting two O(1) losses."""
    m = z_down.max(axis=1, keepdims=True)
    e_down = np.exp(z_down - m)
    # logits untouched by the perturbation are bitwise equal and contribute exactly zero
    delta = np.sum(e_down * np.expm1(z_up - z_down), axis=1) / e_down.sum(axis=1)
    rows = np.arange(len(y))
    return float(np.sum(np.log1p(delta) - (z_up[rows, y] - z_down[rows, y])))


def gradient_errors(model, x, label, step=1e-5, per_layer=200, seed=0, grad_fn=None):
    """Worst relative gradient error per layer kind, e.g. ``{"conv2d": 3e-9, ...}``.

    Samples up to ``per_layer`` entries from each parametrised layer.
    ``grad_fn(model, x, y)`` overrides the analytic gradient (test hook).
    """
    if not 0 < step <= 1e-2:
        raise InputError("step must lie in (0, 1e-2]")
    x = np.asarray(x, dtype=np.float64)[None]
    y = np.array([label])
    if grad_fn is None:
        _, grads, _ = loss_and_grads(model, x, y)
    else:
        grads = grad_fn(model, x, y)
    rng = np.random.default_rng(seed)
    errors = {}
    for spec in model.layers:
        if spec.kind not in PARAM_KINDS:
            continue
        p = model.params[spec.name]
        sizes = [p["w"].size, p["b"].size]
        pick = rng.choice(sum(sizes), size=min(per_layer, sum(sizes)), replace=False)
        for j in pick:
            key, i = ("w", j) if j < sizes[0] else ("b", j - sizes[0])
            arr = p[key].reshape(-1)
            orig = arr[i]
            arr[i] = orig + step
            z_up = _logits(model, x)
            arr[i] = orig - step
            z_down = _logits(model, x)
            arr[i] = orig
            g_num = _ce_difference(z_up, z_down, y) / (2 * step)
            g_ana = grads[spec.name][key].reshape(-1)[i]
            err = abs(g_ana - g_num) / max(abs(g_ana), abs(g_num), 1e-8)
            errors[spec.kind] = max(errors.get(spec.kind, 0.0), err)
    return errors


def gradient_check(model, x, label, step=1e-5, per_layer=200, seed=0, grad_fn=None):
    """Max relative error between analytic and central-difference gradients."""
    return max(gradient_errors(model, x, label, step, per_layer, seed, grad_fn).values())


# --- serialization ----------------------------------------------------------

def save_model(path, model):
    header = json.dumps({
        "input_shape": list(model.input_shape),
        "classes": model.classes,
        "layers": [asdict(s) for s in model.layers],
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(header)))
        fh.write(header)
        for spec in model.layers:
            if spec.kind in PARAM_KINDS:
                for key in ("w", "b"):
                    fh.write(np.ascontiguousarray(model.params[spec.name][key], dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise InputError(f"{path}: not a model file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != MODEL_VERSION:
            raise InputError(f"{path}: unsupported model version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        layers = [LayerSpec(**{**d, "kernel": tuple(d["kernel"])}) for d in header["layers"]]
        model = CnnModel(layers, header["input_shape"], header["classes"], params={})
        params = {}
        for i, spec in enumerate(layers):
            if spec.kind not in PARAM_KINDS:
                continue
            wshape = model.weight_shape(i)
            entry = {}
            for key, shape in (("w", wshape), ("b", (wshape[0],))):
                count = int(np.prod(shape))
                raw = fh.read(8 * count)
                if len(raw) != 8 * count:
                    raise InputError(f"{path}: truncated weights")
                entry[key] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            params[spec.name] = entry
        model.params = params
    return model
