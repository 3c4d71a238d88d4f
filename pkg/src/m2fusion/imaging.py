"""Sensor-to-image encoders.

* signal images: six inertial channels row-stacked in a fixed order so that
  every channel pair is adjacent somewhere, 24 rows x 52 samples;
* sequential front-view images (SFIs): cumulative thresholded motion energy
  of a depth sequence over K growing prefixes;
* horizontal-edge Prewitt filtering and green-magenta composites;
* jitter / scaling / time-warp augmentation of inertial recordings.
"""
import os
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InputError

N_CHANNELS = 6
SIGNAL_ROWS = 24
SIGNAL_LEN = 52
WINDOW_STRIDE = 26

# 1-based channel numbers, one per image row
STACKING_ORDER = (1, 2, 3, 4, 5, 6, 1, 3, 5, 2, 4, 6, 1, 4, 2, 5, 3, 6, 1, 5, 2, 6, 1, 6)

PREWITT_KERNEL = np.array([[1.0, 1.0, 1.0],
                           [0.0, 0.0, 0.0],
                           [-1.0, -1.0, -1.0]])


def stacking_order():
    return list(STACKING_ORDER)


def check_inertial(seq, min_len=SIGNAL_LEN):
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] != N_CHANNELS:
        raise InputError(f"inertial sequence must have {N_CHANNELS} channel rows, got shape {seq.shape}")
    if seq.shape[1] < min_len:
        raise InputError(f"inertial sequence needs at least {min_len} samples, got {seq.shape[1]}")
    if not np.all(np.isfinite(seq)):
        raise InputError("inertial sequence contains non-finite samples")
    return seq


def rescale01(img):
    """Min-max scale to [0, 1]; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def stack_rows(seq, start=0):
    """Row-stacked 24x52 window before normalization."""
    seq = check_inertial(seq)
    if start < 0 or start + SIGNAL_LEN > seq.shape[1]:
        raise InputError(f"window [{start}, {start + SIGNAL_LEN}) outside sequence of length {seq.shape[1]}")
    rows = np.array(STACKING_ORDER) - 1
    return seq[rows, start:start + SIGNAL_LEN].copy()


def make_signal_image(seq, start=0, transpose=False):
    img = rescale01(stack_rows(seq, start))
    return img.T.copy() if transpose else img


def window_starts(n_samples, stride=WINDOW_STRIDE):
    if n_samples < SIGNAL_LEN:
        raise InputError(f"need at least {SIGNAL_LEN} samples, got {n_samples}")
    return list(range(0, n_samples - SIGNAL_LEN + 1, stride))


def signal_windows(seq, stride=WINDOW_STRIDE):
    """All signal images of a recording, windows ``stride`` samples apart."""
    seq = check_inertial(seq)
    return np.stack([make_signal_image(seq, s) for s in window_starts(seq.shape[1], stride)])


def check_depth(frames):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise InputError(f"depth sequence must be (frames, H, W), got shape {frames.shape}")
    if frames.shape[0] < 2:
        raise InputError("depth sequence needs at least two frames")
    if np.any(frames < 0) or not np.all(np.isfinite(frames)):
        raise InputError("depth values must be finite and non-negative")
    return frames


def segment_ends(n_frames, segments):
    # prefix k (1-based) covers frames [0, ceil(k*F/K))
    return [-(-k * n_frames // segments) for k in range(1, segments + 1)]


def sfi_energy(frames, segments=5, motion_threshold=10.0):
    """Un-normalized cumulative motion energy, shape (K, H, W)."""
    frames = check_depth(frames)
    if segments < 1:
        raise InputError("segments must be >= 1")
    if frames.shape[0] < segments + 1:
        raise InputError(f"{frames.shape[0]} frames is too few for {segments} segments")
    if motion_threshold < 0:
        raise InputError("motion threshold must be non-negative")

    diff = np.abs(np.diff(frames, axis=0))
    diff[diff <= motion_threshold] = 0.0
    # cum[t] = energy of the first t frame pairs
    cum = np.concatenate([np.zeros((1,) + frames.shape[1:]), np.cumsum(diff, axis=0)])
    return np.stack([cum[end - 1] for end in segment_ends(frames.shape[0], segments)])


def make_sfi(frames, segments=5, motion_threshold=10.0):
    energy = sfi_energy(frames, segments, motion_threshold)
    return np.stack([rescale01(e) for e in energy])


def prewitt(img):
    """Correlate with the horizontal-edge Prewitt kernel, replicate borders, same size."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise InputError(f"prewitt needs an image of at least 3x3, got shape {img.shape}")
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    above = p[0:h, 0:w] + p[0:h, 1:w + 1] + p[0:h, 2:w + 2]
    below = p[2:h + 2, 0:w] + p[2:h + 2, 1:w + 1] + p[2:h + 2, 2:w + 2]
    return above - below


@dataclass(frozen=True)
class CompositeImage:
    r: np.ndarray
    g: np.ndarray
    b: np.ndarray

    def channels_last(self):
        return np.stack([self.r, self.g, self.b], axis=-1)


def composite(base, filtered):
    """Green-magenta false colour: base drives red and blue, filtered drives green.

    Both inputs must already lie in [0, 1] (see :func:`rescale01`).
    """
    base = np.asarray(base, dtype=np.float64)
    filtered = np.asarray(filtered, dtype=np.float64)
    if base.shape != filtered.shape:
        raise InputError(f"composite shape mismatch {base.shape} vs {filtered.shape}")
    for name, a in (("base", base), ("filtered", filtered)):
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise InputError(f"composite {name} image must be scaled to [0, 1]")
    return CompositeImage(base.copy(), filtered.copy(), base.copy())


@dataclass(frozen=True)
class AugmentConfig:
    copies: int = 3
    jitter_sigma: float = 0.05   # fraction of each channel's std
    scale_sigma: float = 0.1     # std of the per-channel gain around 1
    warp_strength: float = 0.1   # max local stretch of the time axis
    warp_knots: int = 4


def _time_warp(seq, strength, knots, rng):
    t = seq.shape[1]
    if strength <= 0 or t < 2:
        return seq
    knot_x = np.linspace(0, t - 1, knots + 2)
    speed = 1.0 + rng.uniform(-strength, strength, size=knot_x.size)
    rate = np.clip(CubicSpline(knot_x, speed)(np.arange(t)), 1.0 - strength, 1.0 + strength)
    warped = np.concatenate([[0.0], np.cumsum(rate[:-1])])
    warped *= (t - 1) / warped[-1]
    grid = np.arange(t)
    return np.stack([np.interp(warped, grid, ch) for ch in seq])


def augment(seq, config=AugmentConfig(), seed=0):
    """Jittered, scaled and time-warped copies of an inertial recording."""
    seq = check_inertial(seq, min_len=1)
    rng = np.random.default_rng(seed)
    std = seq.std(axis=1, keepdims=True)
    out = []
    for _ in range(config.copies):
        x = seq + rng.normal(size=seq.shape) * (config.jitter_sigma * std)
        x = x * rng.normal(1.0, config.scale_sigma, size=(N_CHANNELS, 1))
        out.append(_time_warp(x, config.warp_strength, config.warp_knots, rng))
    return out


# --- file formats -----------------------------------------------------------

def read_inertial_csv(path):
    """Six float columns, one row per sample, optional header line."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise InputError(f"{path}: empty inertial file")
    try:
        [float(v) for v in lines[0].split(",")]
    except ValueError:
        lines = lines[1:]
    try:
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines])
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != N_CHANNELS:
        width = data.shape[1] if data.ndim == 2 else "ragged"
        raise InputError(f"{path}: expected {N_CHANNELS} columns, found {width}")
    return data.T.copy()


def write_inertial_csv(path, seq):
    seq = np.asarray(seq)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ax,ay,az,gx,gy,gz\n")
        for row in seq.T:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_pgm(path, img, maxval=65535):
    img = np.asarray(img)
    h, w = img.shape
    data = np.clip(np.rint(img), 0, maxval).astype(">u2" if maxval > 255 else "u1")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64)


def read_depth_dir(path):
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".pgm"))
    if not names:
        raise InputError(f"{path}: no .pgm frames")
    frames = [read_pgm(os.path.join(path, n)) for n in names]
    if len({f.shape for f in frames}) != 1:
        raise InputError(f"{path}: frames differ in size")
    return check_depth(np.stack(frames))


def write_pgm8(path, img01):
    """8-bit preview of a [0, 1] image."""
    write_pgm(path, np.asarray(img01) * 255.0, maxval=255)


def write_ppm8(path, rgb01):
    """8-bit binary PPM of an (H, W, 3) image in [0, 1]."""
    rgb = np.asarray(rgb01)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError(f"PPM needs an (H, W, 3) image, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype("u1")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
