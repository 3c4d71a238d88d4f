"""Dataset manifests, loading, seeded 80/20 splits and the synthetic two-bit dataset.

Manifest layout (UTF-8)::

    # comment
    name: synth
    sampling_rate: 50
    classes: walk,sit,clap

    subject  label  inertial            depth
    s01      0      inertial/000.csv    depth/000

``key: value`` lines come first; the sample table starts at the header row.
Columns are whitespace separated; paths are relative to the manifest.
"""
import math
import os
from dataclasses import dataclass

import numpy as np

from . import imaging
from .errors import InputError

TABLE_HEADER = ("subject", "label", "inertial", "depth")


@dataclass
class Sample:
    subject: str
    label: int
    inertial: np.ndarray   # (6, T)
    depth: np.ndarray      # (F, H, W) millimetres
    inertial_path: str = ""
    depth_path: str = ""


@dataclass
class Dataset:
    samples: list
    class_names: list
    sampling_rate: float = 50.0
    name: str = ""

    @property
    def classes(self):
        return len(self.class_names)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def counts(self):
        return np.bincount(self.labels, minlength=self.classes)


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    repeats: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InputError("train fraction must lie in (0, 1)")
        if self.repeats < 1:
            raise InputError("repeats must be >= 1")


# --- manifest ---------------------------------------------------------------

def read_manifest(path):
    """Parse a manifest into ``(meta, rows)`` without touching sample files."""
    meta, rows, in_table = {}, [], False
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not in_table:
                if tuple(line.split()) == TABLE_HEADER:
                    in_table = True
                    continue
                key, sep, value = line.partition(":")
                if not sep:
                    raise InputError(f"{path}:{lineno}: expected 'key: value' or the sample table header")
                meta[key.strip()] = value.strip()
                continue
            parts = line.split()
            if len(parts) != 4:
                raise InputError(f"{path}:{lineno}: sample rows need 4 columns, got {len(parts)}")
            try:
                label = int(parts[1])
            except ValueError:
                raise InputError(f"{path}:{lineno}: label {parts[1]!r} is not an integer") from None
            rows.append({"subject": parts[0], "label": label, "inertial": parts[2], "depth": parts[3]})
    if not in_table:
        raise InputError(f"{path}: missing sample table header {' '.join(TABLE_HEADER)!r}")
    return meta, rows


def load_dataset(path):
    meta, rows = read_manifest(path)
    root = os.path.dirname(os.path.abspath(path))
    labels = sorted({r["label"] for r in rows})
    if "classes" in meta:
        names = [c.strip() for c in meta["classes"].split(",") if c.strip()]
    else:
        names = [str(k) for k in range(len(labels))]
    if not rows:
        raise InputError(f"{path}: manifest lists no samples")
    if labels != list(range(len(names))):
        missing = sorted(set(range(len(names))) - set(labels))
        extra = sorted(set(labels) - set(range(len(names))))
        raise InputError(f"{path}: labels must cover 0..{len(names) - 1} densely "
                         f"(missing {missing}, out of range {extra})")
    rate = float(meta.get("sampling_rate", 50.0))

    samples = []
    for r in rows:
        ipath = os.path.join(root, r["inertial"])
        dpath = os.path.join(root, r["depth"])
        for p in (ipath, dpath):
            if not os.path.exists(p):
                raise InputError(f"{path}: missing file {p}")
        inertial = imaging.read_inertial_csv(ipath)
        try:
            imaging.check_inertial(inertial)
        except InputError as exc:
            raise InputError(f"{ipath}: {exc}") from None
        samples.append(Sample(r["subject"], r["label"], inertial, imaging.read_depth_dir(dpath), ipath, dpath))
    return Dataset(samples, names, rate, meta.get("name", ""))


def write_dataset(dataset, out_dir):
    """Write CSV/PGM files plus ``manifest.txt``; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "inertial"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    lines = [
        "# m2fusion dataset manifest",
        f"name: {dataset.name}",
        f"sampling_rate: {dataset.sampling_rate:g}",
        "classes: " + ",".join(dataset.class_names),
        "",
        "\t".join(TABLE_HEADER),
    ]
    for i, s in enumerate(dataset.samples):
        rel_i = f"inertial/{i:05d}.csv"
        rel_d = f"depth/{i:05d}"
        imaging.write_inertial_csv(os.path.join(out_dir, rel_i), s.inertial)
        ddir = os.path.join(out_dir, rel_d)
        os.makedirs(ddir, exist_ok=True)
        for f, frame in enumerate(s.depth):
            imaging.write_pgm(os.path.join(ddir, f"{f:04d}.pgm"), frame)
        lines.append(f"{s.subject}\t{s.label}\t{rel_i}\t{rel_d}")
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# --- splits -----------------------------------------------------------------

def split_indices(n, spec, repeat):
    if not 0 <= repeat < spec.repeats:
        raise InputError(f"repeat {repeat} outside [0, {spec.repeats})")
    n_train = int(math.floor(spec.train_fraction * n + 0.5))
    if n_train < 1 or n_train >= n:
        raise InputError(f"{n} samples cannot be split {spec.train_fraction:.0%}/{1 - spec.train_fraction:.0%}")
    perm = np.random.default_rng([spec.seed, repeat]).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(samples, spec, repeat):
    """Seeded random train/test partition, ignoring subject identity."""
    train, test = split_indices(len(samples), spec, repeat)
    return [samples[i] for i in train], [samples[i] for i in test]


# --- synthetic complementary-modality data ------------------------------------

SYNTH_FRAMES = 20
SYNTH_SIZE = 32
SYNTH_BACKGROUND_MM = 3000.0
SYNTH_BLOB_MM = 1500.0
SYNTH_FREQS_HZ = (1.5, 4.0)
SYNTH_AMPLITUDES = (1.0, 1.0, 1.0, 90.0, 90.0, 90.0)   # g, deg/s


def _synth_depth(b1, noise, rng, frames=SYNTH_FRAMES, size=SYNTH_SIZE):
    # a square blob sweeps down the left (b1=0) or right (b1=1) half
    cx = (size // 4 if b1 == 0 else 3 * size // 4) + int(rng.integers(-1, 2))
    start = 3 + int(rng.integers(0, 3))
    stop = size - 9 + int(rng.integers(0, 3))
    half = 3
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.empty((frames, size, size))
    for f in range(frames):
        cy = start + (stop - start) * f / (frames - 1)
        blob = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        out[f] = np.where(blob, SYNTH_BLOB_MM, SYNTH_BACKGROUND_MM)
    if noise > 0:
        out += rng.normal(scale=noise * 500.0, size=out.shape)
    return np.clip(np.rint(out), 0, 65535)


def _synth_inertial(b2, noise, rng, timesteps, rate):
    t = np.arange(timesteps) / rate
    freq = SYNTH_FREQS_HZ[b2]
    chans = []
    for c, amp in enumerate(SYNTH_AMPLITUDES):
        a = amp * rng.uniform(0.8, 1.2)
        phase = rng.uniform(0, 2 * np.pi)
        offset = 1.0 if c == 2 else 0.0
        chans.append(offset + a * np.sin(2 * np.pi * freq * t + phase))
    seq = np.array(chans)
    if noise > 0:
        seq += rng.normal(size=seq.shape) * (noise * np.array(SYNTH_AMPLITUDES)[:, None])
    return seq


def synth_dataset(classes=4, samples_per_class=50, noise=0.0, seed=0, timesteps=imaging.SIGNAL_LEN,
                  rate=50.0):
    """Four classes encoding two bits; depth carries only bit 1, inertial only bit 2.

    label = 2*b1 + b2. Either modality alone can recover one bit, so it tops
    out near 50% accuracy; recovering the label needs both.
    """
    if classes != 4:
        raise InputError("the synthetic construction is defined for exactly 4 classes")
    if samples_per_class < 25:
        raise InputError("samples_per_class must be >= 25")
    rng = np.random.default_rng(seed)
    samples = []
    for label in range(classes):
        b1, b2 = divmod(label, 2)
        for k in range(samples_per_class):
            subject = f"s{k % 8 + 1:02d}"
            samples.append(Sample(subject, label,
                                  _synth_inertial(b2, noise, rng, timesteps, rate),
                                  _synth_depth(b1, noise, rng)))
    order = rng.permutation(len(samples))
    return Dataset([samples[i] for i in order], ["b00", "b01", "b10", "b11"],
                   rate, name=f"synth-seed{seed}-noise{noise:g}")
