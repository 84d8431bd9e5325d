"""Dataset containers, loaders, and seeded synthetic generators.

Three tasks are supported: seeded synthetic classification with a
configurable fraction of pure-noise features, image classification from
IDX-format files with per-channel normalization, and character language
modeling from a UTF-8 corpus split into train/val/test.
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = [
    "ClassifyDataset",
    "CharSequenceDataset",
    "make_synthetic_classification",
    "make_grating_images",
    "make_markov_corpus",
    "write_idx_images",
    "write_idx_labels",
    "load_idx_images",
    "load_idx_labels",
    "load_dataset",
]


class ClassifyDataset:
    """Feature/label arrays with train and eval splits."""

    kind = "classify"

    def __init__(self, train_x, train_y, val_x, val_y, test_x=None, test_y=None, meta=None):
        self.train_x = np.asarray(train_x, dtype=np.float64)
        self.train_y = np.asarray(train_y, dtype=np.int64)
        self.val_x = np.asarray(val_x, dtype=np.float64)
        self.val_y = np.asarray(val_y, dtype=np.int64)
        self.test_x = None if test_x is None else np.asarray(test_x, dtype=np.float64)
        self.test_y = None if test_y is None else np.asarray(test_y, dtype=np.int64)
        self.meta = meta or {}
        if len(self.train_x) != len(self.train_y):
            raise ValueError("train features and labels disagree in length")
        labels = [self.train_y, self.val_y] + ([self.test_y] if self.test_y is not None else [])
        self.n_outputs = int(max(arr.max() for arr in labels if arr.size)) + 1

    @property
    def input_shape(self):
        return self.train_x.shape[1:]

    @property
    def train_count(self):
        return len(self.train_x)

    def train_batch(self, idx):
        return self.train_x[idx], self.train_y[idx]

    def eval_batches(self, split, batch_size):
        x, y = {
            "train": (self.train_x, self.train_y),
            "val": (self.val_x, self.val_y),
            "test": (self.test_x, self.test_y),
        }[split]
        if x is None:
            raise ValueError(f"dataset has no {split!r} split")
        for start in range(0, len(x), batch_size):
            yield x[start : start + batch_size], y[start : start + batch_size]


class CharSequenceDataset:
    """Character ids cut into fixed-length windows for next-char prediction.

    A window of seq_len+1 ids yields seq_len (input, target) steps; inputs
    are fed one-hot, so the per-sample input shape is (seq_len, vocab).
    """

    kind = "sequence"

    def __init__(self, train_ids, val_ids, test_ids, vocab, seq_len):
        self.vocab = list(vocab)
        self.seq_len = int(seq_len)
        if self.seq_len < 1:
            raise ValueError("sequence length must be positive")
        self.train_windows = self._windows(np.asarray(train_ids, dtype=np.int64))
        self.val_windows = self._windows(np.asarray(val_ids, dtype=np.int64))
        self.test_windows = self._windows(np.asarray(test_ids, dtype=np.int64))
        if len(self.train_windows) == 0:
            raise ValueError("corpus too short for the requested sequence length")
        self.n_outputs = len(self.vocab)

    def _windows(self, ids):
        span = self.seq_len + 1
        n = len(ids) // span
        return ids[: n * span].reshape(n, span)

    @property
    def input_shape(self):
        return (self.seq_len, len(self.vocab))

    @property
    def train_count(self):
        return len(self.train_windows)

    def _batch_from(self, windows, idx):
        chunk = windows[idx]  # [B, T+1]
        inputs_ids = chunk[:, :-1].T  # [T, B]
        targets = np.ascontiguousarray(chunk[:, 1:].T)  # [T, B]
        v = len(self.vocab)
        onehot = np.zeros((self.seq_len, len(chunk), v))
        t_idx, b_idx = np.meshgrid(
            np.arange(self.seq_len), np.arange(len(chunk)), indexing="ij"
        )
        onehot[t_idx, b_idx, inputs_ids] = 1.0
        return onehot, targets

    def train_batch(self, idx):
        return self._batch_from(self.train_windows, idx)

    def eval_batches(self, split, batch_size):
        windows = {
            "train": self.train_windows,
            "val": self.val_windows,
            "test": self.test_windows,
        }[split]
        for start in range(0, len(windows), batch_size):
            yield self._batch_from(windows, np.arange(start, min(start + batch_size, len(windows))))


# ---------------------------------------------------------------------------
# synthetic classification


def make_synthetic_classification(
    n_train, n_val, n_features, noise_fraction, n_classes, seed, margin=1.5
):
    """Gaussian class clusters on the signal features, pure N(0,1) noise on
    the rest. The noise coordinates are the last floor(noise_fraction * d)
    features; their indices are recorded in the dataset meta."""
    if not 0.0 <= noise_fraction < 1.0:
        raise ValueError(f"noise fraction must be in [0, 1), got {noise_fraction}")
    rng = np.random.default_rng(seed)
    n_noise = int(round(n_features * noise_fraction))
    n_signal = n_features - n_noise
    if n_signal < 1:
        raise ValueError("at least one signal feature is required")
    centers = margin * rng.choice([-1.0, 1.0], size=(n_classes, n_signal))

    def draw(n):
        y = rng.integers(0, n_classes, size=n)
        x = rng.standard_normal((n, n_features))
        x[:, :n_signal] += centers[y]
        return x, y

    train_x, train_y = draw(n_train)
    val_x, val_y = draw(n_val)
    meta = {
        "signal_indices": list(range(n_signal)),
        "noise_indices": list(range(n_signal, n_features)),
    }
    return ClassifyDataset(train_x, train_y, val_x, val_y, meta=meta)


# ---------------------------------------------------------------------------
# IDX image files


_IDX_DTYPE_UBYTE = 0x08


def write_idx_images(path, images):
    """Write uint8 images [N, H, W] in IDX3 layout (big-endian header)."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"expected [N, H, W] images, got {images.shape}")
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, _IDX_DTYPE_UBYTE, 3))
        f.write(struct.pack(">III", n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError(f"expected flat labels, got {labels.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, _IDX_DTYPE_UBYTE, 1))
        f.write(struct.pack(">I", len(labels)))
        f.write(labels.tobytes())


def _read_idx(path, expect_ndim):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    zero1, zero2, dtype, ndim = struct.unpack(">BBBB", blob[:4])
    if zero1 != 0 or zero2 != 0 or dtype != _IDX_DTYPE_UBYTE:
        raise ValueError(
            f"{path}: bad IDX magic bytes {blob[:4].hex()} (expected 0000 08 nn)"
        )
    if ndim != expect_ndim:
        raise ValueError(f"{path}: expected {expect_ndim}-d IDX data, header says {ndim}")
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise ValueError(f"{path}: truncated IDX dimension table")
    dims = struct.unpack(f">{ndim}I", blob[4:header_len])
    count = int(np.prod(dims))
    body = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header_len)
    if body.size != count:
        raise ValueError(f"{path}: truncated IDX payload")
    return body.reshape(dims)


def load_idx_images(path):
    """Read an IDX3 image file to float64 [N, 1, H, W] scaled to [0, 1]."""
    raw = _read_idx(path, 3)
    return raw.astype(np.float64)[:, None, :, :] / 255.0


def load_idx_labels(path):
    return _read_idx(path, 1).astype(np.int64)


def make_grating_images(n, seed, size=28, n_classes=10):
    """Oriented sinusoidal gratings with random phase, contrast, and pixel
    noise; class = orientation. Random phase keeps class means near zero,
    so orientation energy must be detected by the conv features."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size), dtype=np.uint8)
    freq = 0.7
    for i in range(n):
        angle = np.pi * y[i] / n_classes
        phase = rng.uniform(0.0, 2.0 * np.pi)
        contrast = rng.uniform(0.6, 1.0)
        wave = np.sin(freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        noisy = contrast * wave + 0.35 * rng.standard_normal((size, size))
        images[i] = np.clip((noisy + 2.0) / 4.0 * 255.0, 0, 255).astype(np.uint8)
    return images, y.astype(np.int64)


def load_image_dataset(train_images, train_labels, val_images, val_labels, normalize=True):
    x_train = load_idx_images(train_images)
    y_train = load_idx_labels(train_labels)
    x_val = load_idx_images(val_images)
    y_val = load_idx_labels(val_labels)
    if len(x_train) != len(y_train) or len(x_val) != len(y_val):
        raise ValueError("image and label counts disagree")
    meta = {}
    if normalize:
        mean = x_train.mean(axis=(0, 2, 3), keepdims=True)
        std = x_train.std(axis=(0, 2, 3), keepdims=True)
        std[std == 0.0] = 1.0
        x_train = (x_train - mean) / std
        x_val = (x_val - mean) / std
        meta = {"mean": mean.ravel().tolist(), "std": std.ravel().tolist()}
    return ClassifyDataset(x_train, y_train, x_val, y_val, meta=meta)


# ---------------------------------------------------------------------------
# character language modeling


def make_markov_corpus(n_chars, seed, alphabet="abcdefghijklmnop ", branching=3):
    """Text from a seeded sparse order-2 Markov chain: each context pair
    allows ``branching`` successors with random weights. Low entropy per
    character, so a small recurrent model can fit it."""
    rng = np.random.default_rng(seed)
    chars = list(alphabet)
    k = len(chars)
    successors = rng.integers(0, k, size=(k, k, branching))
    weights = rng.dirichlet(np.ones(branching), size=(k, k))
    out = np.empty(n_chars, dtype=np.int64)
    a, b = 0, 1
    for i in range(n_chars):
        choice = rng.choice(branching, p=weights[a, b])
        nxt = successors[a, b, choice]
        out[i] = nxt
        a, b = b, nxt
    return "".join(chars[i] for i in out)


def load_char_corpus(text, seq_len, val_fraction=0.05, test_fraction=0.05):
    """Tokenize UTF-8 text to a character vocabulary and split it."""
    if not text:
        raise ValueError("corpus is empty")
    vocab = sorted(set(text))
    index = {ch: i for i, ch in enumerate(vocab)}
    ids = np.array([index[ch] for ch in text], dtype=np.int64)
    n = len(ids)
    n_test = int(n * test_fraction)
    n_val = int(n * val_fraction)
    n_train = n - n_val - n_test
    if n_train <= seq_len:
        raise ValueError("corpus too short for the requested splits")
    return CharSequenceDataset(
        ids[:n_train], ids[n_train : n_train + n_val], ids[n_train + n_val :], vocab, seq_len
    )


# ---------------------------------------------------------------------------
# config-driven entry


def load_dataset(cfg):
    """Build the dataset described by an ExperimentConfig."""
    d = cfg.data
    if cfg.task == "synthetic_classify":
        return make_synthetic_classification(
            n_train=d["n_train"],
            n_val=d["n_val"],
            n_features=d["n_features"],
            noise_fraction=d["noise_fraction"],
            n_classes=d["n_classes"],
            seed=d["data_seed"],
            margin=d["margin"],
        )
    if cfg.task == "image_classify":
        return load_image_dataset(
            d["train_images"], d["train_labels"], d["val_images"], d["val_labels"],
            normalize=d["normalize"],
        )
    if cfg.task == "char_lm":
        with open(d["corpus"], encoding="utf-8") as f:
            text = f.read()
        return load_char_corpus(
            text, d["seq_len"], val_fraction=d["val_fraction"], test_fraction=d["test_fraction"]
        )
    raise ValueError(f"unknown task {cfg.task!r}")
