"""Seeded synthetic dense-regression task.

Inputs are smooth random fields on a square grid.  Targets come from a
frozen generator built from the same ingredients as a supernet block:
patches are embedded, mixed along the raster order by a stable linear state
recurrence, passed through a wide tanh layer and projected back to pixels.
Subnetworks with larger state, wider expansions and more blocks can
represent more of it, so architecture choices have a real effect on error.
The generator's weights are exposed so a teacher network can be derived
from them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .supernet import NetShape, patchify, unpatchify


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray | None = None
    labels: np.ndarray | None = None
    index: np.ndarray | None = None


@dataclass
class Generator:
    embed: np.ndarray    # (patch_px, d)
    Bt: np.ndarray       # (d, n) state write
    At: np.ndarray       # (n, n) stable state transition
    Ct: np.ndarray       # (n, d) state read
    W1: np.ndarray       # (d, hidden)
    b1: np.ndarray       # (hidden,)
    W2: np.ndarray       # (hidden, patch_px)
    patch: int

    def mixed(self, x: np.ndarray) -> np.ndarray:
        t = patchify(x, self.patch) @ self.embed
        h = kernels.scan_forward(np.ascontiguousarray(t @ self.Bt), np.ascontiguousarray(self.At))
        return t + h @ self.Ct

    def hidden(self, x: np.ndarray, W1=None, b1=None) -> np.ndarray:
        return np.tanh(self.mixed(x) @ (self.W1 if W1 is None else W1) + (self.b1 if b1 is None else b1))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return unpatchify(self.hidden(x) @ self.W2, self.patch)


def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    i = np.arange(n)
    K = np.exp(-((i[:, None] - i[None, :]) ** 2) / (2 * sigma**2))
    return K / K.sum(axis=1, keepdims=True)


def smooth_fields(rng: np.random.Generator, n: int, size: int, sigma: float = 1.2) -> np.ndarray:
    K = _blur_matrix(size, sigma)
    x = K @ rng.standard_normal((n, size, size)) @ K.T
    return x / x.std()


def make_generator(shape: NetShape, rng: np.random.Generator, hidden: int = 64, n_state: int = 6,
                   decay: float = 0.8) -> Generator:
    pp = shape.patch_px
    d = shape.d_model[0]
    embed = rng.standard_normal((pp, d)) / np.sqrt(pp)
    Bt = rng.standard_normal((d, n_state)) / np.sqrt(d)
    Q, _ = np.linalg.qr(rng.standard_normal((n_state, n_state)))
    At = decay * Q
    Ct = rng.standard_normal((n_state, d)) / np.sqrt(n_state)
    W1 = rng.standard_normal((d, hidden)) * (2.0 / np.sqrt(d))
    b1 = rng.standard_normal(hidden) * 0.3
    W2 = rng.standard_normal((hidden, pp)) / np.sqrt(hidden)
    return Generator(embed, Bt, At, Ct, W1, b1, W2, shape.patch)


@dataclass
class MicroTask:
    shape: NetShape
    seed: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    generator: Generator

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        idx = rng.choice(len(self.x_train), size=min(batch_size, len(self.x_train)), replace=False)
        return Batch(self.x_train[idx], self.y_train[idx], index=idx)

    def val_batch(self) -> Batch:
        return Batch(self.x_val, self.y_val)


def make_micro_task(shape: NetShape, seed: int, n_train: int = 256, n_val: int = 64) -> MicroTask:
    rng = np.random.default_rng([seed, 0x7A5C])
    gen = make_generator(shape, rng, hidden=4 * max(shape.d_model))
    x = smooth_fields(rng, n_train + n_val, shape.image_size)
    gen.W2 = gen.W2 / np.std(gen(x))
    y = gen(x)
    return MicroTask(shape, seed, x[:n_train], y[:n_train], x[n_train:], y[n_train:], gen)
