"""Synthetic image-shaped toy datasets and the data-free access guard."""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass

import numpy as np
import torch

from .io import atomic_path


class DataFreeViolation(RuntimeError):
    """A training-split sample was read while the data-free guard was active."""


_guard = threading.local()


def guard_active() -> bool:
    return getattr(_guard, "depth", 0) > 0


@contextlib.contextmanager
def data_free_guard():
    _guard.depth = getattr(_guard, "depth", 0) + 1
    try:
        yield
    finally:
        _guard.depth -= 1


class Split:
    """Labelled tensors; reading a training split under ``data_free_guard`` raises."""

    def __init__(self, x: torch.Tensor, y: torch.Tensor, name: str):
        if x.shape[0] != y.shape[0]:
            raise ValueError("x and y must have the same length")
        self._x, self._y, self.name = x, y, name

    @property
    def is_training(self) -> bool:
        return self.name == "train"

    def _check(self):
        if self.is_training and guard_active():
            raise DataFreeViolation("training data accessed inside the data-free training path")

    @property
    def x(self) -> torch.Tensor:
        self._check()
        return self._x

    @property
    def y(self) -> torch.Tensor:
        self._check()
        return self._y

    def __len__(self) -> int:
        return self._y.shape[0]

    def batches(self, batch_size: int):
        for i in range(0, len(self), batch_size):
            yield self.x[i:i + batch_size], self.y[i:i + batch_size]

    def save(self, path) -> None:
        with atomic_path(path, suffix=".npz") as tmp:
            np.savez(tmp, x=self._x.numpy(), y=self._y.numpy(), name=np.array(self.name))

    @classmethod
    def load(cls, path) -> "Split":
        if not os.path.exists(path):
            raise FileNotFoundError(f"dataset file not found: {path}")
        with np.load(path) as f:
            return cls(torch.from_numpy(f["x"]), torch.from_numpy(f["y"]).long(), str(f["name"]))


@dataclass
class ToyDatasetSpec:
    num_classes: int = 10
    train_per_class: int = 500
    eval_per_class: int = 200
    input_shape: tuple = (1, 8, 8)
    separation: float = 9.0
    latent_dim: int = 8
    signal_scale: float = 0.3
    nuisance_dim: int = 8
    nuisance_scale: float = 1.0
    modes_per_class: int = 1
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)


@dataclass
class ToyDataset:
    train: Split
    eval: Split
    spec: ToyDatasetSpec


def make_toy_dataset(spec: ToyDatasetSpec) -> ToyDataset:
    """Gaussian class clusters in a low-dimensional space, rendered into images.

    Each sample is ``tanh(signal_scale * A @ u + nuisance_scale * B @ v)``
    reshaped to ``input_shape``. ``u`` is a unit-variance Gaussian around one of
    ``modes_per_class`` means of its class, picked uniformly per sample (all
    means at distance ``separation`` from the origin), and ``v`` is
    class-independent nuisance. ``A`` and ``B`` are fixed random bases of
    smooth images. The nuisance dominates the pixel range, which is what makes
    low-bit per-tensor quantization lossy on this data.
    """
    if spec.num_classes < 2:
        raise ValueError("need at least two classes")
    if spec.modes_per_class < 1:
        raise ValueError("modes_per_class must be >= 1")
    rng = np.random.default_rng(spec.seed)
    C, k, M = spec.num_classes, spec.latent_dim, spec.modes_per_class
    means = rng.standard_normal((C * M, k))  # row c * M + m is mode m of class c
    means *= spec.separation / np.linalg.norm(means, axis=1, keepdims=True)
    # smooth rendering: random mixture of low-frequency basis images
    c_img, h, w = spec.input_shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    def basis(n):
        cols = []
        for _ in range(n):
            fy, fx, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
            img = np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
            cols.append(np.tile(img.reshape(-1), c_img))
        return np.stack(cols, axis=1) / np.sqrt(n)

    A, B = basis(k), basis(spec.nuisance_dim)

    def draw(per_class):
        y = np.repeat(np.arange(C), per_class)
        mode = rng.integers(0, M, len(y)) if M > 1 else np.zeros(len(y), dtype=int)
        u = means[y * M + mode] + rng.standard_normal((len(y), k))
        v = rng.standard_normal((len(y), spec.nuisance_dim))
        pre = spec.signal_scale * u @ A.T + spec.nuisance_scale * v @ B.T
        x = np.tanh(pre).reshape(len(y), *spec.input_shape)
        perm = rng.permutation(len(y))
        return torch.from_numpy(x[perm].astype(np.float32)), torch.from_numpy(y[perm]).long()

    xt, yt = draw(spec.train_per_class)
    xe, ye = draw(spec.eval_per_class)
    return ToyDataset(train=Split(xt, yt, "train"), eval=Split(xe, ye, "eval"), spec=spec)
