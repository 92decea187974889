"""Evaluation and diagnostics of teachers, students and generators."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .generator import Generator, SyntheticBatch
from .latent import EmbeddingTable, soft_label, superpose

SOURCES = ("real", "synthetic-regular", "synthetic-superposed")


class MetricError(ValueError):
    pass


@dataclass
class FeatureExtraction:
    features: np.ndarray
    labels: np.ndarray
    source: np.ndarray  # per-row tag from SOURCES

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.source = np.broadcast_to(np.asarray(self.source, dtype=object), (len(self.features),)).copy()
        if not np.isfinite(self.features).all():
            raise MetricError("features must be finite")

    def __len__(self):
        return len(self.features)

    @classmethod
    def concat(cls, parts):
        return cls(np.concatenate([p.features for p in parts]), np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.source for p in parts]))


@dataclass
class PairDiagnostics:
    pair: tuple
    distance_ratio: float
    intrusion_score: float
    path: np.ndarray  # (steps, F) feature images along the sweep


@torch.no_grad()
def top1_accuracy(model: nn.Module, dataset, batch_size: int = 512) -> float:
    """Fraction of argmax-correct predictions (first maximal index wins ties)."""
    if len(dataset) == 0:
        raise MetricError("empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    for x, y in dataset.batches(batch_size):
        correct += int((model(x).argmax(dim=1) == y).sum())
    model.train(was_training)
    return correct / len(dataset)


def _features_and_logits(model, x):
    feats = model.features(x)
    return feats, model.head(feats)


def path_length_ratio(points) -> float:
    """Piecewise path length divided by the endpoint chord."""
    pts = np.asarray(points, dtype=np.float64)
    chord = np.linalg.norm(pts[-1] - pts[0])
    if chord == 0:
        raise MetricError("path endpoints coincide; distance ratio undefined")
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() / chord)


def path_intrusion(probs, pair) -> float:
    """Mean probability mass outside ``pair`` over the path points."""
    p = np.asarray(probs, dtype=np.float64)
    inside = p[:, list(pair)].sum(axis=1)
    return float(np.clip(p.sum(axis=1) - inside, 0.0, 1.0).mean())


def sweep(steps: int = 101) -> torch.Tensor:
    return torch.linspace(0.0, 1.0, steps)


@torch.no_grad()
def latent_path_samples(generator: Generator, dm: nn.Module, table: EmbeddingTable, pair, steps: int = 101):
    """Noise-free samples along ``lam * M(e_a) + (1 - lam) * M(e_b)`` for lam in [0, 1]."""
    a, b = pair
    lam = sweep(steps)
    lambdas = torch.stack([lam, 1 - lam], dim=1)
    classes = torch.tensor([a, b]).expand(steps, 2)
    latents = superpose(table, dm, classes, lambdas)
    labels = soft_label(classes, lambdas, table.num_classes)
    generator.eval()
    return generator(latents, labels)


@torch.no_grad()
def mixup_path_samples(generator: Generator, dm: nn.Module, table: EmbeddingTable, pair, steps: int = 101):
    """Sample-space mixing of the two noise-free class samples."""
    ends = latent_path_samples(generator, dm, table, pair, steps=2)  # lam=0 -> class b, lam=1 -> class a
    lam = sweep(steps).view(-1, 1, 1, 1)
    return lam * ends[1] + (1 - lam) * ends[0]


def _path_diagnostics(samples, teacher, pair) -> PairDiagnostics:
    with torch.no_grad():
        feats, logits = _features_and_logits(teacher, samples)
    feats = feats.double().numpy()
    probs = torch.softmax(logits.double(), dim=1).numpy()
    return PairDiagnostics(tuple(pair), path_length_ratio(feats), path_intrusion(probs, pair), feats)


def pair_diagnostics(generator, dm, table, teacher, pair, steps: int = 101, mode: str = "latent") -> PairDiagnostics:
    teacher.eval()
    if mode == "latent":
        samples = latent_path_samples(generator, dm, table, pair, steps)
    elif mode == "mixup":
        samples = mixup_path_samples(generator, dm, table, pair, steps)
    else:
        raise MetricError(f"unknown path mode {mode!r}")
    return _path_diagnostics(samples, teacher, pair)


def embedding_distance_ratio(generator, dm, table, teacher, pair, steps: int = 101, mode: str = "latent") -> float:
    return pair_diagnostics(generator, dm, table, teacher, pair, steps, mode).distance_ratio


def intrusion_score(generator, dm, table, teacher, pair, steps: int = 101, mode: str = "latent") -> float:
    return pair_diagnostics(generator, dm, table, teacher, pair, steps, mode).intrusion_score


def all_pairs(num_classes: int):
    return list(itertools.combinations(range(num_classes), 2))


def table4(generator, dm, table, teacher, steps: int = 101, mode: str = "latent", pairs=None) -> list[PairDiagnostics]:
    pairs = all_pairs(table.num_classes) if pairs is None else pairs
    return [pair_diagnostics(generator, dm, table, teacher, pair, steps, mode) for pair in pairs]


@torch.no_grad()
def select_confusing_samples(model: nn.Module, dataset, threshold: float = 0.25, per_class: Optional[int] = None,
                             allow_real_data: bool = False):
    """Indices of samples whose top softmax confidence is below ``threshold``.

    Reads real labelled data, so the caller must opt in with ``allow_real_data``.
    Returns at most ``per_class`` indices per class, in dataset order.
    """
    if not allow_real_data:
        raise MetricError("confusing-sample selection reads real data; pass allow_real_data=True")
    model.eval()
    x, y = dataset.x, dataset.y
    conf = torch.softmax(model(x), dim=1).max(dim=1).values
    selected = []
    for c in torch.unique(y).tolist():
        idx = torch.nonzero((y == c) & (conf < threshold)).flatten().tolist()
        if per_class is not None:
            if len(idx) < per_class:
                warnings.warn(f"class {c}: only {len(idx)} confusing samples (requested {per_class})",
                              RuntimeWarning)
            idx = idx[:per_class]
        selected.extend(idx)
    return sorted(selected)


def pca_project(features, dims: int = 2):
    """Project centered rows onto the top ``dims`` principal directions.

    Returns ``(points, explained_variance_ratio, components)``; components are
    sign-normalised so each one's first nonzero coordinate is positive.
    """
    X = features.features if isinstance(features, FeatureExtraction) else np.asarray(features, dtype=np.float64)
    if X.shape[0] <= dims:
        raise MetricError(f"need more than {dims} samples, got {X.shape[0]}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    tol = max(evals[0], 1.0) * 1e-10 if len(evals) else 0.0
    if np.count_nonzero(evals > tol) < dims:
        raise MetricError(f"feature rank below {dims}")
    comps = evecs[:, :dims].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1
    explained = evals[:dims] / evals.sum()
    return Xc @ comps.T, explained, comps


def mixup_baseline(batch1: SyntheticBatch, batch2: SyntheticBatch, lam) -> SyntheticBatch:
    """Sample-space mixing ``lam * batch1 + (1 - lam) * batch2`` of images and labels."""
    if batch1.samples.shape != batch2.samples.shape or batch1.soft_labels.shape != batch2.soft_labels.shape:
        raise MetricError("mixup batches must have equal shapes")
    lam_t = torch.as_tensor(lam, dtype=batch1.samples.dtype)
    lx = lam_t.view(-1, *([1] * (batch1.samples.dim() - 1))) if lam_t.dim() else lam_t
    ly = lam_t.view(-1, 1) if lam_t.dim() else lam_t
    return SyntheticBatch(samples=lx * batch1.samples + (1 - lx) * batch2.samples,
                          soft_labels=ly * batch1.soft_labels + (1 - ly) * batch2.soft_labels,
                          is_superposed=True)


def segment_projection(points, start, end) -> np.ndarray:
    """Scalar position of each point's orthogonal projection on the line start->end (0 at start, 1 at end)."""
    points, start, end = (np.asarray(v, dtype=np.float64) for v in (points, start, end))
    direction = end - start
    denom = direction @ direction
    if denom == 0:
        raise MetricError("segment endpoints coincide")
    return (points - start) @ direction / denom


@torch.no_grad()
def synthetic_features(generator, dm, table, teacher, classes, lambdas, sigma_z: float = 0.0,
                       rng: Optional[torch.Generator] = None):
    """Teacher features of generated samples for explicit class tuples and mixing weights."""
    classes = torch.as_tensor(classes, dtype=torch.long)
    lambdas = torch.as_tensor(lambdas, dtype=torch.float32)
    z = None
    if sigma_z > 0:
        z = torch.randn(classes.shape[0], dm.out_dim, generator=rng) * sigma_z
    latents = superpose(table, dm, classes, lambdas, z)
    generator.eval()
    teacher.eval()
    samples = generator(latents, soft_label(classes, lambdas, table.num_classes))
    return teacher.features(samples).double().numpy()


def boundary_projection_coefficients(generator, dm, table, teacher, sigma_z: float = 1.0, per_class: int = 64,
                                     seed: int = 0, lam: float = 0.5) -> np.ndarray:
    """For every class pair, where the noise-free ``lam`` mix lands between the class centroids.

    Centroids are means of teacher features of regular (single-class, noisy)
    generated samples. One coefficient per pair, pairs in lexicographic order.
    """
    rng = torch.Generator().manual_seed(seed)
    C = table.num_classes
    centroids = []
    for c in range(C):
        cls = torch.full((per_class, 1), c)
        centroids.append(synthetic_features(generator, dm, table, teacher, cls, torch.ones(per_class, 1),
                                            sigma_z, rng).mean(axis=0))
    pairs = all_pairs(C)
    classes = torch.tensor(pairs)
    lambdas = torch.tensor([[lam, 1 - lam]] * len(pairs))
    feats = synthetic_features(generator, dm, table, teacher, classes, lambdas)
    return np.array([segment_projection(f[None], centroids[b], centroids[a])[0] for f, (a, b) in zip(feats, pairs)])


def feature_cloud(model, x, labels, source: str) -> FeatureExtraction:
    with torch.no_grad():
        model.eval()
        f = model.features(x).double().numpy()
    return FeatureExtraction(f, np.asarray(labels), source)
