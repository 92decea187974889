"""Class embeddings, the disentanglement map and latent superposition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn


class LatentConfigError(ValueError):
    pass


class EmbeddingTable(nn.Module):
    """Class embedding matrix ``E`` of shape (D, C); column ``y`` embeds class ``y``."""

    def __init__(self, dim: int, num_classes: int, frozen: bool = False, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.E = nn.Parameter(torch.randn(dim, num_classes, generator=generator))
        self.set_frozen(frozen)

    @property
    def dim(self) -> int:
        return self.E.shape[0]

    @property
    def num_classes(self) -> int:
        return self.E.shape[1]

    @property
    def frozen(self) -> bool:
        return not self.E.requires_grad

    @property
    def trainable(self) -> bool:
        return self.E.requires_grad

    def set_frozen(self, frozen: bool) -> None:
        self.E.requires_grad_(not frozen)

    def columns(self, classes: torch.Tensor) -> torch.Tensor:
        """Embeddings for ``classes`` as rows: shape (*classes.shape, D)."""
        return self.E.t()[classes]


def init_embeddings_extracted(head_weights: torch.Tensor, frozen: bool = False,
                              expected_shape: Optional[tuple] = None) -> EmbeddingTable:
    """Embedding table copied from the classifier head, one column per class.

    ``head_weights`` is (D, C), i.e. the transpose of an ``nn.Linear`` weight.
    Head biases are deliberately left out.
    """
    w = torch.as_tensor(head_weights)
    if w.dim() != 2:
        raise LatentConfigError(f"head weights must be a matrix, got shape {tuple(w.shape)}")
    if expected_shape is not None and tuple(w.shape) != tuple(expected_shape):
        raise LatentConfigError(f"head weights shape {tuple(w.shape)} != configured {tuple(expected_shape)}")
    if not torch.isfinite(w).all():
        raise LatentConfigError("head weights contain non-finite values")
    table = EmbeddingTable(w.shape[0], w.shape[1], frozen=frozen)
    with torch.no_grad():
        table.E.copy_(w)
    return table


class DisentanglementMap(nn.Module):
    """Learned map applied to each class embedding before mixing.

    ``layer_count=0`` is the identity (output dim equals input dim); otherwise a
    stack of affine layers with SiLU between them.
    """

    def __init__(self, in_dim: int, out_dim: int, layer_count: int = 1):
        super().__init__()
        if layer_count < 0:
            raise LatentConfigError("layer_count must be >= 0")
        if layer_count == 0 and in_dim != out_dim:
            raise LatentConfigError("identity map needs out_dim == in_dim")
        self.layer_count = layer_count
        self.in_dim = in_dim
        self.out_dim = out_dim
        layers: list[nn.Module] = []
        for i in range(layer_count):
            layers.append(nn.Linear(in_dim if i == 0 else out_dim, out_dim))
            if i < layer_count - 1:
                layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        if e.shape[-1] != self.in_dim:
            raise LatentConfigError(f"expected embeddings of width {self.in_dim}, got {e.shape[-1]}")
        return self.net(e) if self.layer_count else e


@dataclass
class SuperpositionSpec:
    K: int = 2
    p: float = 0.4
    sigma_z: float = 1.0
    seed: int = 0

    def validate(self, num_classes: int) -> None:
        if self.K < 1 or self.K > num_classes:
            raise LatentConfigError(f"K must be in [1, {num_classes}], got {self.K}")
        if not 0.0 <= self.p <= 1.0:
            raise LatentConfigError(f"p must be in [0, 1], got {self.p}")
        if self.sigma_z <= 0:
            raise LatentConfigError("sigma_z must be positive")


@dataclass
class LatentBatch:
    vectors: torch.Tensor       # (batch, d)
    soft_labels: torch.Tensor   # (batch, C)
    is_superposed: bool
    classes: torch.Tensor       # (batch, K) class indices, K=1 for regular batches
    lambdas: torch.Tensor       # (batch, K)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def sample_mixing_coefficients(K: int, rng: Optional[torch.Generator] = None, size: Sequence[int] = (),
                               logits: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax of K standard-normal draws; ``logits`` overrides the draws."""
    if K < 1:
        raise LatentConfigError("K must be >= 1")
    if logits is None:
        logits = torch.randn(*size, K, generator=rng)
    return torch.softmax(torch.as_tensor(logits, dtype=torch.get_default_dtype()), dim=-1)


def superpose(table: EmbeddingTable, dm: nn.Module, classes, lambdas, z: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``z + sum_k lambda_k * M(E[:, class_k])``.

    Works on a single tuple (classes of shape (K,)) or a batch (shape (B, K)).
    The map is applied per embedding before mixing and noise is added last.
    """
    classes = torch.as_tensor(classes, dtype=torch.long)
    lambdas = torch.as_tensor(lambdas, dtype=table.E.dtype)
    if classes.shape != lambdas.shape:
        raise LatentConfigError(f"classes {tuple(classes.shape)} and lambdas {tuple(lambdas.shape)} differ in shape")
    sorted_cls = classes.sort(dim=-1).values
    if classes.shape[-1] > 1 and bool((sorted_cls[..., 1:] == sorted_cls[..., :-1]).any()):
        raise LatentConfigError("superposed class indices must be distinct")
    mapped = dm(table.columns(classes))                     # (..., K, d)
    mixed = (lambdas.unsqueeze(-1) * mapped).sum(dim=-2)    # (..., d)
    if z is not None:
        if z.shape[-1] != mixed.shape[-1]:
            raise LatentConfigError(f"noise width {z.shape[-1]} != latent width {mixed.shape[-1]}")
        mixed = mixed + z
    return mixed


def soft_label(classes, lambdas, num_classes: int) -> torch.Tensor:
    classes = torch.as_tensor(classes, dtype=torch.long)
    lambdas = torch.as_tensor(lambdas, dtype=torch.get_default_dtype())
    out = torch.zeros(*classes.shape[:-1], num_classes, dtype=lambdas.dtype)
    return out.scatter_add_(-1, classes, lambdas)


def _distinct_classes(batch: int, K: int, C: int, rng: torch.Generator) -> torch.Tensor:
    # uniform K-subsets in random order: first K of a random permutation
    keys = torch.rand(batch, C, generator=rng)
    return keys.argsort(dim=-1)[:, :K]


def draw_latent_batch(spec: SuperpositionSpec, batch_size: int, table: EmbeddingTable, dm: nn.Module,
                      rng: torch.Generator, superposed: Optional[bool] = None) -> LatentBatch:
    """Draw one batch; the whole batch is superposed with probability ``spec.p``.

    Inside a superposed batch each sample gets its own class tuple and mixing
    coefficients. ``superposed`` forces the batch-level decision.
    """
    C = table.num_classes
    spec.validate(C)
    if superposed is None:
        superposed = bool(torch.rand((), generator=rng) < spec.p)
    if superposed:
        classes = _distinct_classes(batch_size, spec.K, C, rng)
        lambdas = sample_mixing_coefficients(spec.K, rng, size=(batch_size,))
    else:
        classes = torch.randint(0, C, (batch_size, 1), generator=rng)
        lambdas = torch.ones(batch_size, 1)
    out_dim = getattr(dm, "out_dim", table.dim)
    z = torch.randn(batch_size, out_dim, generator=rng) * spec.sigma_z
    vectors = superpose(table, dm, classes, lambdas, z)
    return LatentBatch(vectors=vectors, soft_labels=soft_label(classes, lambdas, C),
                       is_superposed=superposed, classes=classes, lambdas=lambdas)
