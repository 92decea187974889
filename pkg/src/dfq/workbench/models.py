"""Small reference classifiers with batch norm, and their pretraining."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class ClassifierConfig:
    in_shape: tuple = (1, 8, 8)
    num_classes: int = 10
    width: int = 16
    feature_dim: int = 32

    def __post_init__(self):
        self.in_shape = tuple(int(s) for s in self.in_shape)

    def to_dict(self):
        d = asdict(self)
        d["in_shape"] = list(self.in_shape)
        return d


class ToyClassifier(nn.Module):
    """conv-BN-ReLU x2, global average pool, dense-BN-ReLU, linear head."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        c, w = config.in_shape[0], config.width
        self.conv1 = nn.Conv2d(c, w, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.conv2 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(2 * w)
        self.fc = nn.Linear(2 * w, config.feature_dim, bias=False)
        self.bn3 = nn.BatchNorm1d(config.feature_dim)
        self.head = nn.Linear(config.feature_dim, config.num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Activations entering the final fully connected layer."""
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        x = x.mean(dim=(2, 3))
        return F.relu(self.bn3(self.fc(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def head_of(model: nn.Module) -> nn.Linear:
    return model.head


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def pretrain_reference_model(dataset, epochs: int = 15, config: ClassifierConfig | None = None,
                             lr: float = 3e-3, batch_size: int = 128, seed: int = 0) -> ToyClassifier:
    """Fit a ToyClassifier on ``dataset.train`` with Adam and cross entropy."""
    torch.manual_seed(seed)
    if config is None:
        config = ClassifierConfig(in_shape=dataset.spec.input_shape, num_classes=dataset.spec.num_classes)
    model = ToyClassifier(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(epochs, 1))
    gen = torch.Generator().manual_seed(seed)
    x, y = dataset.train.x, dataset.train.y
    history = []
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(len(y), generator=gen)
        total = 0.0
        for i in range(0, len(y), batch_size):
            idx = perm[i:i + batch_size]
            if len(idx) < 2:
                continue
            loss = F.cross_entropy(model(x[idx]), y[idx])
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        history.append(total / len(y))
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
    return freeze(model)
