"""Training objectives for the generator and the quantized student."""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import SyntheticBatch

_BN_TYPES = (nn.BatchNorm1d, nn.BatchNorm2d)


class LossConfigError(ValueError):
    pass


@dataclass
class BNStatsSnapshot:
    names: list = field(default_factory=list)
    means: list = field(default_factory=list)
    variances: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class LossWeights:
    alpha: float = 0.1
    delta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.delta < 0:
            raise LossConfigError("loss weights must be non-negative")


def soft_cross_entropy(logits: torch.Tensor, soft_label: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``-sum_c y[c] * log_softmax(logits)[c]``."""
    return -(soft_label * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def bns_loss(batch_stats: BNStatsSnapshot, snapshot: BNStatsSnapshot) -> torch.Tensor:
    """Per-layer mean squared deviation of means plus that of variances, averaged over layers."""
    if len(batch_stats) != len(snapshot) or list(batch_stats.names) != list(snapshot.names):
        raise LossConfigError(f"BN layer mismatch: {batch_stats.names} vs {snapshot.names}")
    if len(snapshot) == 0:
        return torch.zeros(())
    total = 0.0
    for mu, var, mu_ref, var_ref in zip(batch_stats.means, batch_stats.variances, snapshot.means, snapshot.variances):
        if mu.shape != mu_ref.shape or var.shape != var_ref.shape:
            raise LossConfigError("BN statistic shape mismatch")
        total = total + F.mse_loss(mu, mu_ref.to(mu.dtype)) + F.mse_loss(var, var_ref.to(var.dtype))
    return total / len(snapshot)


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """KL(softmax(teacher) || softmax(student)), batch mean, temperature 1."""
    if student_logits.shape != teacher_logits.shape:
        raise LossConfigError("student and teacher logits differ in shape")
    return F.kl_div(F.log_softmax(student_logits, dim=-1), F.log_softmax(teacher_logits, dim=-1),
                    reduction="batchmean", log_target=True)


def bn_layers(model: nn.Module):
    return [(n, m) for n, m in model.named_modules() if isinstance(m, _BN_TYPES)]


@contextmanager
def record_bn_stats(model: nn.Module):
    """Record the per-channel batch mean / biased variance at every BN input.

    Running statistics of ``model`` are left untouched (the model is expected
    to be in eval mode). Yields a ``BNStatsSnapshot`` filled during forward.
    """
    stats = BNStatsSnapshot()
    handles = []

    def hook(name):
        def fn(module, inputs, output):
            x = inputs[0]
            dims = [0] + list(range(2, x.dim()))
            stats.names.append(name)
            stats.means.append(x.mean(dim=dims))
            stats.variances.append(x.var(dim=dims, unbiased=False))
        return fn

    for name, m in bn_layers(model):
        handles.append(m.register_forward_hook(hook(name)))
    try:
        yield stats
    finally:
        for h in handles:
            h.remove()


def capture_bn_snapshot(model: nn.Module) -> BNStatsSnapshot:
    """Stored running mean/variance of every BN layer, in module order."""
    snap = BNStatsSnapshot()
    for name, m in bn_layers(model):
        snap.names.append(name)
        snap.means.append(m.running_mean.detach().clone())
        snap.variances.append(m.running_var.detach().clone())
    if not snap.names:
        warnings.warn("model has no batch-norm layers; the BNS term will be zero", RuntimeWarning)
    return snap


def generator_loss(synthetic: SyntheticBatch, fp_model: nn.Module, snapshot: BNStatsSnapshot,
                   weights: LossWeights, return_terms: bool = False):
    with record_bn_stats(fp_model) as stats:
        logits = fp_model(synthetic.samples)
    ce = soft_cross_entropy(logits, synthetic.soft_labels)
    bns = bns_loss(stats, snapshot)
    total = ce + weights.alpha * bns
    if return_terms:
        return total, {"CE_G": ce.detach(), "BNS": bns.detach()}
    return total


def student_loss(synthetic: SyntheticBatch, q_model: nn.Module, fp_model: nn.Module,
                 weights: LossWeights, return_terms: bool = False):
    """CE of the student on the soft labels plus weighted KD against the teacher.

    Samples and teacher logits are detached: only the student receives gradients.
    """
    x = synthetic.samples.detach()
    with torch.no_grad():
        teacher_logits = fp_model(x)
    student_logits = q_model(x)
    ce = soft_cross_entropy(student_logits, synthetic.soft_labels.detach())
    kd = kd_loss(student_logits, teacher_logits)
    total = ce + weights.delta * kd
    if return_terms:
        return total, {"CE_Q": ce.detach(), "KD": kd.detach()}
    return total
