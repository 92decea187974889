"""Joint data-free fine-tuning of the generator and the quantized student."""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .generator import Generator, GeneratorConfig, generate
from .latent import (DisentanglementMap, EmbeddingTable, LatentBatch, SuperpositionSpec, draw_latent_batch,
                     init_embeddings_extracted, sample_mixing_coefficients)
from .losses import BNStatsSnapshot, LossWeights, capture_bn_snapshot, generator_loss, student_loss
from .metrics import mixup_baseline, top1_accuracy
from .quantizer import quantize_model
from .workbench.config import RunConfig, TrainSchedule, dumps, to_dict
from .workbench.data import Split, data_free_guard
from .workbench.io import write_csv

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "iter", "loss_G", "CE_G", "BNS", "loss_Q", "CE_Q", "KD")

__all__ = ["Distiller", "RunHistory", "TrainSchedule", "TrainingDiverged", "TeacherCheckpointError",
           "capture_bn_snapshot", "build_latent_components", "prepare_student", "run", "parameter_checksum"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


class TeacherCheckpointError(FileNotFoundError):
    pass


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (epoch, top1)
    seeds: dict = field(default_factory=dict)
    config: str = ""

    def history_rows(self):
        return [[r[c] for c in HISTORY_COLUMNS] for r in self.records]

    def write(self, out_dir) -> None:
        write_csv(os.path.join(out_dir, "history.csv"), HISTORY_COLUMNS, self.history_rows())
        write_csv(os.path.join(out_dir, "eval.csv"), ("epoch", "top1"), self.evals)


def build_latent_components(cfg: RunConfig, teacher: nn.Module):
    """Embedding table, mapping layer and generator for ``cfg`` (uses the global torch RNG)."""
    head = teacher.head
    D, C = head.in_features, head.out_features
    lat = cfg.latent
    if lat.ee_init:
        table = init_embeddings_extracted(head.weight.detach().t().clone(), frozen=lat.freeze_embeddings,
                                          expected_shape=(D, C))
    else:
        table = EmbeddingTable(D, C, frozen=lat.freeze_embeddings)
    d = lat.dim if lat.dm_layers > 0 else D
    dm = DisentanglementMap(D, d, lat.dm_layers)
    gen = Generator(GeneratorConfig(latent_dim=d, num_classes=C, out_shape=teacher.config.in_shape,
                                    hidden=cfg.generator.hidden, use_conditional_bn=cfg.generator.conditional_bn))
    return table, dm, gen


def _student_train_mode(q: nn.Module, bn_train: bool = False) -> None:
    q.train()
    if bn_train:
        return
    # batch-norm statistics stay frozen at the teacher's values
    for m in q.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()


@torch.no_grad()
def prepare_student(teacher, cfg: RunConfig, generator, table, dm, rng: torch.Generator) -> nn.Module:
    """Fake-quantized copy of the teacher with activation ranges calibrated on generated batches."""
    q = quantize_model(teacher, cfg.quant.w_bits, cfg.quant.a_bits)
    _student_train_mode(q)
    spec = SuperpositionSpec(K=cfg.latent.k, p=cfg.latent.p, sigma_z=cfg.latent.sigma_z, seed=cfg.seed)
    generator.train()
    for _ in range(max(cfg.schedule.calib_batches, 1)):
        batch = draw_latent_batch(spec, cfg.schedule.batch_size, table, dm, rng, superposed=False)
        q(generate(generator, batch).samples)
    q.eval()
    return q


class Distiller:
    """Holds P (frozen), Q, G and the latent machinery; one ``train_step`` is one G update then one Q update."""

    def __init__(self, teacher: nn.Module, student: nn.Module, generator: Generator, table: EmbeddingTable,
                 dm: nn.Module, schedule: TrainSchedule, spec: SuperpositionSpec, weights: LossWeights,
                 rng: torch.Generator, baseline: str = "none"):
        self.teacher, self.student, self.generator = teacher, student, generator
        self.table, self.dm = table, dm
        self.schedule, self.spec, self.weights, self.rng = schedule, spec, weights, rng
        self.baseline = baseline
        self.snapshot: BNStatsSnapshot = capture_bn_snapshot(teacher)
        g_params = list(generator.parameters()) + list(dm.parameters())
        if table.trainable:
            g_params.append(table.E)
        self.opt_g = torch.optim.Adam(g_params, lr=schedule.g_lr)
        self.opt_q = torch.optim.SGD(student.parameters(), lr=schedule.q_lr, momentum=schedule.q_momentum,
                                     weight_decay=schedule.q_weight_decay, nesterov=schedule.nesterov)

    def set_epoch(self, epoch: int) -> None:
        for group in self.opt_g.param_groups:
            group["lr"] = self.schedule.lr_at(self.schedule.g_lr, epoch)
        for group in self.opt_q.param_groups:
            group["lr"] = self.schedule.lr_at(self.schedule.q_lr, epoch)

    def draw(self) -> LatentBatch:
        return draw_latent_batch(self.spec, self.schedule.batch_size, self.table, self.dm, self.rng,
                                 superposed=False if self.baseline == "mixup" else None)

    def synthesize(self):
        if self.baseline != "mixup":
            return generate(self.generator, self.draw())
        first = generate(self.generator, self.draw())
        if not bool(torch.rand((), generator=self.rng) < self.spec.p):
            return first
        second = generate(self.generator, self.draw())
        lam = sample_mixing_coefficients(2, self.rng, size=(len(first),))[:, 0]
        return mixup_baseline(first, second, lam)

    def train_step(self, epoch: int = 0, it: int = 0, synthetic=None, update_student: bool = True) -> dict:
        self.generator.train()
        if synthetic is None:
            synthetic = self.synthesize()
        loss_g, g_terms = generator_loss(synthetic, self.teacher, self.snapshot, self.weights, return_terms=True)
        if synthetic.samples.requires_grad:
            self.opt_g.zero_grad()
            loss_g.backward()
            self.opt_g.step()

        if update_student:
            _student_train_mode(self.student, self.schedule.student_bn_train)
        else:
            self.student.eval()  # keep activation ranges frozen too
        loss_q, q_terms = student_loss(synthetic, self.student, self.teacher, self.weights, return_terms=True)
        record = {"epoch": epoch, "iter": it, "loss_G": loss_g.item(), "CE_G": g_terms["CE_G"].item(),
                  "BNS": g_terms["BNS"].item(), "loss_Q": loss_q.item(), "CE_Q": q_terms["CE_Q"].item(),
                  "KD": q_terms["KD"].item()}
        if not all(math.isfinite(v) for v in (record["loss_G"], record["loss_Q"])):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch} iter {it}: {record}", record)
        if update_student:
            self.opt_q.zero_grad()
            loss_q.backward()
            self.opt_q.step()
        self.student.eval()
        return record


def _load_teacher(cfg: RunConfig):
    from .workbench.checkpoint import load_teacher

    path = cfg.paths.teacher
    if not path or not os.path.exists(path):
        raise TeacherCheckpointError(f"teacher checkpoint not found: {path!r}")
    return load_teacher(path)


def run(cfg: RunConfig, teacher: Optional[nn.Module] = None, eval_split: Optional[Split] = None,
        out_dir: Optional[str] = None, eval_every: int = 1):
    """Full data-free distillation run; returns ``(student, generator, history, components)``.

    ``components`` is a dict with the embedding table and mapping layer. Real
    data is only touched for evaluation; the training loop runs under
    ``data_free_guard``.
    """
    cfg = cfg.effective()
    cfg.validate()
    if teacher is None:
        teacher = _load_teacher(cfg)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)

    torch.manual_seed(cfg.seed)
    rng = torch.Generator().manual_seed(cfg.seed)
    table, dm, gen = build_latent_components(cfg, teacher)
    student = prepare_student(teacher, cfg, gen, table, dm, rng)
    spec = SuperpositionSpec(K=cfg.latent.k, p=cfg.latent.p, sigma_z=cfg.latent.sigma_z, seed=cfg.seed)
    distiller = Distiller(teacher, student, gen, table, dm, cfg.schedule, spec, cfg.loss, rng, cfg.baseline)
    history = RunHistory(seeds={"seed": cfg.seed}, config=dumps(cfg))
    sched = cfg.schedule

    def checkpoint(tag):
        if out_dir is None:
            return
        from .workbench.checkpoint import save_distilled

        save_distilled(os.path.join(out_dir, f"{tag}.ckpt"), student, teacher, gen, table, dm, to_dict(cfg))

    # generator-only warm-up; recorded with negative epoch indices
    distiller.set_epoch(0)
    with data_free_guard():
        for w in range(sched.g_warmup_epochs):
            for it in range(sched.iters_per_epoch):
                history.records.append(distiller.train_step(w - sched.g_warmup_epochs, it, update_student=False))
    for epoch in range(sched.epochs):
        distiller.set_epoch(epoch)
        with data_free_guard():
            for it in range(sched.iters_per_epoch):
                history.records.append(distiller.train_step(epoch, it))
        if eval_split is not None and ((epoch + 1) % eval_every == 0 or epoch + 1 == sched.epochs):
            history.evals.append((epoch, top1_accuracy(student, eval_split)))
            log.info("epoch %d top1 %.4f", epoch, history.evals[-1][1])
        if (epoch + 1) % sched.lr_decay_every_epochs == 0 and epoch + 1 < sched.epochs:
            checkpoint(f"epoch{epoch + 1:04d}")
    student.eval()
    gen.eval()
    if out_dir is not None:
        checkpoint("final")
        history.write(out_dir)
    return student, gen, history, {"table": table, "dm": dm}
