import pytest
import torch

from dfq.workbench.config import RunConfig
from dfq.workbench.data import ToyDatasetSpec, make_toy_dataset
from dfq.workbench.models import ClassifierConfig, pretrain_reference_model


SMALL_DATA = ToyDatasetSpec(num_classes=4, train_per_class=120, eval_per_class=50, seed=3)


@pytest.fixture(scope="session")
def small_dataset():
    return make_toy_dataset(SMALL_DATA)


@pytest.fixture(scope="session")
def small_teacher(small_dataset):
    torch.set_num_threads(1)
    return pretrain_reference_model(small_dataset, epochs=6, seed=0,
                                    config=ClassifierConfig(in_shape=(1, 8, 8), num_classes=4, width=8,
                                                            feature_dim=16))


def small_config(seed=0, epochs=2, iters=5, **latent) -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.data = SMALL_DATA
    cfg.latent.dim = 8
    cfg.generator.hidden = 16
    cfg.schedule.epochs = epochs
    cfg.schedule.iters_per_epoch = iters
    cfg.schedule.batch_size = 16
    cfg.schedule.lr_decay_every_epochs = 1
    for k, v in latent.items():
        setattr(cfg.latent, k, v)
    return cfg


_VERDICTS = []


def record_verdict(criterion: int, ok: bool, detail: str) -> None:
    _VERDICTS.append((criterion, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
