import numpy as np
import pytest

from mcrlab.models import ModelConfig, MultimodalModel
from mcrlab.synthdata import SyntheticSpec, generate
from mcrlab.trainer import ArchConfig, DiagConfig, OptimConfig, RunConfig

# pass/fail lines recorded by the acceptance tests, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_data():
    """Small but learnable two-modality dataset for fast loop tests."""
    spec = SyntheticSpec(
        n_classes=3, dim=4, n_train=60, n_val=30, n_test=40,
        shared_frac=0.5, unique_frac_1=0.2, unique_frac_2=0.2, seed=5,
    )
    return generate(spec)


def tiny_run(method: str = "mcr", seed: int = 0, **optim) -> RunConfig:
    opt = dict(lr=0.05, weight_decay=0.0, momentum=0.0, batch_size=16, epochs=2, patience=5)
    opt.update(optim)
    return RunConfig(
        method=method,
        seed=seed,
        arch=ArchConfig(encoder_hidden=(8,), latent_dim=4, fusion_hidden=(8,), recon_hidden=(4,)),
        optimizer=OptimConfig(**opt),
        diagnostics=DiagConfig(probe_steps=25, probe_lr=0.5, n_perm=2),
    )


def toy_model(seed: int = 0, input_dims=(5, 4), n_classes=3, activation="tanh") -> MultimodalModel:
    cfg = ModelConfig(
        input_dims=input_dims,
        n_classes=n_classes,
        encoder_hidden=(6,),
        latent_dim=4,
        fusion_hidden=(6,),
        recon_hidden=(5,),
        activation=activation,
    )
    return MultimodalModel(cfg, np.random.default_rng(seed))


def toy_batch(rng: np.random.Generator, input_dims=(5, 4), n_classes=3, n=6):
    xs = [rng.normal(size=(n, d)) for d in input_dims]
    y = rng.integers(0, n_classes, size=n)
    return xs, y
