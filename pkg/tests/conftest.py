import sys

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_run_config(seed=0, **overrides):
    from o3unlearn.bench.config import RunConfig

    base = dict(data__n_requests=2, data__n_train=80, data__n_test=40,
                model__d_model=16, model__n_layers=2, model__pretrain_epochs=25, model__encoder_epochs=10,
                detector__epochs=5, run__seed=seed)
    base.update(overrides)
    return RunConfig().replace(**base)


@pytest.fixture(scope="session")
def tiny_pretrained():
    """Pre-trained tiny target and encoder on a small synthetic benchmark."""
    from o3unlearn.bench.pipeline import Benchmark, pretrain

    cfg = tiny_run_config()
    bench = Benchmark.from_config(cfg)
    return cfg, bench, pretrain(cfg, bench)


@pytest.fixture(scope="session")
def default_encoder():
    """Encoder pre-trained at the default desk scale, with its benchmark."""
    from o3unlearn.bench.config import RunConfig
    from o3unlearn.bench.pipeline import Benchmark, model_configs, pretrain_encoder

    cfg = RunConfig()
    bench = Benchmark.from_config(cfg)
    _, ecfg = model_configs(cfg, bench.spec)
    return bench, ecfg, pretrain_encoder(cfg, bench, ecfg)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.RESULTS):
            terminalreporter.write_line(line)
