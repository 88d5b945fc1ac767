"""Shared micro-scale fixtures."""

from collections.abc import Iterator
from pathlib import Path

import pytest

from fifo_desk.config import RunConfig, reset_config, set_config_path
from fifo_desk.scenegen import FogDataset, build_dataset


def micro_config(root: Path | None = None, **changes: object) -> RunConfig:
    """A configuration small enough to generate, train and analyze in seconds."""
    config = RunConfig(
        master_seed=7,
        dataset_root=str(root or "data"),
        image_size=16,
        num_classes=4,
        train_cw=4,
        train_rf=4,
        eval_cw=3,
        eval_rf=3,
        width_base=8,
        factor_dim=8,
        batch_per_domain=2,
        pretrain_iters=2,
        warmup_iters=1,
        total_iters=3,
        checkpoint_interval=2,
        log_every=1,
        content_filter_iters=2,
        independence_k=5,
        kmeans_max_iters=50,
    )
    for key, value in changes.items():
        setattr(config, key, value)
    return config.validate()


@pytest.fixture(autouse=True)
def isolated_config() -> Iterator[None]:
    """Keep the global config path and instance from leaking between tests."""
    set_config_path(None)
    reset_config()
    yield
    set_config_path(None)
    reset_config()


@pytest.fixture(scope="session")
def micro_data(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """A generated micro dataset, shared read-only across tests."""
    root = tmp_path_factory.mktemp("micro") / "data"
    return build_dataset(micro_config(root), root)


@pytest.fixture
def micro_dataset(micro_data: Path) -> FogDataset:
    return FogDataset(micro_data)


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory: pytest.TempPathFactory, micro_data: Path) -> Path:
    """Output directory of a complete micro training run."""
    from fifo_desk.trainer import train

    out = tmp_path_factory.mktemp("run")
    train(micro_config(micro_data), micro_data, out)
    return out
