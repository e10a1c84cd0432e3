import pytest

from hieralign.config import TrainConfig


def tiny_config(**overrides) -> TrainConfig:
    """Small-but-complete run description used across harness tests."""
    base = dict(
        data_n=48, data_classes=4, data_side=16, data_seed=5, data_crossover=True,
        enc_channels=(4, 8, 16, 16), enc_latent=4, enc_pretrain_epochs=0, enc_seed=3,
        depth=2, hidden=32, heads=2, patch=4, cfg_dropout=0.1,
        d_embed=8, router_hidden=16,
        batch_size=8, total_steps=12, seed=11,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def shared_cache(tmp_path_factory):
    """Session-wide cache dir so the frozen encoder is built once per spec."""
    return tmp_path_factory.mktemp("cache")
