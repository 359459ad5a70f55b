import numpy as np
import pytest

from pointmark.data import SyntheticShapeSpec, generate_synthetic_dataset
from pointmark.network import NetConfig, SurrogateModel, TrainConfig, train_classifier

TINY_NET_CFG = NetConfig(per_point_widths=(32, 64), head_widths=(32,), class_count=4, seed=5)


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SyntheticShapeSpec(
        class_count=4,
        samples_per_class=24,
        points_per_cloud=64,
        jitter=0.02,
        seed=11,
        extra_verify_per_class=12,
    )
    return generate_synthetic_dataset(spec)


@pytest.fixture(scope="session")
def tiny_net(tiny_dataset):
    idx = tiny_dataset.indices(split="train")
    result = train_classifier(
        TINY_NET_CFG,
        tiny_dataset.clouds(idx),
        tiny_dataset.labels(idx),
        TrainConfig(epochs=60, learning_rate=3e-3, batch_size=16, seed=2),
    )
    return SurrogateModel(TINY_NET_CFG, result.params)
