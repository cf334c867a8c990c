import numpy as np
import pytest

from cloakbench import TrainConfig, build_model, split, synth_dataset, train
from cloakbench.models import ArchitectureDescriptor, Conv, Dense, Flatten, MaxPool, Relu


def tiny_descriptor(name="tiny", input_size=16, num_classes=4):
    return ArchitectureDescriptor(
        name,
        input_size,
        (
            Conv(6, 3, padding=1), Relu(), MaxPool(2),
            Conv(8, 3, padding=1), Relu(), MaxPool(2),
            Flatten(), Dense(16), Relu(), Dense(num_classes),
        ),
        num_classes,
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    return split(synth_dataset(4, 16, 16, seed=5), 0.75, seed=6)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    model = build_model(tiny_descriptor(), seed=9)
    train(model, tiny_dataset, TrainConfig(lr=0.01, momentum=0.9, epochs=10, batch_size=16, seed=9))
    return model.freeze()


@pytest.fixture(scope="session")
def tiny_model_b(tiny_dataset):
    desc = ArchitectureDescriptor(
        "tiny_b",
        16,
        (
            Conv(8, 3, padding=1), Relu(), MaxPool(2),
            Flatten(), Dense(24), Relu(), Dense(4),
        ),
        4,
    )
    model = build_model(desc, seed=77)
    train(model, tiny_dataset, TrainConfig(lr=0.01, momentum=0.9, epochs=10, batch_size=16, seed=77))
    return model.freeze()


@pytest.fixture(scope="session")
def eval_slice(tiny_dataset):
    idx = tiny_dataset.eval_indices()
    return tiny_dataset.images[idx], tiny_dataset.labels[idx]
