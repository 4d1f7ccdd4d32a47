"""Shared fixtures: a small dataset and a quickly trained model, reused by
the engine/service/CLI tests so the suite stays fast."""

import numpy as np
import pytest

from attrsearch import synthgen, trainer


@pytest.fixture(scope="session")
def small_dataset():
    schema = synthgen.default_schema()
    images = synthgen.generate_dataset(schema, 260, seed=11)
    ds = synthgen.split(images, n_query=30, n_gallery=90, seed=11)
    return schema, images, ds


@pytest.fixture(scope="session")
def small_model(small_dataset):
    cfg = trainer.TrainConfig(epochs_stage1=2, epochs_stage2=2,
                              epochs_stage3=2, evaluate_after=False)
    model, report = trainer.train(small_dataset, "Full", seed=5, config=cfg)
    return model, report


@pytest.fixture(scope="session")
def small_by_id(small_dataset):
    _, images, _ = small_dataset
    return {im.id: im for im in images}
