import numpy as np
import pytest

from dcdm.layers import OptimizerConfig
from dcdm.model import TrainConfig, build_dcdm, train_model

import synth


@pytest.fixture(scope="session")
def overfit_bundle():
    """A small 2-class model trained to 100% on its own 8 images.

    Shared by the service, viz, and CLI tests that need a model whose
    predictions on known inputs are known.
    """
    x, y = synth.separable_images(2, 4, (32, 32), seed=5)
    model = build_dcdm(2, (32, 32), seed=3, labels=["healthy", "diseased"])
    config = TrainConfig(
        epochs=60,
        batch_size=4,
        seed=11,
        optimizer=OptimizerConfig(kind="adam", lr=1e-3),
        target_train_acc=1.0,
    )
    history = train_model(model, x, y, config)
    pred, _ = model.predict(x)
    assert np.array_equal(pred, y), "fixture model failed to overfit"
    return {"model": model, "x": x, "y": y, "history": history}
