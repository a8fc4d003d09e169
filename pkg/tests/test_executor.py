import numpy as np
import pytest

from hemoloop.errors import NotReady
from hemoloop.executor import infer_case
from hemoloop.features import N_FEATURES
from hemoloop.inference import InferenceConfig
from hemoloop.registry import Registry

from conftest import make_volume


@pytest.fixture
def registry(tmp_path):
    reg = Registry(tmp_path / "data")
    yield reg
    reg.close()


def constant_model(registry, bias: float) -> int:
    """Zero-weight classifier: predicts sigmoid(bias) everywhere."""
    params = {
        "weights": [0.0] * N_FEATURES,
        "bias": bias,
        "feature_mean": [0.0] * N_FEATURES,
        "feature_std": [1.0] * N_FEATURES,
        "epochs": 0, "lr": 0.0, "seed": 0, "case_count": 0,
        "final_loss": 0.0, "epoch_losses": [],
    }
    return registry.register_model(
        "reference_classifier", params_json=params,
        inference_config={"tta": "off"},
    ).version_id


def test_multi_model_average_ensemble(registry, rng):
    volume = make_volume(rng.uniform(-50, 50, size=(6, 6, 4)))
    record, _ = registry.register_case(volume)
    half = constant_model(registry, 0.0)      # p = 0.5 everywhere
    sure = constant_model(registry, 20.0)     # p ~= 1.0 everywhere
    config = InferenceConfig(ensemble="average", model_ids=[half, sure],
                             min_component_volume_mm3=0.0)
    output, result = infer_case(registry, record.case_id, config, persist=True)
    assert np.allclose(output.prob_map, 0.75, atol=1e-6)
    assert output.positive  # 0.75 >= threshold everywhere: one big component
    assert result["model_versions"] == [half, sure]


def test_weighted_ensemble_degenerate_weight(registry, rng):
    volume = make_volume(rng.uniform(-50, 50, size=(5, 5, 3)))
    record, _ = registry.register_case(volume)
    low = constant_model(registry, -20.0)
    high = constant_model(registry, 20.0)
    config = InferenceConfig(ensemble="weighted", ensemble_weights=[1.0, 0.0],
                             model_ids=[low, high])
    output, _ = infer_case(registry, record.case_id, config, persist=False)
    assert np.all(output.prob_map < 1e-6)
    assert not output.positive


def test_infer_without_deployed_model_raises(registry, rng):
    volume = make_volume(rng.uniform(-50, 50, size=(4, 4, 2)))
    record, _ = registry.register_case(volume)
    with pytest.raises(NotReady):
        infer_case(registry, record.case_id, None, persist=False)
