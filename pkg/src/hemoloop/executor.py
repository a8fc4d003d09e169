"""Runs the inference pipeline for registered cases and persists results."""

from __future__ import annotations

import numpy as np

from . import model as refmodel
from .dicomio import DEFAULT_DISCLAIMER
from .errors import NotReady, UnknownVersion
from .inference import InferenceConfig, run_pipeline
from .metrics import CalibrationMap
from .registry import ModelVersion, Registry


def build_predictor(registry: Registry, version: ModelVersion):
    """Wrap a registered model version as a volume -> probability-map callable."""
    if version.kind == "reference_classifier":
        params = refmodel.ClassifierParams.from_json(
            registry.load_params_json(version)
        )
        return lambda volume: refmodel.predict(params, volume)
    if version.kind == "external_runner":
        descriptor = version.runner_descriptor
        return lambda volume: refmodel.run_external(descriptor, volume)
    raise UnknownVersion(f"unhandled model kind {version.kind!r}")


def resolve_versions(registry: Registry, config: InferenceConfig) -> list[ModelVersion]:
    if config.model_ids:
        return [registry.get_model(v) for v in config.model_ids]
    deployed = registry.deployed_model()
    if deployed is None:
        raise NotReady("no model deployed and none specified")
    return [deployed]


def infer_case(
    registry: Registry,
    case_id: str,
    config: InferenceConfig | None = None,
    persist: bool = True,
    calibration: CalibrationMap | None = None,
):
    """Run the full pipeline for one case; optionally persist result + report.

    The calibration map defaults to the one attached to the first model
    version in play (identity when none).
    """
    record = registry.get_case(case_id)
    if record.volume_ref is None:
        raise NotReady(f"case {case_id} has no volume")
    volume = registry.load_volume(case_id)

    if config is None:
        deployed = registry.deployed_model()
        if deployed is None:
            raise NotReady("no model deployed")
        config = InferenceConfig.from_json(deployed.inference_config)
        if not config.model_ids:
            config.model_ids = [deployed.version_id]
    versions = resolve_versions(registry, config)
    if calibration is None:
        calibration = registry.calibration_for(versions[0])
    predictors = [build_predictor(registry, v) for v in versions]

    output = run_pipeline(predictors, volume, config, calibration)
    report_kind = "positive_mask_overlay" if output.positive else "negative_marker"
    result = None
    if persist:
        result = registry.record_result(
            case_id=case_id,
            model_versions=[v.version_id for v in versions],
            config=config.to_json(),
            prob_map=output.prob_map,
            mask=output.mask.astype(np.uint8),
            lesions=[l.to_json() for l in output.lesions],
            case_score=output.case_score,
            total_volume_ml=output.total_volume_ml,
            wall_time_ms=output.wall_time_ms,
            report_kind=report_kind,
            disclaimer=DEFAULT_DISCLAIMER,
        )
    return output, result
