"""Prediction pipeline: TTA, ensemble combination, thresholding with minimum
component filtering, per-lesion calibrated confidence, and case-level scoring.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dicomio import VolumeImage, lesion_volume_ml
from .errors import BadWeights, EmptyComponent, ShapeMismatch
from .metrics import CalibrationMap

TTA_MODES = ("off", "flips")
ENSEMBLE_MODES = ("single", "average", "majority_vote", "weighted")

DEFAULT_THRESHOLD = 0.5
DEFAULT_MIN_COMPONENT_MM3 = 20.0

# 26-connectivity: all touching voxels, faces, edges and corners alike.
_CONNECTIVITY = np.ones((3, 3, 3), dtype=int)


@dataclass
class InferenceConfig:
    tta: str = "off"
    ensemble: str = "single"
    ensemble_weights: list[float] | None = None
    threshold: float = DEFAULT_THRESHOLD  # voxel detection threshold
    # case-level operating cutoff; defaults to the voxel threshold and is
    # replaced by the calibrated value when a round runs threshold calibration
    case_threshold: float | None = None
    min_component_volume_mm3: float = DEFAULT_MIN_COMPONENT_MM3
    model_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.tta not in TTA_MODES:
            raise ValueError(f"tta must be one of {TTA_MODES}")
        if self.ensemble not in ENSEMBLE_MODES:
            raise ValueError(f"ensemble must be one of {ENSEMBLE_MODES}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must lie in (0, 1)")
        if self.case_threshold is not None and not (0.0 <= self.case_threshold <= 1.0):
            raise ValueError("case_threshold must lie in [0, 1]")
        if self.min_component_volume_mm3 < 0:
            raise ValueError("min_component_volume_mm3 must be >= 0")
        if self.ensemble_weights is not None:
            if any(w < 0 for w in self.ensemble_weights):
                raise BadWeights("ensemble weights must be non-negative")
            if sum(self.ensemble_weights) <= 0:
                raise BadWeights("ensemble weights must sum to > 0")

    @property
    def effective_case_threshold(self) -> float:
        return self.case_threshold if self.case_threshold is not None else self.threshold

    def to_json(self) -> dict:
        return {
            "tta": self.tta,
            "ensemble": self.ensemble,
            "ensemble_weights": self.ensemble_weights,
            "threshold": self.threshold,
            "case_threshold": self.case_threshold,
            "min_component_volume_mm3": self.min_component_volume_mm3,
            "model_ids": list(self.model_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InferenceConfig":
        return cls(
            tta=obj.get("tta", "off"),
            ensemble=obj.get("ensemble", "single"),
            ensemble_weights=obj.get("ensemble_weights"),
            threshold=obj.get("threshold", DEFAULT_THRESHOLD),
            case_threshold=obj.get("case_threshold"),
            min_component_volume_mm3=obj.get("min_component_volume_mm3",
                                             DEFAULT_MIN_COMPONENT_MM3),
            model_ids=list(obj.get("model_ids", [])),
        )


def apply_tta(predictor, volume: VolumeImage) -> np.ndarray:
    """Average predictions over the axis-flip orbit {id, flip-x, flip-y, both}.

    Each flipped prediction is flipped back before averaging; z is never
    flipped (axial acquisition has no up/down symmetry).
    """
    total = np.zeros(volume.shape, dtype=np.float64)
    for flip_x in (False, True):
        for flip_y in (False, True):
            axes = tuple(axis for axis, on in ((0, flip_x), (1, flip_y)) if on)
            vox = np.flip(volume.voxels, axis=axes) if axes else volume.voxels
            flipped = VolumeImage(
                study_uid=volume.study_uid,
                series_uid=volume.series_uid,
                voxels=vox,
                spacing=volume.spacing,
                origin=volume.origin,
            )
            pred = np.asarray(predictor(flipped), dtype=np.float64)
            if pred.shape != volume.shape:
                raise ShapeMismatch(
                    f"predictor returned {pred.shape}, expected {volume.shape}"
                )
            total += np.flip(pred, axis=axes) if axes else pred
    return total / 4.0


def ensemble_combine(
    maps: list[np.ndarray],
    strategy: str,
    weights: list[float] | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> np.ndarray:
    """Combine per-model probability maps into one map.

    average is the arithmetic mean; weighted is sum(w*m)/sum(w);
    majority_vote is the per-voxel fraction of maps at or above threshold
    (still a [0,1] map, so a two-model tie lands exactly on 0.5).
    """
    if not maps:
        raise ValueError("need at least one probability map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ShapeMismatch(f"map shapes differ: {m.shape} vs {shape}")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    if strategy == "single":
        if len(maps) != 1:
            raise ValueError("single strategy requires exactly one map")
        return stack[0]
    if strategy == "average":
        return stack.mean(axis=0)
    if strategy == "weighted":
        if weights is None or len(weights) != len(maps):
            raise BadWeights("weighted ensemble needs one weight per map")
        if any(w < 0 for w in weights):
            raise BadWeights("ensemble weights must be non-negative")
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            raise BadWeights("ensemble weights must sum to > 0")
        return np.tensordot(w, stack, axes=1) / total
    if strategy == "majority_vote":
        return (stack >= threshold).mean(axis=0)
    raise ValueError(f"unknown ensemble strategy {strategy!r}")


@dataclass
class Lesion:
    component_id: int
    voxel_indices: np.ndarray  # flat C-order indices into the volume grid
    volume_ml: float
    confidence: float

    @property
    def voxel_count(self) -> int:
        return len(self.voxel_indices)

    def to_json(self) -> dict:
        return {
            "component_id": self.component_id,
            "voxel_count": self.voxel_count,
            "volume_ml": self.volume_ml,
            "confidence": self.confidence,
        }


def binarize_and_filter(
    prob_map: np.ndarray,
    threshold: float,
    min_component_volume_mm3: float,
    spacing: tuple[float, float, float],
):
    """Threshold the map and drop sub-minimum 26-connected components.

    Returns (mask, components); components are (flat_indices, volume_ml)
    tuples ordered by descending volume, ties by smallest flat voxel index.
    Component ids follow that order, starting at 1.
    """
    prob_map = np.asarray(prob_map)
    raw_mask = prob_map >= threshold
    labeled, n_found = ndimage.label(raw_mask, structure=_CONNECTIVITY)
    voxel_mm3 = spacing[0] * spacing[1] * spacing[2]

    kept = []
    flat_labels = labeled.reshape(-1)
    for label_value in range(1, n_found + 1):
        indices = np.flatnonzero(flat_labels == label_value)
        volume_mm3 = len(indices) * voxel_mm3
        if volume_mm3 < min_component_volume_mm3:
            continue
        kept.append((indices, volume_mm3 / 1000.0))

    kept.sort(key=lambda comp: (-len(comp[0]), int(comp[0][0])))
    mask = np.zeros(prob_map.shape, dtype=bool)
    for indices, _ in kept:
        mask.reshape(-1)[indices] = True
    return mask, kept


def lesion_confidence(
    prob_map: np.ndarray,
    voxel_indices: np.ndarray,
    calibration: CalibrationMap | None = None,
) -> float:
    """Calibrated mean probability over the component's voxels."""
    if len(voxel_indices) == 0:
        raise EmptyComponent("component has no voxels")
    mean_p = float(np.asarray(prob_map).reshape(-1)[voxel_indices].mean())
    if calibration is not None and not calibration.is_identity:
        return float(calibration.apply(mean_p))
    return mean_p


@dataclass
class PipelineOutput:
    prob_map: np.ndarray
    mask: np.ndarray
    lesions: list[Lesion]
    case_score: float
    total_volume_ml: float
    wall_time_ms: float

    @property
    def positive(self) -> bool:
        return bool(self.lesions)


def run_pipeline(
    predictors: list,
    volume: VolumeImage,
    config: InferenceConfig,
    calibration: CalibrationMap | None = None,
) -> PipelineOutput:
    """Full per-case pipeline over one or more predictors.

    Each predictor is a callable volume -> probability grid. The case score
    is the highest lesion confidence; when no component survives filtering,
    the map's maximum voxel probability (through the same calibration) keeps
    negatives rankable.
    """
    started = time.perf_counter()
    maps = []
    for predictor in predictors:
        if config.tta == "flips":
            maps.append(apply_tta(predictor, volume))
        else:
            pred = np.asarray(predictor(volume), dtype=np.float64)
            if pred.shape != volume.shape:
                raise ShapeMismatch(
                    f"predictor returned {pred.shape}, expected {volume.shape}"
                )
            maps.append(pred)
    combined = ensemble_combine(maps, config.ensemble, config.ensemble_weights,
                                config.threshold)
    mask, components = binarize_and_filter(
        combined, config.threshold, config.min_component_volume_mm3, volume.spacing
    )
    lesions = []
    for component_id, (indices, volume_ml) in enumerate(components, start=1):
        conf = lesion_confidence(combined, indices, calibration)
        lesions.append(Lesion(
            component_id=component_id,
            voxel_indices=indices,
            volume_ml=volume_ml,
            confidence=conf,
        ))
    if lesions:
        case_score = max(l.confidence for l in lesions)
    else:
        top = float(combined.max())
        if calibration is not None and not calibration.is_identity:
            top = float(calibration.apply(top))
        case_score = top
    total_ml = sum(l.volume_ml for l in lesions)
    wall_ms = (time.perf_counter() - started) * 1000.0
    return PipelineOutput(
        prob_map=combined,
        mask=mask,
        lesions=lesions,
        case_score=case_score,
        total_volume_ml=total_ml,
        wall_time_ms=wall_ms,
    )
