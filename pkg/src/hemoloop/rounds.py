"""The retrain/select/redeploy loop.

A round assembles the cumulative training corpus (training partitions plus
reviewer-corrected cases, corrected masks overriding originals), trains each
candidate from scratch, evaluates every candidate on the frozen hold-out
partition, deploys the best by the configured selection metric, then replays
the online partition through the deployed pipeline to produce the longitudinal
report and refill the review queue.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from . import model as refmodel
from .errors import LeakageDetected, NoCandidates, UnknownPartition
from .executor import infer_case
from .inference import InferenceConfig, run_pipeline
from .metrics import (
    CalibrationMap,
    EvaluationReport,
    CaseOutcome,
    calibrate_threshold,
    dice,
    evaluate_cases,
    export_report,
)
from .model import ClassifierParams, TrainConfig
from .registry import Registry, utc_now

SELECTION_METRICS = ("auc", "f1", "dice", "sens_at_spec")

# One round at a time; candidate training stays deterministic.
_round_lock = threading.Lock()


@dataclass
class CandidateConfig:
    name: str
    train: TrainConfig
    inference: InferenceConfig
    calibrate: bool = False

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "train": self.train.to_json(),
            "inference": self.inference.to_json(),
            "calibrate": self.calibrate,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CandidateConfig":
        return cls(
            name=obj.get("name", "candidate"),
            train=TrainConfig.from_json(obj.get("train", {})),
            inference=InferenceConfig.from_json(obj.get("inference", {})),
            calibrate=obj.get("calibrate", False),
        )


@dataclass
class RoundConfig:
    training_partitions: list[str]
    candidates: list[CandidateConfig]
    selection_metric: str = "auc"
    seed: int = 0
    include_annotations_since: str | None = None
    holdout_partition: str | None = None  # defaults to the unique holdout role
    online_partition: str | None = None

    def __post_init__(self):
        if self.selection_metric not in SELECTION_METRICS:
            raise ValueError(f"selection_metric must be one of {SELECTION_METRICS}")

    def to_json(self) -> dict:
        return {
            "training_partitions": list(self.training_partitions),
            "candidates": [c.to_json() for c in self.candidates],
            "selection_metric": self.selection_metric,
            "seed": self.seed,
            "include_annotations_since": self.include_annotations_since,
            "holdout_partition": self.holdout_partition,
            "online_partition": self.online_partition,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RoundConfig":
        return cls(
            training_partitions=list(obj["training_partitions"]),
            candidates=[CandidateConfig.from_json(c) for c in obj["candidates"]],
            selection_metric=obj.get("selection_metric", "auc"),
            seed=obj.get("seed", 0),
            include_annotations_since=obj.get("include_annotations_since"),
            holdout_partition=obj.get("holdout_partition"),
            online_partition=obj.get("online_partition"),
        )


@dataclass
class HarvestedCase:
    case_id: str
    pool: str  # "positive" or "negative"
    mask_ref: str | None
    annotation_id: str


def harvest_annotations(registry: Registry, since: str | None = None) -> list[HarvestedCase]:
    """Resolve reviewer feedback into training-pool entries, latest per case.

    false_positive sends the case to the negative pool; false_negative and
    boundary_inaccuracy with a corrected mask send it to the positive pool
    under that mask; "correct" (and a mask-less false_negative, which has
    nothing trainable) contributes nothing.
    """
    latest: dict[str, object] = {}
    for ann in registry.list_annotations():
        if since is not None and ann.created_at < since:
            continue
        current = latest.get(ann.case_id)
        if current is None or (ann.created_at, ann.annotation_id) >= (
            current.created_at, current.annotation_id
        ):
            latest[ann.case_id] = ann

    harvested = []
    for case_id in sorted(latest):
        ann = latest[case_id]
        if ann.error_class == "correct":
            continue
        if ann.error_class == "false_positive":
            harvested.append(HarvestedCase(case_id, "negative", None, ann.annotation_id))
        elif ann.corrected_mask_ref is not None:
            harvested.append(HarvestedCase(
                case_id, "positive", ann.corrected_mask_ref, ann.annotation_id
            ))
    return harvested


def _partition_by_role(registry: Registry, role: str, explicit: str | None,
                       required: bool = True):
    if explicit:
        return registry.get_partition(explicit)
    matches = [p for p in registry.list_partitions() if p.role == role]
    if not matches:
        if required:
            raise UnknownPartition(f"no partition with role {role}")
        return None
    if len(matches) > 1:
        raise UnknownPartition(
            f"multiple {role} partitions ({[p.name for p in matches]}); name one explicitly"
        )
    return matches[0]


def build_corpus(registry: Registry, config: RoundConfig):
    """Returns (corpus, annotation_ids, skipped) where corpus maps case_id to
    (label_pool, mask_ref_or_None). Harvested annotations override partition
    ground truth."""
    corpus: dict[str, tuple[str, str | None]] = {}
    skipped: list[str] = []
    for name in config.training_partitions:
        part = registry.get_partition(name)
        if part.role in ("holdout_test", "online_test"):
            raise LeakageDetected(
                f"training partition {name} has role {part.role}"
            )
        for case_id in part.members:
            record = registry.get_case(case_id)
            if record.label == "bleed_positive":
                if record.gt_mask_ref is None:
                    skipped.append(case_id)  # label-only, not trainable
                    continue
                corpus[case_id] = ("positive", record.gt_mask_ref)
            elif record.label == "bleed_negative":
                corpus[case_id] = ("negative", None)
            else:
                skipped.append(case_id)

    harvested = harvest_annotations(registry, config.include_annotations_since)
    annotation_ids = [h.annotation_id for h in harvested]
    for h in harvested:
        corpus[h.case_id] = (
            ("positive", h.mask_ref) if h.pool == "positive" else ("negative", None)
        )
    return corpus, annotation_ids, skipped


def _corpus_training_cases(registry: Registry, corpus: dict):
    cases = []
    for case_id in sorted(corpus):
        pool, mask_ref = corpus[case_id]
        volume = registry.load_volume(case_id)
        if pool == "positive":
            mask = registry.load_mask(mask_ref)
        else:
            mask = np.zeros(volume.shape, dtype=bool)
        cases.append((volume, mask))
    return cases


def evaluate_on_partition(
    registry: Registry,
    params: ClassifierParams,
    inference_config: InferenceConfig,
    partition_name: str,
    model_version: int,
    calibration: CalibrationMap | None = None,
) -> EvaluationReport:
    """Score every labeled partition member through the pipeline (unpersisted)."""
    part = registry.get_partition(partition_name)
    predictor = lambda volume: refmodel.predict(params, volume)
    rows: list[CaseOutcome] = []
    skipped = 0
    case_threshold = inference_config.effective_case_threshold
    ordered = sorted(part.members,
                     key=lambda cid: (registry.get_case(cid).created_at, cid))
    for case_id in ordered:
        record = registry.get_case(case_id)
        if record.label == "unknown":
            skipped += 1
            continue
        volume = registry.load_volume(case_id)
        output = run_pipeline([predictor], volume, inference_config, calibration)
        label = "pos" if record.label == "bleed_positive" else "neg"
        predicted_pos = output.case_score >= case_threshold
        outcome = ("TP" if predicted_pos else "FN") if label == "pos" else \
                  ("FP" if predicted_pos else "TN")
        case_dice = None
        if record.label == "bleed_positive" and record.gt_mask_ref is not None:
            case_dice = dice(output.mask, registry.load_mask(record.gt_mask_ref))
        rows.append(CaseOutcome(case_id=case_id, score=output.case_score,
                                label=label, outcome=outcome, dice=case_dice))
    return evaluate_cases(
        model_version=model_version,
        partition=partition_name,
        rows=rows,
        threshold=case_threshold,
        skipped_unlabeled=skipped,
    )


def report_metric(report: EvaluationReport, name: str) -> float:
    if name == "sens_at_spec":
        best = 0.0
        for fpr, tpr, _ in report.roc_points:
            if fpr <= 0.1 + 1e-12:
                best = max(best, tpr)
        return best
    return report.metric(name)


def run_round(registry: Registry, config: RoundConfig, progress=None) -> dict:
    """Execute one refinement round end to end; returns the RoundOutcome JSON."""
    def emit(stage: str, **extra):
        if progress is not None:
            progress(dict(stage=stage, **extra))

    if not config.candidates:
        raise NoCandidates("round has no candidate configurations")

    with _round_lock:
        round_id = registry.next_round_id()
        holdout = _partition_by_role(registry, "holdout_test", config.holdout_partition)
        online = None
        if config.online_partition != "none":
            online = _partition_by_role(registry, "online_test",
                                        config.online_partition, required=False)

        corpus, annotation_ids, skipped = build_corpus(registry, config)
        leaked = sorted(set(corpus) & set(holdout.members))
        if leaked:
            raise LeakageDetected(
                f"hold-out cases {leaked} found in the training corpus"
            )
        emit("corpus", round_id=round_id, size=len(corpus),
             positives=sum(1 for v in corpus.values() if v[0] == "positive"),
             skipped=skipped)

        training_cases = _corpus_training_cases(registry, corpus)
        corpus_ids = sorted(corpus)

        candidates_out = []
        best = None  # (metric, version_id, report)
        for index, candidate in enumerate(config.candidates):
            train_config = candidate.train
            if train_config.seed == 0:
                train_config = TrainConfig(**{**train_config.to_json(),
                                              "seed": config.seed * 1009 + index + 1})
            emit("training", candidate=candidate.name, cases=len(training_cases))
            params = refmodel.train(training_cases, train_config)

            inference_config = candidate.inference
            calibration = CalibrationMap()
            if candidate.calibrate:
                raw_threshold, _, calibration = _calibrate_on_corpus(
                    registry, params, inference_config, corpus
                )
                cfg = inference_config.to_json()
                # downstream scores pass through the calibration map, so the
                # operating cutoff must live on the same scale
                cfg["case_threshold"] = float(calibration.apply(raw_threshold))
                inference_config = InferenceConfig.from_json(cfg)

            version = registry.register_model(
                kind="reference_classifier",
                params_json=params.to_json(),
                lineage_partitions=list(config.training_partitions),
                lineage_annotations=annotation_ids,
                lineage_cases=corpus_ids,
                inference_config=inference_config.to_json(),
                calibration=calibration if not calibration.is_identity else None,
            )
            emit("trained", candidate=candidate.name, version=version.version_id,
                 final_loss=params.final_loss)

            report = evaluate_on_partition(
                registry, params, inference_config, holdout.name,
                version.version_id,
                calibration if not calibration.is_identity else None,
            )
            registry.attach_holdout_metrics(version.version_id, report)
            metric = report_metric(report, config.selection_metric)
            emit("evaluated", candidate=candidate.name, version=version.version_id,
                 metric=config.selection_metric, value=metric, auc=report.auc)
            candidates_out.append({
                "candidate": candidate.name,
                "version_id": version.version_id,
                "holdout_report": report.to_json(),
                "selection_value": metric,
            })
            if best is None or metric > best[0]:
                best = (metric, version.version_id, report)

        _, selected_id, _ = best
        registry.deploy_model(selected_id)
        deployed_at = utc_now()
        emit("deployed", version=selected_id)

        online_report_json = None
        if online is not None:
            online_report = replay_online(registry, online.name, selected_id)
            online_report_json = online_report.to_json()
            emit("online_replayed", version=selected_id,
                 sens=online_report.sens, auc=online_report.auc)

        outcome = {
            "round_id": round_id,
            "config": config.to_json(),
            "corpus_case_ids": corpus_ids,
            "corpus_pools": {cid: corpus[cid][0] for cid in corpus_ids},
            "corpus_annotation_ids": annotation_ids,
            "skipped_cases": skipped,
            "candidates": candidates_out,
            "selected_version": selected_id,
            "deployed_at": deployed_at,
            "online_report": online_report_json,
        }
        registry.record_round(round_id, outcome)
        _write_round_artifacts(registry, round_id, outcome)
        emit("done", round_id=round_id, selected_version=selected_id)
        return outcome


def _calibrate_on_corpus(registry, params, inference_config, corpus):
    """Fit the operating threshold and confidence map on corpus case scores."""
    predictor = lambda volume: refmodel.predict(params, volume)
    scores, labels = [], []
    for case_id in sorted(corpus):
        pool, _ = corpus[case_id]
        volume = registry.load_volume(case_id)
        output = run_pipeline([predictor], volume, inference_config, None)
        scores.append(output.case_score)
        labels.append("pos" if pool == "positive" else "neg")
    return calibrate_threshold(scores, labels)


def replay_online(registry: Registry, partition_name: str, version_id: int) -> EvaluationReport:
    """Stream the online partition through the deployed pipeline in arrival
    order, persisting results so errors land in the review worklist."""
    part = registry.get_partition(partition_name)
    version = registry.get_model(version_id)
    config = InferenceConfig.from_json(version.inference_config)
    config.model_ids = [version_id]
    rows: list[CaseOutcome] = []
    skipped = 0
    case_threshold = config.effective_case_threshold
    ordered = sorted(part.members,
                     key=lambda cid: (registry.get_case(cid).created_at, cid))
    for case_id in ordered:
        record = registry.get_case(case_id)
        if record.label == "unknown":
            skipped += 1
            continue
        output, _ = infer_case(registry, case_id, config, persist=True)
        label = "pos" if record.label == "bleed_positive" else "neg"
        predicted_pos = output.case_score >= case_threshold
        outcome = ("TP" if predicted_pos else "FN") if label == "pos" else \
                  ("FP" if predicted_pos else "TN")
        case_dice = None
        if record.label == "bleed_positive" and record.gt_mask_ref is not None:
            case_dice = dice(output.mask, registry.load_mask(record.gt_mask_ref))
        rows.append(CaseOutcome(case_id=case_id, score=output.case_score,
                                label=label, outcome=outcome, dice=case_dice))
    return evaluate_cases(
        model_version=version_id,
        partition=partition_name,
        rows=rows,
        threshold=case_threshold,
        skipped_unlabeled=skipped,
    )


def _write_round_artifacts(registry: Registry, round_id: int, outcome: dict):
    round_dir = registry.data_dir / "rounds" / str(round_id)
    round_dir.mkdir(parents=True, exist_ok=True)
    (round_dir / "outcome.json").write_text(json.dumps(outcome, indent=2, sort_keys=True))
    reports = [EvaluationReport.from_json(c["holdout_report"])
               for c in outcome["candidates"]]
    if outcome.get("online_report"):
        reports.append(EvaluationReport.from_json(outcome["online_report"]))
    export_report(reports, "csv", round_dir / "metrics.csv")
    export_report(reports, "svg_roc", round_dir / "roc.svg")
    export_report(reports, "svg_bars", round_dir / "bars.svg")
