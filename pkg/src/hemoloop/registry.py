"""Persistent store for cases, partitions, models, annotations, results and
the audit log.

Persistence is an append-only event log plus periodic snapshots:

    data_dir/
        events.log       length-prefixed (u32 LE) JSON records, each carrying
                         a monotonically increasing "seq"
        snapshots/       full-state JSON dumps named snapshot-<seq>.json
        volumes/         RAWVOL01 float32 HU volumes and probability maps
        masks/           RAWVOL01 uint8 masks (ground truth, results,
                         annotation corrections)
        models/          classifier parameter JSON per registered version
        rounds/          per-round artifacts written by the orchestrator

Recovery loads the newest snapshot and replays the event tail, so replaying
the log from scratch reconstructs the identical state (tests compare state
digests). All mutations are serialized through one lock: single writer,
consistent readers.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import rawio
from .dicomio import VolumeImage
from .errors import (
    FrozenPartition,
    ImmutableRecord,
    LabelAlreadySet,
    LeakageDetected,
    NoHoldoutMetrics,
    OverlapViolation,
    ShapeMismatch,
    UnknownCase,
    UnknownPartition,
    UnknownVersion,
)
from .metrics import CalibrationMap, EvaluationReport

LABELS = ("bleed_positive", "bleed_negative", "unknown")
PARTITION_ROLES = ("train", "holdout_test", "online_test", "negative_test")
MODEL_KINDS = ("reference_classifier", "external_runner")
ERROR_CLASSES = ("false_positive", "false_negative", "boundary_inaccuracy", "correct")

SNAPSHOT_EVERY = 200


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class CaseRecord:
    case_id: str
    study_uid: str
    series_uid: str
    volume_ref: str
    site_tag: str
    pushed_by: str
    label: str
    gt_mask_ref: str | None
    partitions: list[str]
    created_at: str

    def to_json(self) -> dict:
        return dict(self.__dict__, partitions=list(self.partitions))

    @classmethod
    def from_json(cls, obj: dict) -> "CaseRecord":
        return cls(**obj)


@dataclass
class Partition:
    name: str
    role: str
    members: list[str]
    frozen: bool

    def to_json(self) -> dict:
        return dict(self.__dict__, members=list(self.members))

    @classmethod
    def from_json(cls, obj: dict) -> "Partition":
        return cls(**obj)


@dataclass
class ModelVersion:
    version_id: int
    kind: str
    params_ref: str | None
    runner_descriptor: dict | None
    lineage_partitions: list[str]
    lineage_annotations: list[str]
    lineage_cases: list[str]
    inference_config: dict
    calibration: dict | None
    holdout_metrics: dict | None
    deployed: bool
    created_at: str

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelVersion":
        return cls(**obj)


@dataclass
class Annotation:
    annotation_id: str
    case_id: str
    result_id: str | None
    error_class: str
    corrected_mask_ref: str | None
    author: str
    created_at: str

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "Annotation":
        return cls(**obj)


class Registry:
    """Single-node transactional store backed by the event log."""

    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self._lock = threading.RLock()
        for sub in ("snapshots", "volumes", "masks", "models", "rounds"):
            (self.data_dir / sub).mkdir(parents=True, exist_ok=True)
        self._log_path = self.data_dir / "events.log"

        # in-memory state, rebuilt on open
        self.cases: dict[str, CaseRecord] = {}
        self.study_index: dict[str, str] = {}
        self.partitions: dict[str, Partition] = {}
        self.models: dict[int, ModelVersion] = {}
        self.annotations: dict[str, Annotation] = {}
        self.results: dict[str, dict] = {}
        self.receipts: list[dict] = []
        self.jobs: dict[str, dict] = {}
        self.rounds: dict[int, dict] = {}
        self.counters: dict[str, int] = {
            "case": 0, "model": 0, "annotation": 0, "result": 0,
            "job": 0, "round": 0,
        }
        self._seq = 0
        self._events_since_snapshot = 0

        self._recover()
        self._log_file = open(self._log_path, "ab")

    def close(self):
        with self._lock:
            self._log_file.close()

    # --- event plumbing -----------------------------------------------------

    def _recover(self):
        snapshot_seq = 0
        snapshots = sorted(
            (self.data_dir / "snapshots").glob("snapshot-*.json"),
            key=lambda p: int(p.stem.split("-")[1]),
        )
        if snapshots:
            latest = snapshots[-1]
            snapshot_seq = int(latest.stem.split("-")[1])
            self._load_snapshot(json.loads(latest.read_text()))
            self._seq = snapshot_seq
        if self._log_path.exists():
            valid_end = 0
            with open(self._log_path, "rb") as f:
                data = f.read()
            pos = 0
            while pos + 4 <= len(data):
                (length,) = struct.unpack_from("<I", data, pos)
                if pos + 4 + length > len(data):
                    break  # partially written tail record, drop it
                record = json.loads(data[pos + 4:pos + 4 + length])
                pos += 4 + length
                valid_end = pos
                if record["seq"] <= snapshot_seq:
                    continue
                self._apply(record["type"], record["data"])
                self._seq = record["seq"]
            if valid_end < len(data):
                with open(self._log_path, "r+b") as f:
                    f.truncate(valid_end)

    def _emit(self, event_type: str, data: dict):
        """Append one event and apply it to in-memory state."""
        self._seq += 1
        record = {"seq": self._seq, "ts": utc_now(), "type": event_type, "data": data}
        payload = json.dumps(record, sort_keys=True).encode()
        self._log_file.write(struct.pack("<I", len(payload)) + payload)
        self._log_file.flush()
        self._apply(event_type, data)
        self._events_since_snapshot += 1
        if self._events_since_snapshot >= SNAPSHOT_EVERY:
            self.write_snapshot()

    def _apply(self, event_type: str, data: dict):
        handler = getattr(self, f"_apply_{event_type}", None)
        if handler is None:
            raise ValueError(f"unknown event type {event_type!r}")
        handler(data)

    # --- snapshotting ---------------------------------------------------------

    def _state_json(self) -> dict:
        return {
            "cases": {k: v.to_json() for k, v in self.cases.items()},
            "study_index": dict(self.study_index),
            "partitions": {k: v.to_json() for k, v in self.partitions.items()},
            "models": {str(k): v.to_json() for k, v in self.models.items()},
            "annotations": {k: v.to_json() for k, v in self.annotations.items()},
            "results": self.results,
            "receipts": self.receipts,
            "jobs": self.jobs,
            "rounds": {str(k): v for k, v in self.rounds.items()},
            "counters": dict(self.counters),
        }

    def _load_snapshot(self, obj: dict):
        self.cases = {k: CaseRecord.from_json(v) for k, v in obj["cases"].items()}
        self.study_index = dict(obj["study_index"])
        self.partitions = {k: Partition.from_json(v) for k, v in obj["partitions"].items()}
        self.models = {int(k): ModelVersion.from_json(v) for k, v in obj["models"].items()}
        self.annotations = {k: Annotation.from_json(v) for k, v in obj["annotations"].items()}
        self.results = dict(obj["results"])
        self.receipts = list(obj["receipts"])
        self.jobs = dict(obj["jobs"])
        self.rounds = {int(k): v for k, v in obj["rounds"].items()}
        self.counters = dict(obj["counters"])

    def write_snapshot(self):
        with self._lock:
            path = self.data_dir / "snapshots" / f"snapshot-{self._seq}.json"
            path.write_text(json.dumps(self._state_json(), sort_keys=True))
            self._events_since_snapshot = 0

    def state_digest(self, include_history: bool = False) -> str:
        """Hash of the logical registry state plus stored artifact bytes.

        Receipts and the job log are operational history, excluded unless
        include_history is set (re-pushing a study must not change the digest).
        """
        with self._lock:
            state = self._state_json()
            if not include_history:
                state.pop("receipts")
                state.pop("jobs")
                counters = state["counters"]
                counters.pop("job", None)
            blob = json.dumps(state, sort_keys=True).encode()
            digest = hashlib.sha256(blob)
            refs = sorted(
                [c.volume_ref for c in self.cases.values()]
                + [c.gt_mask_ref for c in self.cases.values() if c.gt_mask_ref]
            )
            for ref in refs:
                digest.update(ref.encode())
                digest.update((self.data_dir / ref).read_bytes())
            return digest.hexdigest()

    # --- cases ---------------------------------------------------------------

    def register_case(
        self,
        volume: VolumeImage,
        site_tag: str = "",
        pushed_by: str = "",
        label: str = "unknown",
        gt_mask: np.ndarray | None = None,
    ) -> tuple[CaseRecord, bool]:
        """Create or refresh the case for volume.study_uid.

        Returns (record, created). Re-registration of a known study keeps the
        case_id and overwrites the stored volume (idempotent re-push).
        """
        if label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")
        if gt_mask is not None and np.asarray(gt_mask).shape != volume.shape:
            raise ShapeMismatch("ground-truth mask shape does not match volume")
        with self._lock:
            existing_id = self.study_index.get(volume.study_uid)
            if existing_id is None:
                case_id = f"case-{self.counters['case'] + 1:05d}"
                volume_ref = f"volumes/{case_id}.raw"
                self._write_volume(volume_ref, volume)
                gt_ref = None
                if gt_mask is not None:
                    gt_ref = f"masks/{case_id}_gt.raw"
                    self._write_mask(gt_ref, gt_mask, volume)
                self._emit("case_registered", {
                    "case_id": case_id,
                    "study_uid": volume.study_uid,
                    "series_uid": volume.series_uid,
                    "volume_ref": volume_ref,
                    "site_tag": site_tag,
                    "pushed_by": pushed_by,
                    "label": label,
                    "gt_mask_ref": gt_ref,
                    "created_at": utc_now(),
                })
                return self.cases[case_id], True

            record = self.cases[existing_id]
            self._write_volume(record.volume_ref, volume)
            self._emit("case_volume_updated", {"case_id": existing_id})
            if label != "unknown" and record.label == "unknown":
                self.set_label(existing_id, label)
            elif label != "unknown" and label != record.label:
                raise LabelAlreadySet(
                    f"case {existing_id} already labeled {record.label}"
                )
            if gt_mask is not None:
                gt_ref = record.gt_mask_ref or f"masks/{existing_id}_gt.raw"
                self._write_mask(gt_ref, gt_mask, volume)
                if record.gt_mask_ref is None:
                    self._emit("gt_mask_set", {"case_id": existing_id, "gt_mask_ref": gt_ref})
            return self.cases[existing_id], False

    def _apply_case_registered(self, d: dict):
        record = CaseRecord(
            case_id=d["case_id"],
            study_uid=d["study_uid"],
            series_uid=d["series_uid"],
            volume_ref=d["volume_ref"],
            site_tag=d["site_tag"],
            pushed_by=d["pushed_by"],
            label=d["label"],
            gt_mask_ref=d["gt_mask_ref"],
            partitions=[],
            created_at=d["created_at"],
        )
        self.cases[record.case_id] = record
        self.study_index[record.study_uid] = record.case_id
        self.counters["case"] += 1

    def _apply_case_volume_updated(self, d: dict):
        pass  # artifact bytes already on disk; the event keeps the audit trail

    def _apply_gt_mask_set(self, d: dict):
        self.cases[d["case_id"]].gt_mask_ref = d["gt_mask_ref"]

    def set_label(self, case_id: str, label: str):
        """Labels are write-once: unknown -> known, never known -> different."""
        if label not in LABELS or label == "unknown":
            raise ValueError("label must be bleed_positive or bleed_negative")
        with self._lock:
            record = self._case(case_id)
            if record.label != "unknown":
                if record.label == label:
                    return
                raise LabelAlreadySet(f"case {case_id} already labeled {record.label}")
            self._emit("label_set", {"case_id": case_id, "label": label})

    def _apply_label_set(self, d: dict):
        self.cases[d["case_id"]].label = d["label"]

    def _case(self, case_id: str) -> CaseRecord:
        record = self.cases.get(case_id)
        if record is None:
            raise UnknownCase(f"no case {case_id}")
        return record

    def get_case(self, case_id: str) -> CaseRecord:
        with self._lock:
            return self._case(case_id)

    def list_cases(self) -> list[CaseRecord]:
        with self._lock:
            return sorted(self.cases.values(), key=lambda c: c.case_id)

    def _write_volume(self, ref: str, volume: VolumeImage):
        rawio.write_grid(self.data_dir / ref,
                         np.asarray(volume.voxels, dtype=np.float32),
                         volume.spacing, volume.origin)

    def _write_mask(self, ref: str, mask: np.ndarray, volume: VolumeImage):
        rawio.write_grid(self.data_dir / ref,
                         np.asarray(mask, dtype=np.uint8),
                         volume.spacing, volume.origin)

    def load_volume(self, case_id: str) -> VolumeImage:
        record = self.get_case(case_id)
        grid, spacing, origin = rawio.read_grid(self.data_dir / record.volume_ref)
        return VolumeImage(
            study_uid=record.study_uid,
            series_uid=record.series_uid,
            voxels=grid.astype(np.float64),
            spacing=spacing,
            origin=origin,
        )

    def load_mask(self, ref: str) -> np.ndarray:
        grid, _, _ = rawio.read_grid(self.data_dir / ref)
        return grid.astype(bool)

    def load_gt_mask(self, case_id: str) -> np.ndarray | None:
        record = self.get_case(case_id)
        if record.gt_mask_ref is None:
            return None
        return self.load_mask(record.gt_mask_ref)

    # --- partitions -----------------------------------------------------------

    def create_partition(self, name: str, role: str, case_ids: list[str],
                         frozen: bool = False) -> Partition:
        if role not in PARTITION_ROLES:
            raise ValueError(f"role must be one of {PARTITION_ROLES}")
        with self._lock:
            if name in self.partitions:
                raise OverlapViolation(f"partition {name} already exists")
            for cid in case_ids:
                self._case(cid)
            if role == "holdout_test":
                frozen = True  # the final-evaluation set is immutable by design
            self._check_partition_overlap(name, role, case_ids)
            self._emit("partition_created", {
                "name": name, "role": role, "members": list(case_ids),
                "frozen": bool(frozen),
            })
            return self.partitions[name]

    def extend_partition(self, name: str, case_ids: list[str]) -> Partition:
        with self._lock:
            part = self.partitions.get(name)
            if part is None:
                raise UnknownPartition(f"no partition {name}")
            if part.frozen:
                raise FrozenPartition(f"partition {name} is frozen")
            for cid in case_ids:
                self._case(cid)
            added = [c for c in case_ids if c not in part.members]
            self._check_partition_overlap(name, part.role, added)
            self._emit("partition_extended", {"name": name, "added": added})
            return self.partitions[name]

    def _check_partition_overlap(self, name: str, role: str, case_ids: list[str]):
        """Cross-partition membership is only for the shared negative set."""
        for cid in set(case_ids):
            for other in self.partitions.values():
                if other.name == name or cid not in other.members:
                    continue
                pair = {role, other.role}
                if pair in ({"train", "holdout_test"}, {"train", "online_test"}):
                    raise OverlapViolation(
                        f"case {cid} cannot be in both {other.role} and {role}"
                    )
                if "negative_test" not in pair:
                    negative_member = any(
                        p.role == "negative_test" and cid in p.members
                        for p in self.partitions.values()
                    )
                    if not negative_member:
                        raise OverlapViolation(
                            f"case {cid} may only span partitions via the shared "
                            f"negative set (already in {other.name})"
                        )

    def _apply_partition_created(self, d: dict):
        part = Partition(name=d["name"], role=d["role"],
                         members=list(d["members"]), frozen=d["frozen"])
        self.partitions[part.name] = part
        for cid in part.members:
            case = self.cases.get(cid)
            if case is not None and part.name not in case.partitions:
                case.partitions.append(part.name)

    def _apply_partition_extended(self, d: dict):
        part = self.partitions[d["name"]]
        for cid in d["added"]:
            if cid not in part.members:
                part.members.append(cid)
            case = self.cases.get(cid)
            if case is not None and part.name not in case.partitions:
                case.partitions.append(part.name)

    def get_partition(self, name: str) -> Partition:
        with self._lock:
            part = self.partitions.get(name)
            if part is None:
                raise UnknownPartition(f"no partition {name}")
            return part

    def list_partitions(self) -> list[Partition]:
        with self._lock:
            return sorted(self.partitions.values(), key=lambda p: p.name)

    # --- models ----------------------------------------------------------------

    def register_model(
        self,
        kind: str,
        params_json: dict | None = None,
        runner_descriptor: dict | None = None,
        lineage_partitions: list[str] | None = None,
        lineage_annotations: list[str] | None = None,
        lineage_cases: list[str] | None = None,
        inference_config: dict | None = None,
        calibration: CalibrationMap | None = None,
    ) -> ModelVersion:
        if kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}")
        if kind == "reference_classifier" and params_json is None:
            raise ValueError("reference_classifier requires params_json")
        if kind == "external_runner" and runner_descriptor is None:
            raise ValueError("external_runner requires runner_descriptor")
        lineage_partitions = lineage_partitions or []
        with self._lock:
            for pname in lineage_partitions:
                if pname not in self.partitions:
                    raise UnknownPartition(f"lineage names unknown partition {pname}")
            # machine-checked no-leakage invariant: training lineage never
            # touches a hold-out member
            holdout_members = set()
            for part in self.partitions.values():
                if part.role == "holdout_test":
                    holdout_members.update(part.members)
            leaked = holdout_members & set(lineage_cases or [])
            if leaked:
                raise LeakageDetected(
                    f"lineage contains hold-out cases {sorted(leaked)}"
                )
            version_id = self.counters["model"] + 1
            params_ref = None
            if params_json is not None:
                params_ref = f"models/version-{version_id:04d}.json"
                (self.data_dir / params_ref).write_text(
                    json.dumps(params_json, sort_keys=True)
                )
            self._emit("model_registered", {
                "version_id": version_id,
                "kind": kind,
                "params_ref": params_ref,
                "runner_descriptor": runner_descriptor,
                "lineage_partitions": list(lineage_partitions),
                "lineage_annotations": list(lineage_annotations or []),
                "lineage_cases": list(lineage_cases or []),
                "inference_config": inference_config or {},
                "calibration": calibration.to_json() if calibration else None,
                "created_at": utc_now(),
            })
            return self.models[version_id]

    def _apply_model_registered(self, d: dict):
        version = ModelVersion(
            version_id=d["version_id"],
            kind=d["kind"],
            params_ref=d["params_ref"],
            runner_descriptor=d["runner_descriptor"],
            lineage_partitions=d["lineage_partitions"],
            lineage_annotations=d["lineage_annotations"],
            lineage_cases=d["lineage_cases"],
            inference_config=d["inference_config"],
            calibration=d["calibration"],
            holdout_metrics=None,
            deployed=False,
            created_at=d["created_at"],
        )
        self.models[version.version_id] = version
        self.counters["model"] = max(self.counters["model"], version.version_id)

    def _model(self, version_id: int) -> ModelVersion:
        version = self.models.get(version_id)
        if version is None:
            raise UnknownVersion(f"no model version {version_id}")
        return version

    def get_model(self, version_id: int) -> ModelVersion:
        with self._lock:
            return self._model(version_id)

    def list_models(self) -> list[ModelVersion]:
        with self._lock:
            return [self.models[k] for k in sorted(self.models)]

    def deployed_model(self) -> ModelVersion | None:
        with self._lock:
            for version in self.models.values():
                if version.deployed:
                    return version
            return None

    def attach_holdout_metrics(self, version_id: int, report: EvaluationReport):
        with self._lock:
            version = self._model(version_id)
            if version.holdout_metrics is not None:
                raise ImmutableRecord(
                    f"version {version_id} already has hold-out metrics"
                )
            self._emit("holdout_metrics_attached", {
                "version_id": version_id, "report": report.to_json(),
            })

    def _apply_holdout_metrics_attached(self, d: dict):
        self.models[d["version_id"]].holdout_metrics = d["report"]

    def deploy_model(self, version_id: int):
        """Atomically moves the deployed flag; requires hold-out metrics."""
        with self._lock:
            version = self._model(version_id)
            if version.holdout_metrics is None:
                raise NoHoldoutMetrics(
                    f"version {version_id} has no hold-out evaluation attached"
                )
            self._emit("model_deployed", {"version_id": version_id})

    def _apply_model_deployed(self, d: dict):
        for version in self.models.values():
            version.deployed = version.version_id == d["version_id"]

    def load_params_json(self, version: ModelVersion) -> dict:
        return json.loads((self.data_dir / version.params_ref).read_text())

    # --- annotations -----------------------------------------------------------

    def add_annotation(
        self,
        case_id: str,
        error_class: str,
        author: str = "",
        result_id: str | None = None,
        corrected_mask: np.ndarray | None = None,
    ) -> Annotation:
        if error_class not in ERROR_CLASSES:
            raise ValueError(f"error_class must be one of {ERROR_CLASSES}")
        with self._lock:
            record = self._case(case_id)
            if error_class == "boundary_inaccuracy" and corrected_mask is None:
                raise ValueError("boundary_inaccuracy requires a corrected mask")
            mask_ref = None
            if corrected_mask is not None:
                volume = self.load_volume(case_id)
                corrected_mask = np.asarray(corrected_mask, dtype=bool)
                if corrected_mask.shape != volume.shape:
                    raise ShapeMismatch(
                        f"corrected mask {corrected_mask.shape} does not match "
                        f"volume {volume.shape}"
                    )
                annotation_id = f"ann-{self.counters['annotation'] + 1:05d}"
                mask_ref = f"masks/{annotation_id}.raw"
                self._write_mask(mask_ref, corrected_mask, volume)
            else:
                annotation_id = f"ann-{self.counters['annotation'] + 1:05d}"
            self._emit("annotation_added", {
                "annotation_id": annotation_id,
                "case_id": record.case_id,
                "result_id": result_id,
                "error_class": error_class,
                "corrected_mask_ref": mask_ref,
                "author": author,
                "created_at": utc_now(),
            })
            return self.annotations[annotation_id]

    def _apply_annotation_added(self, d: dict):
        annotation = Annotation(
            annotation_id=d["annotation_id"],
            case_id=d["case_id"],
            result_id=d["result_id"],
            error_class=d["error_class"],
            corrected_mask_ref=d["corrected_mask_ref"],
            author=d["author"],
            created_at=d["created_at"],
        )
        self.annotations[annotation.annotation_id] = annotation
        self.counters["annotation"] += 1

    def annotations_for_case(self, case_id: str) -> list[Annotation]:
        with self._lock:
            return sorted(
                (a for a in self.annotations.values() if a.case_id == case_id),
                key=lambda a: a.annotation_id,
            )

    def list_annotations(self) -> list[Annotation]:
        with self._lock:
            return [self.annotations[k] for k in sorted(self.annotations)]

    # --- results and jobs ---------------------------------------------------------

    def record_result(
        self,
        case_id: str,
        model_versions: list[int],
        config: dict,
        prob_map: np.ndarray,
        mask: np.ndarray,
        lesions: list[dict],
        case_score: float,
        total_volume_ml: float,
        wall_time_ms: float,
        report_kind: str,
        disclaimer: str,
    ) -> dict:
        with self._lock:
            record = self._case(case_id)
            result_id = f"res-{self.counters['result'] + 1:06d}"
            volume = self.load_volume(case_id)
            prob_ref = f"volumes/{result_id}_prob.raw"
            mask_ref = f"masks/{result_id}_mask.raw"
            rawio.write_grid(self.data_dir / prob_ref,
                             np.asarray(prob_map, dtype=np.float32),
                             volume.spacing, volume.origin)
            self._write_mask(mask_ref, mask, volume)
            self._emit("result_recorded", {
                "result_id": result_id,
                "case_id": record.case_id,
                "model_versions": list(model_versions),
                "config": config,
                "prob_ref": prob_ref,
                "mask_ref": mask_ref,
                "lesions": lesions,
                "case_score": case_score,
                "total_volume_ml": total_volume_ml,
                "wall_time_ms": wall_time_ms,
                "report_kind": report_kind,
                "disclaimer": disclaimer,
                "created_at": utc_now(),
            })
            return self.results[result_id]

    def _apply_result_recorded(self, d: dict):
        self.results[d["result_id"]] = dict(d)
        self.counters["result"] += 1

    def results_for_case(self, case_id: str) -> list[dict]:
        with self._lock:
            return sorted(
                (r for r in self.results.values() if r["case_id"] == case_id),
                key=lambda r: r["result_id"],
            )

    def latest_result(self, case_id: str) -> dict | None:
        results = self.results_for_case(case_id)
        return results[-1] if results else None

    def record_receipt(self, receipt: dict):
        with self._lock:
            self._emit("receipt_recorded", dict(receipt))

    def _apply_receipt_recorded(self, d: dict):
        self.receipts.append(dict(d))

    def enqueue_job(self, case_id: str, model_version: int | None) -> dict:
        with self._lock:
            self._case(case_id)
            job_id = f"job-{self.counters['job'] + 1:06d}"
            self._emit("job_enqueued", {
                "job_id": job_id,
                "case_id": case_id,
                "model_version": model_version,
                "status": "queued",
                "created_at": utc_now(),
            })
            return self.jobs[job_id]

    def _apply_job_enqueued(self, d: dict):
        job = dict(d)
        job.setdefault("error", None)
        job.setdefault("result_id", None)
        job.setdefault("finished_at", None)
        self.jobs[job["job_id"]] = job
        self.counters["job"] += 1

    def update_job(self, job_id: str, status: str, error: str | None = None,
                   result_id: str | None = None):
        with self._lock:
            if job_id not in self.jobs:
                raise UnknownCase(f"no job {job_id}")
            self._emit("job_updated", {
                "job_id": job_id,
                "status": status,
                "error": error,
                "result_id": result_id,
                "finished_at": utc_now(),
            })

    def _apply_job_updated(self, d: dict):
        job = self.jobs[d["job_id"]]
        job["status"] = d["status"]
        job["error"] = d["error"]
        job["result_id"] = d["result_id"]
        job["finished_at"] = d["finished_at"]

    def list_jobs(self) -> list[dict]:
        with self._lock:
            return [dict(self.jobs[k]) for k in sorted(self.jobs)]

    # --- rounds ----------------------------------------------------------------

    def next_round_id(self) -> int:
        with self._lock:
            return self.counters["round"] + 1

    def record_round(self, round_id: int, outcome: dict):
        with self._lock:
            self._emit("round_recorded", {"round_id": round_id, "outcome": outcome})

    def _apply_round_recorded(self, d: dict):
        self.rounds[d["round_id"]] = d["outcome"]
        self.counters["round"] = max(self.counters["round"], d["round_id"])

    def get_round(self, round_id: int) -> dict | None:
        with self._lock:
            return self.rounds.get(round_id)

    def calibration_for(self, version: ModelVersion) -> CalibrationMap:
        return CalibrationMap.from_json(version.calibration)
