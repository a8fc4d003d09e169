"""Service wiring: registry + job pool + the two network listeners, plus the
domain logic behind each API endpoint."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .. import rawio
from ..errors import (
    BadFilter,
    InferencePending,
    NotFound,
    ShapeMismatch,
    UnknownCase,
)
from ..registry import ERROR_CLASSES, Registry, utc_now
from ..rounds import RoundConfig, run_round
from .jobs import JobRunner

DEFAULT_WINDOW = (0.0, 80.0)  # brain window in HU

WORKLIST_STATUSES = ("received", "queued", "running", "pending_review",
                     "annotated", "failed")


def window_to_u8(hu: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map HU to display bytes: floor((hu-lo)/(hi-lo)*255), clipped."""
    scaled = np.floor((np.asarray(hu, dtype=np.float64) - lo) / (hi - lo) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def prob_to_u8(p: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(p, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_rle(flat_mask: np.ndarray) -> list[list[int]]:
    """Runs of set pixels as [start, length] over a flattened slice."""
    flat = np.asarray(flat_mask, dtype=bool).ravel()
    if not flat.any():
        return []
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges[0::2]
    ends = edges[1::2]
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


def decode_rle(runs: list[list[int]], size: int) -> np.ndarray:
    flat = np.zeros(size, dtype=bool)
    previous_end = 0
    for start, length in runs:
        if length < 1 or start < previous_end or start + length > size:
            raise ShapeMismatch(f"bad run ({start}, {length}) for size {size}")
        flat[start:start + length] = True
        previous_end = start + length
    return flat


class Service:
    """Everything one deployment needs: storage, workers, and API logic."""

    def __init__(
        self,
        data_dir: str | Path,
        token: str | None = None,
        ui_dir: str | Path | None = None,
        max_workers: int = 2,
        window: tuple[float, float] = DEFAULT_WINDOW,
    ):
        self.registry = Registry(data_dir)
        self.jobs = JobRunner(self.registry, max_workers=max_workers)
        self.token = token
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.window = window
        self.push_server = None
        self.http_server = None

    # --- lifecycle -----------------------------------------------------------

    def start(self, host: str = "127.0.0.1", push_port: int = 0, http_port: int = 0):
        from .http_api import ApiServer
        from .push import PushServer

        self.push_server = PushServer((host, push_port), self)
        self.push_server.serve_background()
        self.http_server = ApiServer((host, http_port), self)
        self.http_server.serve_background()
        return self

    @property
    def push_address(self):
        return self.push_server.server_address

    @property
    def http_address(self):
        return self.http_server.server_address

    def stop(self):
        if self.push_server:
            self.push_server.shutdown()
            self.push_server.server_close()
        if self.http_server:
            self.http_server.shutdown()
            self.http_server.server_close()
        self.jobs.shutdown()
        self.registry.close()

    # --- push commit ------------------------------------------------------------

    def commit_study(self, volume, slice_count: int, site: str, user: str) -> dict:
        record, _created = self.registry.register_case(
            volume, site_tag=site, pushed_by=user
        )
        receipt = {
            "study_uid": record.study_uid,
            "case_id": record.case_id,
            "slice_count": slice_count,
            "site_tag": site,
            "pushed_by": user,
            "received_at": utc_now(),
        }
        self.registry.record_receipt(receipt)
        self.jobs.submit(record.case_id)
        return receipt

    # --- worklist ----------------------------------------------------------------

    def case_status(self, case_id: str) -> tuple[str, dict | None]:
        result = self.registry.latest_result(case_id)
        if result is not None:
            annotations = self.registry.annotations_for_case(case_id)
            for ann in annotations:
                if ann.result_id == result["result_id"] or (
                    ann.result_id is None and ann.created_at >= result["created_at"]
                ):
                    return "annotated", result
            return "pending_review", result
        jobs = [j for j in self.registry.list_jobs() if j["case_id"] == case_id]
        if jobs:
            status = jobs[-1]["status"]
            if status in ("queued", "running"):
                return status, None
            if status == "failed":
                return "failed", None
        return "received", None

    def worklist(self, status: str | None = None, partition: str | None = None) -> list[dict]:
        if status is not None and status not in WORKLIST_STATUSES:
            raise BadFilter(f"unknown status {status!r}")
        if partition is not None and partition not in {
            p.name for p in self.registry.list_partitions()
        }:
            raise BadFilter(f"unknown partition {partition!r}")
        rows = []
        for record in self.registry.list_cases():
            if partition is not None and partition not in record.partitions:
                continue
            case_status, result = self.case_status(record.case_id)
            if status is not None and case_status != status:
                continue
            rows.append({
                "case_id": record.case_id,
                "study_uid": record.study_uid,
                "site_tag": record.site_tag,
                "pushed_by": record.pushed_by,
                "created_at": record.created_at,
                "label": record.label,
                "partitions": list(record.partitions),
                "status": case_status,
                "case_score": result["case_score"] if result else None,
                "result_id": result["result_id"] if result else None,
                "report_kind": result["report_kind"] if result else None,
                "annotation_count": len(self.registry.annotations_for_case(record.case_id)),
            })
        rows.sort(key=lambda r: (r["created_at"], r["case_id"]), reverse=True)
        return rows

    # --- case bundle ------------------------------------------------------------

    def case_bundle(self, case_id: str) -> dict:
        try:
            record = self.registry.get_case(case_id)
        except UnknownCase:
            raise NotFound(f"no case {case_id}")
        result = self.registry.latest_result(case_id)
        if result is None:
            raise InferencePending(f"case {case_id} has no completed inference")

        volume = self.registry.load_volume(case_id)
        prob, _, _ = rawio.read_grid(self.registry.data_dir / result["prob_ref"])
        mask = self.registry.load_mask(result["mask_ref"])
        lo, hi = self.window
        nx, ny, nz = volume.shape

        slices = []
        heatmap = []
        mask_rle = []
        for k in range(nz):
            gray = window_to_u8(volume.voxels[:, :, k].T, lo, hi)
            heat = prob_to_u8(prob[:, :, k].T)
            slices.append(base64.b64encode(gray.tobytes()).decode("ascii"))
            heatmap.append(base64.b64encode(heat.tobytes()).decode("ascii"))
            mask_rle.append(encode_rle(mask[:, :, k].T))

        return {
            "case_id": record.case_id,
            "study_uid": record.study_uid,
            "label": record.label,
            "rows": ny,
            "cols": nx,
            "n_slices": nz,
            "spacing": list(volume.spacing),
            "window": [lo, hi],
            "slices": slices,
            "heatmap": heatmap,
            "mask_rle": mask_rle,
            "lesions": result["lesions"],
            "case_score": result["case_score"],
            "total_volume_ml": result["total_volume_ml"],
            "report": {
                "kind": result["report_kind"],
                "disclaimer": result["disclaimer"],
            },
            "result_id": result["result_id"],
            "model_versions": result["model_versions"],
        }

    # --- annotations -----------------------------------------------------------

    def submit_annotation(self, case_id: str, payload: dict) -> dict:
        error_class = payload.get("error_class")
        if error_class not in ERROR_CLASSES:
            raise BadFilter(f"error_class must be one of {ERROR_CLASSES}")
        corrected = None
        if payload.get("corrected_mask_rle") is not None:
            volume = self.registry.load_volume(case_id)  # raises UnknownCase
            nx, ny, nz = volume.shape
            runs_per_slice = payload["corrected_mask_rle"]
            if len(runs_per_slice) != nz:
                raise ShapeMismatch(
                    f"mask has {len(runs_per_slice)} slices, volume has {nz}"
                )
            corrected = np.zeros((nx, ny, nz), dtype=bool)
            for k, runs in enumerate(runs_per_slice):
                flat = decode_rle(runs, ny * nx)
                corrected[:, :, k] = flat.reshape(ny, nx).T
        annotation = self.registry.add_annotation(
            case_id=case_id,
            error_class=error_class,
            author=payload.get("author", ""),
            result_id=payload.get("result_id"),
            corrected_mask=corrected,
        )
        return {"annotation_id": annotation.annotation_id}

    def case_annotations(self, case_id: str) -> list[dict]:
        """Annotations for one case; stored masks re-encoded as per-slice RLE."""
        self.registry.get_case(case_id)  # raises UnknownCase
        out = []
        for ann in self.registry.annotations_for_case(case_id):
            obj = ann.to_json()
            if ann.corrected_mask_ref is not None:
                mask = self.registry.load_mask(ann.corrected_mask_ref)
                obj["corrected_mask_rle"] = [
                    encode_rle(mask[:, :, k].T) for k in range(mask.shape[2])
                ]
            out.append(obj)
        return out

    # --- models / rounds ---------------------------------------------------------

    def models_json(self) -> list[dict]:
        out = []
        for version in self.registry.list_models():
            obj = version.to_json()
            if obj.get("holdout_metrics"):
                obj["holdout_metrics"] = {
                    k: obj["holdout_metrics"][k]
                    for k in ("model_version", "partition", "dice", "sens", "spec",
                              "auc", "accu", "preci", "f1", "threshold")
                }
            out.append(obj)
        return out

    def run_round_streaming(self, config_json: dict, emit):
        config = RoundConfig.from_json(config_json)
        outcome = run_round(self.registry, config, progress=emit)
        return outcome
