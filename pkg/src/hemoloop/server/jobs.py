"""Bounded worker pool for inference jobs.

Jobs for distinct cases run concurrently; a per-case lock serializes repeat
work on the same case. Every committed push enqueues exactly one job, even
when no model is deployed yet (those complete as "skipped").
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor, wait

from ..executor import infer_case
from ..inference import InferenceConfig
from ..registry import Registry


class JobRunner:
    def __init__(self, registry: Registry, max_workers: int = 2):
        self.registry = registry
        self.pool = ThreadPoolExecutor(max_workers=max_workers,
                                       thread_name_prefix="infer")
        self._case_locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self._futures: list = []

    def _case_lock(self, case_id: str) -> threading.Lock:
        with self._guard:
            lock = self._case_locks.get(case_id)
            if lock is None:
                lock = threading.Lock()
                self._case_locks[case_id] = lock
            return lock

    def submit(self, case_id: str) -> dict:
        deployed = self.registry.deployed_model()
        version_id = deployed.version_id if deployed else None
        job = self.registry.enqueue_job(case_id, version_id)
        future = self.pool.submit(self._run, dict(job))
        with self._guard:
            self._futures.append(future)
            self._futures = [f for f in self._futures if not f.done()]
        return job

    def _run(self, job: dict):
        job_id = job["job_id"]
        case_id = job["case_id"]
        version_id = job["model_version"]
        with self._case_lock(case_id):
            if version_id is None:
                self.registry.update_job(job_id, "skipped",
                                         error="no model deployed")
                return
            self.registry.update_job(job_id, "running")
            try:
                version = self.registry.get_model(version_id)
                config = InferenceConfig.from_json(version.inference_config)
                config.model_ids = [version_id]
                _, result = infer_case(self.registry, case_id, config, persist=True)
                self.registry.update_job(job_id, "done",
                                         result_id=result["result_id"])
            except Exception as exc:  # noqa: BLE001 - job must record failure
                self.registry.update_job(job_id, "failed",
                                         error=f"{type(exc).__name__}: {exc}")

    def drain(self, timeout: float | None = None):
        """Block until every submitted job has finished (tests rely on this)."""
        with self._guard:
            futures = list(self._futures)
        wait(futures, timeout=timeout)

    def shutdown(self):
        self.pool.shutdown(wait=True, cancel_futures=False)
