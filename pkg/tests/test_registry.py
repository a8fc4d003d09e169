import numpy as np
import pytest

from hemoloop.errors import (
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
from hemoloop.metrics import evaluate_cases
from hemoloop.registry import Registry

from conftest import make_volume


def small_volume(rng, study="1.2.900", series=None):
    return make_volume(
        rng.uniform(-50, 60, size=(4, 4, 2)),
        study=study,
        series=series or (study + ".1"),
    )


def holdout_report(version=1):
    return evaluate_cases(version, "holdout", scores=[0.9, 0.1],
                          labels=["pos", "neg"], threshold=0.5)


@pytest.fixture
def registry(tmp_path):
    reg = Registry(tmp_path / "data")
    yield reg
    reg.close()


class TestCases:
    def test_register_new_case(self, registry, rng):
        record, created = registry.register_case(small_volume(rng), site_tag="s1")
        assert created
        assert record.case_id == "case-00001"
        assert (registry.data_dir / record.volume_ref).exists()

    def test_reregistration_keeps_case_id(self, registry, rng):
        vol = small_volume(rng)
        first, _ = registry.register_case(vol)
        second, created = registry.register_case(vol)
        assert not created
        assert second.case_id == first.case_id
        assert len(registry.cases) == 1

    def test_labels_write_once(self, registry, rng):
        record, _ = registry.register_case(small_volume(rng))
        registry.set_label(record.case_id, "bleed_positive")
        with pytest.raises(LabelAlreadySet):
            registry.set_label(record.case_id, "bleed_negative")
        registry.set_label(record.case_id, "bleed_positive")  # same value ok

    def test_volume_round_trip(self, registry, rng):
        vol = small_volume(rng)
        record, _ = registry.register_case(vol)
        loaded = registry.load_volume(record.case_id)
        assert np.allclose(loaded.voxels, vol.voxels, atol=1e-3)
        assert loaded.spacing == vol.spacing

    def test_gt_mask_shape_checked(self, registry, rng):
        with pytest.raises(ShapeMismatch):
            registry.register_case(small_volume(rng),
                                   gt_mask=np.zeros((3, 3, 3), dtype=bool))

    def test_unknown_case(self, registry):
        with pytest.raises(UnknownCase):
            registry.get_case("case-99999")


class TestPartitions:
    def _cases(self, registry, rng, n, prefix="1.2.9"):
        ids = []
        for i in range(n):
            record, _ = registry.register_case(small_volume(rng, study=f"{prefix}.{i}"))
            ids.append(record.case_id)
        return ids

    def test_shared_negative_set_allowed(self, registry, rng):
        pos = self._cases(registry, rng, 3, "1.1")
        neg = self._cases(registry, rng, 2, "1.2")
        online_pos = self._cases(registry, rng, 3, "1.3")
        registry.create_partition("negatives", "negative_test", neg)
        registry.create_partition("holdout", "holdout_test", pos + neg)
        part = registry.create_partition("online", "online_test", online_pos + neg)
        assert set(part.members) == set(online_pos + neg)

    def test_train_holdout_overlap_rejected(self, registry, rng):
        ids = self._cases(registry, rng, 2)
        registry.create_partition("holdout", "holdout_test", ids)
        with pytest.raises(OverlapViolation):
            registry.create_partition("train", "train", ids[:1])

    def test_positive_cannot_span_holdout_and_online(self, registry, rng):
        ids = self._cases(registry, rng, 2)
        registry.create_partition("holdout", "holdout_test", ids)
        with pytest.raises(OverlapViolation):
            registry.create_partition("online", "online_test", [ids[0]])

    def test_holdout_frozen_at_creation(self, registry, rng):
        ids = self._cases(registry, rng, 3)
        registry.create_partition("holdout", "holdout_test", ids[:2])
        with pytest.raises(FrozenPartition):
            registry.extend_partition("holdout", [ids[2]])

    def test_extend_unfrozen(self, registry, rng):
        ids = self._cases(registry, rng, 3)
        registry.create_partition("train", "train", ids[:1])
        part = registry.extend_partition("train", ids[1:])
        assert len(part.members) == 3

    def test_unknown_member(self, registry):
        with pytest.raises(UnknownCase):
            registry.create_partition("train", "train", ["case-12345"])


class TestModels:
    def _params(self):
        return {"weights": [0, 0, 0, 0, 0], "bias": 0.0}

    def test_monotonic_version_ids(self, registry):
        ids = [registry.register_model("reference_classifier",
                                       params_json=self._params()).version_id
               for _ in range(3)]
        assert ids == [1, 2, 3]

    def test_deploy_requires_metrics(self, registry):
        version = registry.register_model("reference_classifier",
                                          params_json=self._params())
        with pytest.raises(NoHoldoutMetrics):
            registry.deploy_model(version.version_id)

    def test_single_deployment(self, registry):
        v1 = registry.register_model("reference_classifier", params_json=self._params())
        v2 = registry.register_model("reference_classifier", params_json=self._params())
        registry.attach_holdout_metrics(v1.version_id, holdout_report(1))
        registry.attach_holdout_metrics(v2.version_id, holdout_report(2))
        registry.deploy_model(v1.version_id)
        registry.deploy_model(v2.version_id)
        deployed = [m.version_id for m in registry.list_models() if m.deployed]
        assert deployed == [v2.version_id]

    def test_unknown_version(self, registry):
        with pytest.raises(UnknownVersion):
            registry.deploy_model(404)

    def test_metrics_attach_once(self, registry):
        version = registry.register_model("reference_classifier",
                                          params_json=self._params())
        registry.attach_holdout_metrics(version.version_id, holdout_report())
        with pytest.raises(ImmutableRecord):
            registry.attach_holdout_metrics(version.version_id, holdout_report())

    def test_lineage_partition_must_exist(self, registry):
        with pytest.raises(UnknownPartition):
            registry.register_model("reference_classifier",
                                    params_json=self._params(),
                                    lineage_partitions=["nope"])

    def test_leakage_checked_at_registration(self, registry, rng):
        record, _ = registry.register_case(small_volume(rng))
        registry.create_partition("holdout", "holdout_test", [record.case_id])
        with pytest.raises(LeakageDetected):
            registry.register_model("reference_classifier",
                                    params_json=self._params(),
                                    lineage_cases=[record.case_id])


class TestAnnotations:
    def test_boundary_requires_mask(self, registry, rng):
        record, _ = registry.register_case(small_volume(rng))
        with pytest.raises(ValueError):
            registry.add_annotation(record.case_id, "boundary_inaccuracy")

    def test_mask_shape_mismatch_is_atomic(self, registry, rng):
        record, _ = registry.register_case(small_volume(rng))
        with pytest.raises(ShapeMismatch):
            registry.add_annotation(record.case_id, "boundary_inaccuracy",
                                    corrected_mask=np.zeros((9, 9, 9), dtype=bool))
        assert registry.annotations_for_case(record.case_id) == []

    def test_stored_mask_round_trip(self, registry, rng):
        vol = small_volume(rng)
        record, _ = registry.register_case(vol)
        mask = rng.random(vol.shape) < 0.4
        ann = registry.add_annotation(record.case_id, "boundary_inaccuracy",
                                      corrected_mask=mask, author="dr-a")
        assert np.array_equal(registry.load_mask(ann.corrected_mask_ref), mask)


class TestPersistence:
    def test_replay_reconstructs_state(self, tmp_path, rng):
        data_dir = tmp_path / "data"
        reg = Registry(data_dir)
        record, _ = registry_fixture_ops(reg, rng)
        digest = reg.state_digest()
        reg.close()

        replayed = Registry(data_dir)
        assert replayed.state_digest() == digest
        assert replayed.get_case(record.case_id).label == "bleed_positive"
        replayed.close()

    def test_snapshot_then_tail_replay(self, tmp_path, rng):
        data_dir = tmp_path / "data"
        reg = Registry(data_dir)
        registry_fixture_ops(reg, rng)
        reg.write_snapshot()
        record2, _ = reg.register_case(small_volume(rng, study="7.7.7"))
        digest = reg.state_digest()
        reg.close()

        replayed = Registry(data_dir)
        assert replayed.state_digest() == digest
        assert record2.case_id in replayed.cases
        replayed.close()

    def test_torn_tail_record_is_dropped(self, tmp_path, rng):
        data_dir = tmp_path / "data"
        reg = Registry(data_dir)
        registry_fixture_ops(reg, rng)
        digest = reg.state_digest()
        reg.close()

        log = data_dir / "events.log"
        intact = log.read_bytes()
        log.write_bytes(intact + b"\x40\x00\x00\x00{\"seq\": 99")  # torn write

        recovered = Registry(data_dir)
        assert recovered.state_digest() == digest
        recovered.close()
        assert log.read_bytes() == intact  # tail truncated away

    def test_frozen_partition_stable_across_restart(self, tmp_path, rng):
        data_dir = tmp_path / "data"
        reg = Registry(data_dir)
        record, _ = reg.register_case(small_volume(rng))
        reg.create_partition("holdout", "holdout_test", [record.case_id])
        members = list(reg.get_partition("holdout").members)
        reg.close()
        for _ in range(3):
            reg = Registry(data_dir)
            part = reg.get_partition("holdout")
            assert part.frozen
            assert part.members == members
            reg.close()


def registry_fixture_ops(reg, rng):
    """A representative mutation mix used by the persistence tests."""
    record, _ = reg.register_case(small_volume(rng), site_tag="s1", pushed_by="u1")
    reg.set_label(record.case_id, "bleed_positive")
    other, _ = reg.register_case(small_volume(rng, study="1.2.901"),
                                 label="bleed_negative")
    reg.create_partition("train", "train", [record.case_id])
    version = reg.register_model(
        "reference_classifier",
        params_json={"w": [1, 2, 3]},
        lineage_partitions=["train"],
        lineage_cases=[record.case_id],
    )
    reg.attach_holdout_metrics(version.version_id, holdout_report(version.version_id))
    reg.deploy_model(version.version_id)
    reg.add_annotation(other.case_id, "false_positive", author="dr-b")
    reg.record_receipt({"study_uid": record.study_uid, "case_id": record.case_id,
                        "slice_count": 2, "site_tag": "s1", "pushed_by": "u1",
                        "received_at": "2024-08-15T00:00:00+00:00"})
    job = reg.enqueue_job(record.case_id, version.version_id)
    reg.update_job(job["job_id"], "done", result_id=None)
    return record, version
