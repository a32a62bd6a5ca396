# tests/test_datasets.py

import json
import random
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from conftest import descriptor, make_records
from iqa_forge.datasets import (
    KNOWN_DATASETS,
    DatasetDescriptor,
    ImageRecord,
    SplitPlan,
    SplitPolicy,
    aggregate_mos,
    harmonize_records,
    load_descriptors,
    load_manifest,
    load_ratings,
    load_split_plan,
    make_splits,
    merge_domains,
    mos_histogram,
    rescale_mos,
    verify_no_leakage,
    write_descriptors,
    write_manifest,
    write_ratings,
    write_split_plan,
)
from iqa_forge.utils.enhanced_errors import (
    DuplicateId,
    EmptyRatings,
    InfeasiblePolicy,
    IoError,
    ManifestFormatError,
    MissingDescriptor,
    ValidationError,
    ValueOutsideNativeRange,
)


def _plan_fixture(records, policies):
    descriptors = {name: descriptor(name, policy) for name, policy in policies.items()}
    return descriptors, make_splits(records, descriptors, n_repetitions=5, seed=3)


class TestScores:
    def test_aggregate_mos(self):
        assert aggregate_mos([4, 6]) == 5.0
        assert aggregate_mos([7] * 40) == 7.0
        with pytest.raises(EmptyRatings):
            aggregate_mos([])

    @pytest.mark.parametrize("value,native,expected", [
        (5, KNOWN_DATASETS["KonIQ-10k"].native_range, 10.0),
        (50, KNOWN_DATASETS["SPAQ"].native_range, 5.5),
        (0, KNOWN_DATASETS["GFIQA-20k"].native_range, 1.0),
    ])
    def test_rescale_examples(self, value, native, expected):
        assert rescale_mos(value, native) == pytest.approx(expected)

    def test_rescale_is_order_preserving(self):
        values = np.sort(np.random.default_rng(0).uniform(0, 100, size=200))
        rescaled = [rescale_mos(v, (0, 100)) for v in values]
        assert all(a <= b for a, b in zip(rescaled, rescaled[1:]))
        assert 1.0 <= min(rescaled) and max(rescaled) <= 10.0

    def test_rescale_out_of_range(self):
        with pytest.raises(ValueOutsideNativeRange):
            rescale_mos(5.5, (1, 5))

    def test_record_rejects_ratings_off_scale(self):
        with pytest.raises(ValidationError):
            ImageRecord(id="a", subject_id="a", path="a.png", source="s", raw_ratings=[3, 11])


class TestDescriptors:
    def test_invalid_range(self):
        with pytest.raises(ValidationError) as excinfo:
            DatasetDescriptor("bad", (5, 1))
        assert excinfo.value.code == "DATASET_INVALID_DESCRIPTOR"

    def test_known_roles(self):
        assert KNOWN_DATASETS["LIVE-ItW"].split_policy is SplitPolicy.TEST_ONLY
        assert KNOWN_DATASETS["BIQ2021"].split_policy is SplitPolicy.TRAIN_VAL_ONLY

    def test_file_entries_extend_registry(self, tmp_path):
        path = tmp_path / "descriptors.json"
        write_descriptors([descriptor("derm", SplitPolicy.TEST_ONLY)], path)
        loaded = load_descriptors([path])
        assert loaded["derm"].split_policy is SplitPolicy.TEST_ONLY
        assert "KonIQ-10k" in loaded

    def test_bad_json(self, tmp_path):
        path = tmp_path / "descriptors.json"
        path.write_text("[{")
        with pytest.raises(ValidationError):
            load_descriptors([path])


class TestHarmonize:
    def test_ratings_win_over_mos(self):
        records = [replace(r, native_range=None, mos=3.0) for r in make_records("derm", 2)]
        out = harmonize_records(records, {"derm": descriptor("derm")}, ratings={records[0].id: [8, 10]})
        assert out[0].mos == 9.0
        assert out[0].raw_ratings == [8, 10]
        assert out[1].mos == 3.0
        assert all(r.native_range == (1.0, 10.0) for r in out)

    def test_native_range_is_mapped(self):
        record = ImageRecord(id="k1", subject_id="k1", path="k1.png", source="KonIQ-10k", mos=3.0)
        out = harmonize_records([record], KNOWN_DATASETS)
        assert out[0].mos == pytest.approx(5.5)

    def test_missing_descriptor(self):
        with pytest.raises(MissingDescriptor):
            harmonize_records(make_records("nowhere", 1), KNOWN_DATASETS)

    def test_no_scores(self):
        records = [replace(r, mos=None) for r in make_records("derm", 1)]
        with pytest.raises(EmptyRatings):
            harmonize_records(records, {"derm": descriptor("derm")})


class TestSplits:
    def test_subject_grouping_over_all_repetitions(self):
        records = make_records("derm", 100, views=19)
        descriptors, plan = _plan_fixture(records, {"derm": SplitPolicy.FULL})
        for repetition in range(5):
            by_subject = {}
            for record in records:
                by_subject.setdefault(record.subject_key, set()).update(
                    plan.partition_of(repetition, record.subject_key))
            assert all(len(parts) == 1 for parts in by_subject.values())

    def test_ratio_tolerance(self):
        records = make_records("derm", 57)
        _, plan = _plan_fixture(records, {"derm": SplitPolicy.FULL})
        for partitions in plan.partitions:
            sizes = {name: len(keys) for name, keys in partitions.items()}
            assert sum(sizes.values()) == 57
            for name, ratio in zip(("train", "val", "test"), (0.70, 0.15, 0.15)):
                assert abs(sizes[name] - 57 * ratio) <= 1

    def test_policies(self):
        records = make_records("wild", 10) + make_records("biq", 10) + make_records("derm", 10)
        _, plan = _plan_fixture(records, {"wild": SplitPolicy.TEST_ONLY, "biq": SplitPolicy.TRAIN_VAL_ONLY,
                                          "derm": SplitPolicy.FULL})
        for repetition in range(5):
            assert len(plan.select(records, repetition, "test", sources=["wild"])) == 10
            assert plan.select(records, repetition, "test", sources=["biq"]) == []
            assert plan.select(records, repetition, "train", sources=["derm"])
            assert plan.select(records, repetition, "test", sources=["derm"])

    def test_input_order_does_not_matter(self):
        records = make_records("derm", 30, views=2)
        shuffled = list(records)
        random.Random(4).shuffle(shuffled)
        _, first = _plan_fixture(records, {"derm": SplitPolicy.FULL})
        _, second = _plan_fixture(shuffled, {"derm": SplitPolicy.FULL})
        assert first.partitions == second.partitions

    def test_seed_changes_plan(self):
        records = make_records("derm", 30)
        descriptors = {"derm": descriptor("derm")}
        assert make_splits(records, descriptors, seed=1).partitions != make_splits(records, descriptors, seed=2).partitions
        assert make_splits(records, descriptors, seed=1).partitions == make_splits(records, descriptors, seed=1).partitions

    def test_repetitions_differ(self):
        _, plan = _plan_fixture(make_records("derm", 40), {"derm": SplitPolicy.FULL})
        assert plan.partitions[0]["test"] != plan.partitions[1]["test"]

    def test_infeasible_policy(self):
        with pytest.raises(InfeasiblePolicy):
            _plan_fixture(make_records("derm", 2), {"derm": SplitPolicy.FULL})
        with pytest.raises(InfeasiblePolicy):
            _plan_fixture(make_records("biq", 1), {"biq": SplitPolicy.TRAIN_VAL_ONLY})

    def test_missing_descriptor(self):
        with pytest.raises(MissingDescriptor):
            make_splits(make_records("derm", 5), {})

    def test_bad_ratios(self):
        with pytest.raises(ValidationError):
            make_splits(make_records("derm", 5), {"derm": descriptor("derm")}, ratios=(0.5, 0.5, 0.5))


class TestLeakage:
    def test_generated_plans_are_clean(self):
        records = make_records("wild", 6) + make_records("derm", 20, views=3)
        _, plan = _plan_fixture(records, {"wild": SplitPolicy.TEST_ONLY, "derm": SplitPolicy.FULL})
        assert verify_no_leakage(plan, records) == (True, [])

    def test_planted_leak_is_the_only_violation(self):
        records = make_records("derm", 3)
        keys = sorted(r.subject_key for r in records)
        plan = SplitPlan(n_repetitions=1, seed=0, policies={"derm": SplitPolicy.FULL},
                         partitions=[{"train": {keys[0], keys[1]}, "val": {keys[2]}, "test": {keys[0]}}])
        is_valid, issues = verify_no_leakage(plan, records)
        assert not is_valid
        assert len(issues) == 1
        assert issues[0]["type"] == "subject_leak"
        assert issues[0]["subject_id"] == keys[0]

    def test_duplicate_ids_across_sources(self):
        a = make_records("a", 3)
        b = [replace(r, source="b") for r in a]
        _, plan = _plan_fixture(a + b, {"a": SplitPolicy.FULL, "b": SplitPolicy.FULL})
        _, issues = verify_no_leakage(plan, a + b)
        assert Counter(i["type"] for i in issues) == Counter({"duplicate_id": 3})

    def test_policy_breach_and_unassigned(self):
        records = make_records("wild", 2)
        keys = sorted(r.subject_key for r in records)
        plan = SplitPlan(n_repetitions=1, seed=0, policies={"wild": SplitPolicy.TEST_ONLY},
                         partitions=[{"train": {keys[0]}, "val": set(), "test": set()}])
        _, issues = verify_no_leakage(plan, records)
        assert sorted(i["type"] for i in issues) == ["policy_breach", "unassigned_subject"]


class TestMerge:
    def test_two_datasets(self):
        merged = merge_domains([(descriptor("a"), make_records("a", 10)), (descriptor("b"), make_records("b", 10))])
        assert len(merged) == 20
        assert Counter(r.source for r in merged) == {"a": 10, "b": 10}
        assert all(1.0 <= r.mos <= 10.0 for r in merged)
        assert all(r.id.startswith(f"{r.source}/") for r in merged)

    def test_single_dataset_is_prefixed_identity(self):
        records = make_records("a", 4)
        merged = merge_domains([(descriptor("a"), records)])
        assert [r.id for r in merged] == [f"a/{r.id}" for r in records]
        assert [r.mos for r in merged] == [r.mos for r in records]
        assert merge_domains([(descriptor("a"), merged)]) == merged

    def test_duplicates_after_prefixing(self):
        records = make_records("a", 2)
        with pytest.raises(DuplicateId) as excinfo:
            merge_domains([(descriptor("a"), records + records[:1])])
        assert excinfo.value.details["duplicates"] == [f"a/{records[0].id}"]

    def test_requires_harmonized_records(self):
        with pytest.raises(ValidationError):
            merge_domains([(descriptor("a"), [replace(r, mos=None) for r in make_records("a", 1)])])


class TestFiles:
    def test_manifest_roundtrip(self, tmp_path):
        records = make_records("derm", 3, views=2)
        records[1] = replace(records[1], family="pixelation", level=2)
        path = tmp_path / "manifest.csv"
        write_manifest(records, path)
        assert load_manifest(path) == records

    def test_bare_pristine_listing(self, tmp_path):
        path = tmp_path / "pristine.csv"
        path.write_text("id,path\nimg1,img1.png\nimg2,sub/img2.png\n")
        records = load_manifest(path)
        assert [r.subject_id for r in records] == ["img1", "img2"]
        assert records[0].source == "pristine"
        assert records[1].path == tmp_path / "sub" / "img2.png"

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,path\nimg1,a.png\nimg1,b.png\n")
        with pytest.raises(DuplicateId) as excinfo:
            load_manifest(path)
        assert excinfo.value.details["duplicates"] == ["img1"]

    def test_missing_column(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,subject_id\nimg1,s\n")
        with pytest.raises(ManifestFormatError):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_manifest(tmp_path / "absent.csv")

    def test_ratings_roundtrip(self, tmp_path):
        path = tmp_path / "ratings.csv"
        write_ratings({"a": [("o1", 4), ("o2", 6)], "b": [("o1", 10)]}, path)
        assert load_ratings(path) == {"a": [4, 6], "b": [10]}

    def test_ratings_off_scale(self, tmp_path):
        path = tmp_path / "ratings.csv"
        path.write_text("image_id,observer_id,rating\na,o1,0\n")
        with pytest.raises(ManifestFormatError):
            load_ratings(path)

    def test_plan_roundtrip(self, tmp_path):
        records = make_records("wild", 4) + make_records("derm", 9)
        _, plan = _plan_fixture(records, {"wild": SplitPolicy.TEST_ONLY, "derm": SplitPolicy.FULL})
        meta_path = write_split_plan(plan, tmp_path / "plan.csv")
        assert json.loads(meta_path.read_text())["seed"] == 3
        loaded = load_split_plan(tmp_path / "plan.csv")
        assert loaded == plan

    def test_plan_repetition_beyond_metadata(self, tmp_path):
        path = tmp_path / "plan.csv"
        path.write_text("repetition,subject_id,partition\n0,a/s1,train\n1,a/s2,val\n2,a/s3,test\n")
        path.with_suffix(".meta.json").write_text(json.dumps({"n_repetitions": 2, "seed": 0, "policies": {}}))
        with pytest.raises(ValidationError) as excinfo:
            load_split_plan(path)
        assert excinfo.value.code == "DATASET_PLAN_REPETITION_RANGE"
        assert excinfo.value.details["line_number"] == 4
        assert excinfo.value.exit_code == 1


def test_mos_histogram_counts_every_scored_record():
    records = make_records("a", 10) + make_records("b", 5, views=2)
    histogram = mos_histogram(records)
    assert list(histogram.columns) == ["source", "bin_low", "bin_high", "count"]
    assert histogram.groupby("source")["count"].sum().to_dict() == {"a": 10, "b": 10}
    assert len(histogram) == 20
