import pytest

from scripts.nas_selection.records import (
    BENCH_RECORD_FIELDS,
    BenchRecord,
    EpochRecord,
    RecordError,
    RunLog,
    accuracies,
)


def _epoch(epoch: int, gap: float | None = 0.0) -> EpochRecord:
    return EpochRecord(epoch, 1.0 / (epoch + 1), 0.5, {"0->2": [0.0, 0.0]}, gap, 0.25 * epoch)


def test_runlog_requires_increasing_epochs():
    log = RunLog()
    log.append(_epoch(0))
    log.append(_epoch(1))
    with pytest.raises(RecordError):
        log.append(_epoch(1))
    assert log.initial.epoch == 0
    assert log.final.epoch == 1


def test_runlog_rejects_changed_alpha_shape():
    log = RunLog([_epoch(0)])
    bad = EpochRecord(1, 0.1, 0.5, {"1->2": [0.0, 0.0]}, None, 0.0)
    with pytest.raises(RecordError):
        log.append(bad)


def test_empty_runlog_has_no_final():
    with pytest.raises(RecordError):
        _ = RunLog().final


def test_runlog_jsonl_round_trip(tmp_path):
    log = RunLog([_epoch(0, None), _epoch(1, 0.125), _epoch(2, 0.25)])
    path = log.to_jsonl(tmp_path / "runlog.jsonl")
    loaded = RunLog.from_jsonl(path)
    assert [r.to_dict() for r in loaded.records] == [r.to_dict() for r in log.records]


def test_runlog_without_wall_time(tmp_path):
    path = RunLog([_epoch(0), _epoch(1)]).to_jsonl(tmp_path / "r.jsonl", include_wall_time=False)
    assert [r.wall_time for r in RunLog.from_jsonl(path).records] == [None, None]


def test_bench_record_statistics_use_population_std():
    record = BenchRecord("g", [0, 1], [0.5, 0.7], [0.4, 0.8], "hash")
    assert record.mean_val == pytest.approx(0.6)
    assert record.std_test == pytest.approx(0.2)
    assert list(record.to_dict()) == BENCH_RECORD_FIELDS


def test_bench_record_length_mismatch():
    with pytest.raises(RecordError):
        BenchRecord("g", [0, 1], [0.5], [0.4, 0.8], "hash")


def test_merge_orders_by_seed():
    merged = BenchRecord.merge(
        [
            BenchRecord("g", [2], [0.2], [0.3], "h", wall_time=1.0),
            BenchRecord("g", [0], [0.6], [0.5], "h", wall_time=2.0),
        ]
    )
    assert merged.seeds == [0, 2]
    assert merged.test_accuracy == [0.5, 0.3]
    assert merged.wall_time == 3.0
    with pytest.raises(RecordError):
        BenchRecord.merge([merged, BenchRecord("other", [1], [0.1], [0.1], "h")])


def test_from_dict_checks_stored_means():
    row = BenchRecord("g", [0, 1], [0.5, 0.7], [0.4, 0.8], "hash").to_dict()
    assert BenchRecord.from_dict(row).mean_test == pytest.approx(0.6)
    row["mean_test"] = 0.9
    with pytest.raises(RecordError):
        BenchRecord.from_dict(row)


def test_accuracies_vector():
    records = [BenchRecord("a", [0], [0.1], [0.2], "h"), BenchRecord("b", [0], [0.1], [0.4], "h")]
    assert accuracies(records).tolist() == [0.2, 0.4]
