"""Trial log serialization, structural validation, canonical bytes."""

import json

import numpy as np
import pytest

from bellbet.core import Setting, TrialRecord
from bellbet.logfile import (
    LogFormatError,
    LogHeader,
    TrialLog,
    load_log,
    read_raw_log,
    validate_raw_records,
)


def make_header(n=4, seed=9):
    return LogHeader(
        config_hash="ab" * 32,
        seed=seed,
        mode="sequential",
        angles=(0.1, 0.2, 0.3, 0.4),
        n=n,
        critical_value=2,
    )


def small_log():
    log = TrialLog(make_header())
    for m, (i, j, x, y) in enumerate([(1, 2, 1, 1), (2, 1, 0, 1), (1, 1, 0, 0), (2, 2, 1, 0)], 1):
        log.append(TrialRecord(m=m, setting=Setting(i, j), x=x, y=y))
    return log


class TestRoundTrip:
    def test_write_read(self, tmp_path):
        log = small_log()
        path = tmp_path / "trial.log"
        log.write(path)
        loaded = load_log(path)
        assert loaded.to_bytes() == log.to_bytes()
        assert loaded.header == log.header
        assert [r for r in loaded.records()] == [r for r in log.records()]

    def test_canonical_bytes_are_stable(self):
        assert small_log().to_bytes() == small_log().to_bytes()
        first_line = small_log().to_bytes().decode().splitlines()[1]
        assert first_line == '{"i":1,"j":2,"m":1,"x":1,"y":1}'

    def test_append_enforces_sequence(self):
        log = TrialLog(make_header())
        log.append(TrialRecord(m=1, setting=Setting(1, 1), x=0, y=0))
        with pytest.raises(ValueError):
            log.append(TrialRecord(m=3, setting=Setting(1, 1), x=0, y=0))

    def test_from_columns_validates(self):
        header = make_header(n=3)
        good = TrialLog.from_columns(
            header,
            np.array([1, 2, 1]),
            np.array([2, 1, 1]),
            np.array([0, 1, 0]),
            np.array([0, 1, 1]),
        )
        assert len(good) == 3
        with pytest.raises(ValueError):
            TrialLog.from_columns(
                header,
                np.array([1, 2, 3]),
                np.array([2, 1, 1]),
                np.array([0, 1, 0]),
                np.array([0, 1, 1]),
            )


class TestValidation:
    def _raw(self, log):
        lines = log.to_bytes().decode().splitlines()
        header = json.loads(lines[0])
        return header, [json.loads(line) for line in lines[1:]]

    def test_clean_log_passes(self):
        header, records = read_raw_records_from(small_log())
        result = validate_raw_records(small_log().header, records)
        assert result.ok

    def test_non_bit_outcome_fails(self):
        _, records = read_raw_records_from(small_log())
        records[2]["x"] = 2.3
        result = validate_raw_records(small_log().header, records)
        assert not result.ok
        assert any("not a bit" in v for v in result.violations)

    def test_missing_field_fails(self):
        _, records = read_raw_records_from(small_log())
        del records[1]["y"]
        result = validate_raw_records(small_log().header, records)
        assert not result.ok
        assert any("missing" in v for v in result.violations)

    def test_gap_in_sequence_fails(self):
        _, records = read_raw_records_from(small_log())
        records = [records[0], records[2], records[3]]
        result = validate_raw_records(small_log().header, records)
        assert not result.ok

    def test_incomplete_log_fails(self):
        _, records = read_raw_records_from(small_log())
        result = validate_raw_records(small_log().header, records[:2])
        assert not result.ok
        assert any("incomplete" in v for v in result.violations)

    def test_reordered_trials_fail(self):
        # Swapped records violate the strictly increasing sequence invariant.
        _, records = read_raw_records_from(small_log())
        records[1], records[2] = records[2], records[1]
        result = validate_raw_records(small_log().header, records)
        assert not result.ok
        assert any("sequence" in v for v in result.violations)

    def test_unknown_fields_flagged(self):
        _, records = read_raw_records_from(small_log())
        records[0]["note"] = "tampered"
        result = validate_raw_records(small_log().header, records)
        assert not result.ok


class TestFileErrors:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.log"
        path.write_text("")
        with pytest.raises(LogFormatError):
            read_raw_log(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "headless.log"
        path.write_text('{"m":1,"i":1,"j":1,"x":0,"y":0}\n')
        with pytest.raises(LogFormatError):
            read_raw_log(path)

    def test_truncated_load_rejected(self, tmp_path):
        log = small_log()
        path = tmp_path / "truncated.log"
        lines = log.to_bytes().decode().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(LogFormatError):
            load_log(path)


def read_raw_records_from(log):
    lines = log.to_bytes().decode().splitlines()
    return json.loads(lines[0]), [json.loads(line) for line in lines[1:]]
