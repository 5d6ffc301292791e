import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import masked_rmse_oracle
from soma.errors import DegenerateInputError, ValidationError
from soma.metrics import (
    EvalRecord,
    cmr,
    make_record,
    pair_error,
    quadrant_errors,
    r_avg,
    report,
)


def records_from(errors):
    return [EvalRecord(pair_id=f"p{i}", error=float(e),
                       quadrant_errors=(float(e),) * 4)
            for i, e in enumerate(errors)]


class TestPairError:
    def test_perfect_prediction_is_zero(self):
        f = torch.randn(16, 16, 2)
        assert pair_error(f, f) == 0.0

    def test_constant_offset_is_euclidean(self):
        gt = torch.zeros(8, 8, 2)
        pred = torch.tensor([3.0, 4.0]).expand(8, 8, 2)
        assert abs(pair_error(pred, gt) - 5.0) < 1e-12

    def test_masked_error_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.normal(size=(9, 7, 2))
            b = rng.normal(size=(9, 7, 2))
            mask = rng.uniform(size=(9, 7)) > 0.4
            if not mask.any():
                mask[0, 0] = True
            got = pair_error(torch.from_numpy(a), torch.from_numpy(b),
                             torch.from_numpy(mask))
            assert abs(got - masked_rmse_oracle(a, b, mask)) < 1e-7

    def test_empty_mask_is_degenerate(self):
        f = torch.zeros(4, 4, 2)
        with pytest.raises(DegenerateInputError):
            pair_error(f, f, torch.zeros(4, 4, dtype=torch.bool))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            pair_error(torch.zeros(4, 4, 2), torch.zeros(5, 5, 2))

    def test_quadrants_cover_the_field(self):
        gt = torch.zeros(8, 8, 2)
        pred = torch.zeros(8, 8, 2)
        pred[:4, :4] = 2.0                   # only the top-left quadrant is off
        q = quadrant_errors(pred, gt)
        assert q[0] > 0 and q[1] == q[2] == q[3] == 0.0


class TestCmr:
    def test_worked_example(self):
        recs = records_from([0.5, 1.5, 2.5])
        assert cmr(recs, 2) == 66.67

    def test_all_below(self):
        assert cmr(records_from([0.1, 0.2]), 1) == 100.00

    def test_strict_inequality_at_the_threshold(self):
        assert cmr(records_from([2.0]), 2) == 0.0

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(1)
        errors = rng.uniform(0, 6, size=1000)
        recs = records_from(errors)
        for t in (1, 2, 3, 4, 5):
            expected = round(100.0 * sum(1 for e in errors if e < t) / len(errors), 2)
            assert cmr(recs, t) == expected

    def test_empty_records_rejected(self):
        with pytest.raises(DegenerateInputError):
            cmr([], 3)

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ValidationError):
            cmr(records_from([1.0]), 0)

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60),
           st.floats(0.1, 9), st.floats(0.1, 9))
    def test_monotone_in_threshold(self, errors, t1, t2):
        recs = records_from(errors)
        lo, hi = sorted((t1, t2))
        assert cmr(recs, lo) <= cmr(recs, hi)

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.floats(0, 10, allow_nan=False), min_size=2, max_size=60),
           st.randoms())
    def test_permutation_invariant(self, errors, rnd):
        recs = records_from(errors)
        shuffled = list(recs)
        rnd.shuffle(shuffled)
        assert cmr(recs, 3) == cmr(shuffled, 3)

    def test_r_avg_is_the_mean(self):
        rng = np.random.default_rng(2)
        errors = rng.uniform(0, 5, size=500)
        assert abs(r_avg(records_from(errors)) - errors.mean()) < 1e-9


class TestRecords:
    def test_make_record_uses_mask(self):
        gt = torch.zeros(8, 8, 2)
        pred = torch.ones(8, 8, 2)
        mask = torch.ones(8, 8, dtype=torch.bool)
        rec = make_record("x", pred, gt, mask)
        assert abs(rec.error - 2 ** 0.5) < 1e-6
        assert len(rec.quadrant_errors) == 4

    def test_negative_error_rejected(self):
        with pytest.raises(ValidationError):
            EvalRecord("bad", -1.0, (0, 0, 0, 0))

    def test_nan_rejected(self):
        with pytest.raises(ValidationError):
            EvalRecord("bad", float("nan"), (0, 0, 0, 0))


class TestReport:
    def test_single_perfect_record(self, tmp_path):
        path = report(records_from([0.0]), tmp_path, method="m")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        for t in (1, 2, 3, 4, 5):
            assert rows[0][f"cmr@{t}px"] == "100.00"
        assert float(rows[0]["r_avg"]) == 0.0
        assert rows[0]["n_pairs"] == "1"

    def test_two_record_worked_example(self, tmp_path):
        path = report(records_from([0.5, 4.5]), tmp_path, method="m")
        with open(path, newline="") as fh:
            row = next(csv.DictReader(fh))
        assert row["cmr@1px"] == "50.00"
        assert row["cmr@5px"] == "100.00"
        assert abs(float(row["r_avg"]) - 2.5) < 1e-9

    def test_schema_columns(self, tmp_path):
        path = report(records_from([1.0]), tmp_path)
        header = open(path).readline().strip().split(",")
        assert header == ["method", "cmr@1px", "cmr@2px", "cmr@3px",
                          "cmr@4px", "cmr@5px", "r_avg", "n_pairs"]

    def test_rerun_is_byte_identical(self, tmp_path):
        recs = records_from([0.4, 1.7, 3.1])
        path = report(recs, tmp_path, method="m")
        first = path.read_bytes()
        report(recs, tmp_path, method="m")
        assert path.read_bytes() == first

    def test_one_row_per_method(self, tmp_path):
        report(records_from([0.5]), tmp_path, method="alpha")
        path = report(records_from([2.5]), tmp_path, method="beta")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["method"] for r in rows] == ["alpha", "beta"]

    def test_raw_error_file_written(self, tmp_path):
        report(records_from([0.5, 1.5]), tmp_path, method="m")
        raw = tmp_path / "errors_m.csv"
        with open(raw, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["pair_id"] for r in rows] == ["p0", "p1"]
        assert float(rows[1]["error"]) == 1.5
