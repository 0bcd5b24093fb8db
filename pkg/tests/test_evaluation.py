import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import evsam.evaluation as ev
from evsam.attention import AttentionConfig
from evsam.backbone import PRESETS
from evsam.data.dataset import gen_dataset
from evsam.evaluation import (ClickState, Converged, OraclePredictor, box_eval, box_summary, boundary_distance,
                              click_eval, click_summary, initial_click, iou, next_click, size_bucket, write_rows,
                              write_summary)
from evsam.sam_head import Predictor, SamModel

from .oracles import brute_force_argmax, brute_force_distance, components4, oracle_next_click

masks16 = hnp.arrays(bool, st.tuples(st.integers(1, 16), st.integers(1, 16)))


def square(n, side, top=0, left=0):
    m = np.zeros((n, n), bool)
    m[top:top + side, left:left + side] = True
    return m


class TestIoU:
    def test_identical(self):
        m = square(4, 2)
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        assert iou(square(4, 2), square(4, 2, 2, 2)) == 0.0

    def test_hand_count(self):
        a = np.array([[1, 1], [0, 0]], bool)
        b = np.array([[0, 1], [0, 1]], bool)
        assert iou(a, b) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iou(np.zeros((3, 3)), np.zeros((3, 4)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((7, 9)) < 0.4, rng.random((7, 9)) < 0.6
        assert iou(a, b) == iou(b, a)


class TestBoundaryDistance:
    def test_single_pixel(self):
        assert boundary_distance(np.ones((1, 1), bool)).tolist() == [[1.0]]

    def test_square_has_unique_centre_maximum(self):
        d = boundary_distance(np.ones((5, 5), bool))
        assert np.argwhere(d == d.max()).tolist() == [[2, 2]]
        np.testing.assert_allclose(d, brute_force_distance(np.ones((5, 5), bool)))

    def test_strip(self):
        # one pixel wide, so every pixel touches the outside and all three tie
        d = boundary_distance(np.ones((1, 3), bool))
        assert d[0, 1] == d.max()
        np.testing.assert_allclose(d, brute_force_distance(np.ones((1, 3), bool)))

    def test_outside_is_zero(self):
        m = square(6, 2, 1, 1)
        assert (boundary_distance(m)[~m] == 0).all()

    def test_empty(self):
        with pytest.raises(ValueError):
            boundary_distance(np.zeros((3, 3), bool))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            boundary_distance(np.ones((3, 3), bool), method="manhattan")

    @settings(max_examples=150, deadline=None)
    @given(masks16)
    def test_exact_matches_brute_force(self, m):
        if not m.any():
            return
        np.testing.assert_allclose(boundary_distance(m, "exact"), brute_force_distance(m), rtol=1e-6)

    def test_chamfer_tracks_euclidean(self):
        m = np.zeros((70, 70), bool)
        yy, xx = np.mgrid[:70, :70]
        m[(yy - 35) ** 2 + (xx - 30) ** 2 < 28 ** 2] = True
        chamfer = boundary_distance(m, "chamfer")
        exact = boundary_distance(m, "exact")
        # 3-4 weights stay within 8% of Euclidean
        assert (np.abs(chamfer[m] - exact[m]) <= 0.08 * exact[m] + 1e-6).all()
        assert np.array_equal(boundary_distance(m), chamfer)

    def test_chamfer_single_pixel(self):
        assert boundary_distance(np.ones((1, 1), bool), "chamfer")[0, 0] == 1.0


class TestClicks:
    def test_square_centre(self):
        assert initial_click(np.ones((5, 5), bool)) == (2.5, 2.5, 1)

    def test_single_pixel(self):
        m = np.zeros((6, 6), bool)
        m[4, 1] = True
        assert initial_click(m) == (1.5, 4.5, 1)

    def test_deeper_region_wins(self):
        m = square(20, 3, 1, 1) | square(20, 7, 10, 10)
        x, y, _ = initial_click(m)
        assert (int(y), int(x)) == brute_force_argmax(m) == (13, 13)

    def test_tie_breaks_row_major(self):
        m = np.zeros((4, 8), bool)
        m[1:3, 1:7] = True        # 2-wide strip: every interior pixel has distance 1
        assert initial_click(m) == (1.5, 1.5, 1)

    def test_empty_gt(self):
        with pytest.raises(ValueError):
            initial_click(np.zeros((4, 4), bool))

    @settings(max_examples=150, deadline=None)
    @given(masks16)
    def test_initial_click_matches_oracle(self, m):
        if not m.any():
            return
        x, y, lab = initial_click(m)
        assert (int(y), int(x)) == brute_force_argmax(m) and lab == 1

    def test_converged(self):
        m = square(5, 3)
        with pytest.raises(Converged):
            next_click(ClickState(m, m.copy()))

    def test_needs_prediction(self):
        with pytest.raises(ValueError):
            next_click(ClickState(square(5, 3)))

    def test_empty_prediction(self):
        assert next_click(ClickState(np.ones((5, 5), bool), np.zeros((5, 5), bool))) == (2.5, 2.5, 1)

    def test_false_positive_is_background(self):
        gt = square(10, 2, 4, 4)
        pred = square(10, 8, 1, 1)
        x, y, lab = next_click(ClickState(gt, pred))
        assert lab == 0 and pred[int(y), int(x)] and not gt[int(y), int(x)]

    def test_largest_component_is_used(self):
        gt = square(20, 3, 0, 0) | square(20, 6, 10, 10)
        x, y, lab = next_click(ClickState(gt, np.zeros_like(gt)))
        assert 10 <= y < 16 and 10 <= x < 16 and lab == 1

    def test_equal_components_take_the_first(self):
        gt = square(12, 3, 7, 7) | square(12, 3, 1, 1)
        x, y, _ = next_click(ClickState(gt, np.zeros_like(gt)))
        assert (int(y), int(x)) == (2, 2)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 16), st.integers(2, 16))
    def test_next_click_matches_oracle(self, seed, h, w):
        rng = np.random.default_rng(seed)
        gt, pred = rng.random((h, w)) < 0.5, rng.random((h, w)) < 0.5
        expected = oracle_next_click(gt, pred)
        if expected is None:
            with pytest.raises(Converged):
                next_click(ClickState(gt, pred))
        else:
            assert next_click(ClickState(gt, pred)) == expected

    def test_positive_click_inside_its_region(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            gt, pred = rng.random((12, 12)) < 0.5, rng.random((12, 12)) < 0.3
            x, y, lab = next_click(ClickState(gt, pred))
            r, c = int(y), int(x)
            comp = max(components4(gt ^ pred), key=len)
            assert (r, c) in comp
            assert lab == (1 if gt[r, c] and not pred[r, c] else 0)


class TestBuckets:
    def test_desk_scale_example(self):
        assert size_bucket(100, 1024) == "small"

    def test_thresholds(self):
        assert [size_bucket(a, 1024) for a in (1023, 1024, 9215, 9216)] == ["small", "medium", "medium", "large"]
        # (128/1024)^2 scales 32^2 to 16 and 96^2 to 144
        assert [size_bucket(a, 128) for a in (15, 16, 143, 144)] == ["small", "medium", "medium", "large"]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 10 ** 6), st.sampled_from([64, 128, 512, 1024]))
    def test_partition(self, area, size):
        assert sum(size_bucket(area, size) == b for b in ev.BUCKETS) == 1


DATA = gen_dataset(7, 4, 64, 3)


class TestProtocols:
    def test_oracle_clicks_are_perfect_and_stop_early(self, monkeypatch):
        calls = []
        real = ev.next_click

        def counting(state, method="auto"):
            calls.append(1)
            return real(state, method)

        monkeypatch.setattr(ev, "next_click", counting)
        oracle = OraclePredictor(DATA, 64)
        res = click_eval(oracle, DATA, 64)
        assert res.miou == {1: 1.0, 3: 1.0, 5: 1.0}
        n = len(res.rows)
        assert len(calls) == n              # one convergence probe per mask
        assert oracle.calls == n            # a single prediction per mask

    def test_oracle_boxes_are_perfect(self):
        res = box_eval(OraclePredictor(DATA, 64), DATA, 64)
        assert res.miou == 1.0
        assert all(v == 1.0 for v in res.buckets.values() if v is not None)
        assert sum(res.counts.values()) == len(res.rows)

    def test_real_model_rows_and_reports(self, tmp_path):
        pred = Predictor(SamModel(PRESETS["tiny"], AttentionConfig(scales=(3,))))
        res = click_eval(pred, DATA[:2], 64)
        assert list(res.rows[0]) == ["mask_id", "area_bucket", "iou@1", "iou@3", "iou@5"]
        assert all(0 <= r[f"iou@{k}"] <= 1 for r in res.rows for k in (1, 3, 5))
        write_rows(tmp_path / "rows.csv", res.rows)
        write_summary(tmp_path / "summary.txt", click_summary(res))
        assert (tmp_path / "rows.csv").read_text().splitlines()[0] == "mask_id,area_bucket,iou@1,iou@3,iou@5"
        assert (tmp_path / "summary.txt").read_text().startswith(f"masks = {len(res.rows)}\n")
        boxes = box_eval(pred, DATA[:2], 64)
        assert set(box_summary(boxes)) >= {"miou", "miou_small", "count_large"}

    def test_bad_budgets(self):
        with pytest.raises(ValueError):
            click_eval(OraclePredictor(DATA, 64), DATA, 64, clicks_at=(0, 1))

    def test_no_masks(self):
        with pytest.raises(ValueError):
            box_eval(OraclePredictor(DATA, 64), [], 64)
