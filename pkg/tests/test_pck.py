import math

import numpy as np
import pytest

from powerskel.datamodel import (
    KEYPOINT_NAMES,
    LEFT_HIP,
    NUM_KEYPOINTS,
    RIGHT_SHOULDER,
    SkeletonFrame,
)
from powerskel.pck import (
    DegeneratePoseError,
    EmptyReportError,
    PCKConfig,
    parse_report,
    pck,
    report,
    torso_length,
)


def _skeleton(keypoints=None, visibility=None, seed=0, spread=100.0):
    if keypoints is None:
        rng = np.random.default_rng(seed)
        keypoints = rng.uniform(50, 50 + spread, size=(NUM_KEYPOINTS, 2))
    return SkeletonFrame(timestamp_ms=0, keypoints=keypoints, visibility=visibility)


class TestTorsoLength:
    def test_three_four_five(self):
        kp = np.zeros((NUM_KEYPOINTS, 2))
        kp[RIGHT_SHOULDER] = [0.0, 0.0]
        kp[LEFT_HIP] = [3.0, 4.0]
        kp[0] = [1.0, 1.0]  # avoid an all-zero degenerate pose elsewhere
        assert torso_length(_skeleton(kp)) == 5.0

    def test_coincident_raises(self):
        kp = np.ones((NUM_KEYPOINTS, 2))
        with pytest.raises(DegeneratePoseError):
            torso_length(_skeleton(kp))

    def test_translation_invariant(self):
        gt = _skeleton(seed=1)
        shifted = SkeletonFrame(timestamp_ms=0, keypoints=gt.keypoints + [37.0, -12.0])
        assert torso_length(gt) == pytest.approx(torso_length(shifted), abs=1e-9)

    def test_invisible_endpoint_raises(self):
        vis = np.ones(NUM_KEYPOINTS, dtype=bool)
        vis[RIGHT_SHOULDER] = False
        with pytest.raises(DegeneratePoseError):
            torso_length(_skeleton(seed=2, visibility=vis))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PCKConfig(alphas=())
        with pytest.raises(ValueError):
            PCKConfig(alphas=(0.1, -0.2))
        with pytest.raises(ValueError):
            PCKConfig(rs_index=3, lh_index=3)


class TestPCK:
    def test_perfect_prediction(self):
        gts = [_skeleton(seed=s) for s in range(4)]
        preds = [g.label_vector() for g in gts]
        table = pck(preds, gts)
        assert np.all(table.values == 1.0)
        assert np.all(table.averages() == 1.0)

    def test_boundary_inclusive(self):
        # exactly representable floats: torso 5, head displaced by 2.5, so the
        # normalized distance is exactly 0.5
        kp = np.zeros((NUM_KEYPOINTS, 2))
        kp[RIGHT_SHOULDER] = [0.0, 0.0]
        kp[LEFT_HIP] = [3.0, 4.0]
        kp[0] = [10.0, 10.0]
        gt = _skeleton(kp)
        pred = kp.copy()
        pred[0, 0] = 12.5
        table = pck([pred.reshape(-1)], [gt], PCKConfig(alphas=(0.4, 0.5)))
        assert table.values[0, 1] == 1.0  # alpha=0.5: <= is inclusive
        assert table.values[0, 0] == 0.0  # alpha=0.4: outside

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        config = PCKConfig()
        gts, preds = [], []
        for s in range(5):
            gt = _skeleton(seed=100 + s)
            pred = gt.keypoints + rng.normal(0, 30, size=(NUM_KEYPOINTS, 2))
            gts.append(gt)
            preds.append(pred.reshape(-1))
        table = pck(preds, gts, config)

        # independent oracle: explicit per-sample loop in scalar arithmetic
        for ki in range(NUM_KEYPOINTS):
            for ai, alpha in enumerate(config.alphas):
                hits = 0
                for pred, gt in zip(preds, gts):
                    rs = gt.keypoints[config.rs_index]
                    lh = gt.keypoints[config.lh_index]
                    torso = math.hypot(rs[0] - lh[0], rs[1] - lh[1])
                    px, py = pred[2 * ki], pred[2 * ki + 1]
                    gx, gy = gt.keypoints[ki]
                    if math.hypot(px - gx, py - gy) / torso <= alpha:
                        hits += 1
                assert abs(table.values[ki, ai] - hits / len(gts)) <= 1e-9

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(12)
        gts = [_skeleton(seed=200 + s) for s in range(8)]
        preds = [g.keypoints + rng.normal(0, 40, size=(NUM_KEYPOINTS, 2)) for g in gts]
        table = pck([p.reshape(-1) for p in preds], gts)
        diffs = np.diff(table.values, axis=1)
        assert np.all(diffs >= 0)

    def test_translation_and_scale_invariance(self):
        rng = np.random.default_rng(13)
        gts = [_skeleton(seed=300 + s) for s in range(4)]
        preds = [g.keypoints + rng.normal(0, 25, size=(NUM_KEYPOINTS, 2)) for g in gts]
        base = pck([p.reshape(-1) for p in preds], gts)
        shift = np.array([11.0, -7.0])
        scale = 2.5
        gts2 = [
            SkeletonFrame(timestamp_ms=0, keypoints=(g.keypoints + shift) * scale) for g in gts
        ]
        preds2 = [((p + shift) * scale).reshape(-1) for p in preds]
        moved = pck(preds2, gts2)
        assert np.allclose(base.values, moved.values)

    def test_average_is_mean_of_keypoints(self):
        rng = np.random.default_rng(14)
        gts = [_skeleton(seed=400 + s) for s in range(6)]
        preds = [g.keypoints + rng.normal(0, 20, size=(NUM_KEYPOINTS, 2)) for g in gts]
        table = pck([p.reshape(-1) for p in preds], gts)
        assert np.allclose(table.averages(), table.values.mean(axis=0), atol=1e-9)

    def test_degenerate_sample_excluded_and_counted(self):
        good = _skeleton(seed=15)
        degenerate = _skeleton(np.ones((NUM_KEYPOINTS, 2)))
        preds = [good.label_vector(), degenerate.label_vector()]
        table = pck(preds, [good, degenerate])
        assert table.excluded_samples == 1
        assert np.all(table.counts == 1)
        assert np.all(table.values == 1.0)

    def test_invisible_keypoint_drops_from_denominator(self):
        vis = np.ones(NUM_KEYPOINTS, dtype=bool)
        vis[0] = False
        gt = _skeleton(seed=16, visibility=vis)
        table = pck([gt.label_vector()], [gt])
        assert table.counts[0] == 0
        assert np.isnan(table.values[0, 0])
        assert table.counts[1] == 1

    def test_empty_rejected(self):
        with pytest.raises(EmptyReportError):
            pck(np.zeros((0, 34)), [])


class TestReport:
    def _table(self):
        gts = [_skeleton(seed=500 + s) for s in range(5)]
        rng = np.random.default_rng(17)
        preds = [g.keypoints + rng.normal(0, 30, size=(NUM_KEYPOINTS, 2)) for g in gts]
        return pck([p.reshape(-1) for p in preds], gts)

    def test_rows_present(self):
        text = report(self._table())
        lines = text.splitlines()
        names = [line.split()[0] for line in lines[1:-1]]
        assert names == list(KEYPOINT_NAMES) + ["average"]
        assert lines[0].split()[1:] == ["PCK@10", "PCK@20", "PCK@30", "PCK@40", "PCK@50"]

    def test_values_formatted(self):
        text = report(self._table())
        for line in text.splitlines()[1:-1]:
            for cell in line.split()[1:]:
                value = float(cell)
                assert 0.0 <= value <= 100.0
                assert "." in cell and len(cell.split(".")[1]) == 2

    def test_round_trip_parse(self):
        table = self._table()
        parsed = parse_report(report(table))
        for i, name in enumerate(KEYPOINT_NAMES):
            expected = [round(min(max(v * 100, 0.0), 100.0), 2) for v in table.values[i]]
            assert parsed[name] == expected
        avg = [round(min(max(v * 100, 0.0), 100.0), 2) for v in table.averages()]
        assert parsed["average"] == avg
