"""Metric tests against brute-force per-pixel and double-loop oracles."""
import csv
import json
import math

import numpy as np
import pytest

from nodseg.metrics import (
    CaseMetrics,
    aggregate_report,
    assd,
    binarize,
    case_metrics,
    extract_contour,
    hausdorff,
    pixel_metrics,
)


def _oracle_distance_matrix(x_points, y_points, spacing):
    d = np.empty((len(x_points), len(y_points)), dtype=np.float64)
    for i, (r1, c1) in enumerate(x_points):
        for j, (r2, c2) in enumerate(y_points):
            d[i, j] = math.sqrt(((r1 - r2) * spacing[0]) ** 2 + ((c1 - c2) * spacing[1]) ** 2)
    return d


def _oracle_contour(mask):
    points = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if rr < 0 or rr >= h or cc < 0 or cc >= w or not mask[rr, cc]:
                    points.append((r, c))
                    break
    return np.array(points, dtype=np.int64).reshape(-1, 2)


def _random_mask(rng, size=16, p=0.4):
    return (rng.random((size, size)) < p).astype(np.uint8)


# ----------------------------------------------------------- pixel metrics


def test_pixel_metrics_arithmetic_fixture():
    pred = np.array([[1, 1, 1, 0], [0, 0, 0, 0]], dtype=np.uint8)
    gt = np.array([[1, 1, 0, 1], [0, 0, 0, 0]], dtype=np.uint8)
    m = pixel_metrics(pred, gt, lesion_id="fx")
    assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 4)
    assert abs(m.precision - 2 / 3) < 1e-12
    assert abs(m.sensitivity - 2 / 3) < 1e-12
    assert abs(m.dice - 2 / 3) < 1e-12
    assert abs(m.iou - 1 / 2) < 1e-12


def test_pixel_metrics_identity():
    rng = np.random.default_rng(1)
    gt = _random_mask(rng)
    gt[0, 0] = 1
    m = pixel_metrics(gt, gt)
    assert m.precision == m.sensitivity == m.dice == m.iou == 1.0


def test_pixel_metrics_empty_pair_is_undefined():
    z = np.zeros((8, 8), dtype=np.uint8)
    m = pixel_metrics(z, z)
    assert m.tn == 64
    assert m.precision is None and m.sensitivity is None
    assert m.dice is None and m.iou is None


def test_pixel_metrics_brute_force_counts():
    rng = np.random.default_rng(2)
    for _ in range(10):
        pred, gt = _random_mask(rng), _random_mask(rng)
        m = pixel_metrics(pred, gt)
        tp = fp = fn = tn = 0
        for r in range(16):
            for c in range(16):
                if pred[r, c] and gt[r, c]:
                    tp += 1
                elif pred[r, c]:
                    fp += 1
                elif gt[r, c]:
                    fn += 1
                else:
                    tn += 1
        assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
        if m.dice is not None and m.iou is not None:
            assert abs(m.dice - 2 * m.iou / (1 + m.iou)) < 1e-12


def test_pixel_metrics_input_validation():
    with pytest.raises(ValueError):
        pixel_metrics(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        pixel_metrics(np.full((4, 4), 2), np.zeros((4, 4)))


def test_binarize_threshold():
    x = np.array([0.1, 0.5, 0.49999, 0.9])
    np.testing.assert_array_equal(binarize(x), [0, 1, 0, 1])
    np.testing.assert_array_equal(binarize(x, threshold=0.95), [0, 0, 0, 0])


# ---------------------------------------------------------------- contours


def test_contour_single_pixel():
    m = np.zeros((5, 5), dtype=np.uint8)
    m[2, 3] = 1
    np.testing.assert_array_equal(extract_contour(m), [[2, 3]])


def test_contour_solid_square_drops_center():
    m = np.zeros((5, 5), dtype=np.uint8)
    m[1:4, 1:4] = 1
    pts = extract_contour(m)
    assert len(pts) == 8
    assert [2, 2] not in pts.tolist()


def test_contour_full_image_is_border_ring():
    m = np.ones((4, 6), dtype=np.uint8)
    pts = set(map(tuple, extract_contour(m)))
    want = {(r, c) for r in range(4) for c in range(6) if r in (0, 3) or c in (0, 5)}
    assert pts == want


def test_contour_empty_mask():
    assert extract_contour(np.zeros((3, 3))).shape == (0, 2)


def test_contour_matches_neighbor_scan_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        m = _random_mask(rng, size=12, p=0.5)
        np.testing.assert_array_equal(extract_contour(m), _oracle_contour(m))


# --------------------------------------------------------------- distances


def test_distances_identity_and_single_pairs():
    x = np.array([[0, 0], [1, 2]])
    assert hausdorff(x, x) == 0.0
    assert assd(x, x) == 0.0
    assert hausdorff(np.array([[0, 0]]), np.array([[0, 3]]), (1.0, 1.0)) == 3.0
    assert assd(np.array([[0, 0]]), np.array([[0, 2]]), (1.0, 1.0)) == 2.0


def test_distances_respect_anisotropic_spacing():
    x = np.array([[0, 0]])
    y = np.array([[2, 1]])
    want = math.sqrt((2 * 2.0) ** 2 + (1 * 0.7) ** 2)
    assert abs(hausdorff(x, y, (2.0, 0.7)) - want) < 1e-12
    assert abs(assd(x, y, (2.0, 0.7)) - want) < 1e-12


def test_distances_undefined_for_empty_sets():
    empty = np.zeros((0, 2))
    pts = np.array([[1, 1]])
    assert hausdorff(empty, pts) is None
    assert hausdorff(pts, empty) is None
    assert assd(empty, pts) is None
    assert assd(pts, empty) is None


def test_distances_match_double_loop_oracle_exactly():
    rng = np.random.default_rng(4)
    spacing = (0.65, 0.8)
    for _ in range(20):
        a = extract_contour(_random_mask(rng, size=32, p=0.45))
        b = extract_contour(_random_mask(rng, size=32, p=0.45))
        if len(a) == 0 or len(b) == 0:
            continue
        d = _oracle_distance_matrix(a, b, spacing)
        want_hd = float(max(d.min(axis=1).max(), d.min(axis=0).max()))
        want_assd = float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(a) + len(b)))
        got_hd = hausdorff(a, b, spacing)
        got_assd = assd(a, b, spacing)
        assert got_hd == want_hd
        assert got_assd == want_assd
        assert got_hd >= got_assd
        assert hausdorff(b, a, spacing) == got_hd
        assert assd(b, a, spacing) == got_assd


# ------------------------------------------------------------- aggregation


def _case(lid, dice=0.5, hd=1.0):
    return CaseMetrics(
        lesion_id=lid, tp=1, fp=1, fn=1, tn=1,
        precision=0.5, sensitivity=0.5, dice=dice, iou=dice / (2 - dice),
        hd_mm=hd, assd_mm=hd / 2 if hd is not None else None,
    )


def test_aggregate_single_case_is_identity():
    case = _case("a", dice=0.8, hd=2.0)
    for mode in ("lesion", "slice"):
        rep = aggregate_report([case], aggregation=mode)
        assert rep.n_cases == 1 and rep.n_lesions == 1
        assert rep.means["dice"] == 0.8
        assert rep.means["hd_mm"] == 2.0
        assert all(v == 0 for v in rep.excluded.values())


def test_aggregate_simple_mean():
    rep = aggregate_report([_case("a", dice=0.8), _case("b", dice=0.6)])
    assert abs(rep.means["dice"] - 0.7) < 1e-12


def test_aggregate_excludes_undefined_with_count():
    cases = [_case("a", hd=4.0), _case("b", hd=None), _case("c", hd=2.0)]
    rep = aggregate_report(cases, aggregation="slice")
    assert rep.means["hd_mm"] == 3.0
    assert rep.excluded["hd_mm"] == 1
    assert rep.excluded["dice"] == 0


def test_aggregate_lesion_vs_slice_weighting():
    cases = [_case("a", dice=0.8), _case("a", dice=0.6), _case("b", dice=0.4)]
    flat = aggregate_report(cases, aggregation="slice")
    grouped = aggregate_report(cases, aggregation="lesion")
    assert abs(flat.means["dice"] - 0.6) < 1e-12
    assert abs(grouped.means["dice"] - 0.55) < 1e-12
    assert grouped.n_lesions == 2
    # a lesion counts as excluded only when none of its slices define the metric
    mixed = [_case("a", hd=None), _case("a", hd=3.0), _case("b", hd=None)]
    rep = aggregate_report(mixed, aggregation="lesion")
    assert rep.means["hd_mm"] == 3.0
    assert rep.excluded["hd_mm"] == 1


def test_aggregate_input_validation():
    with pytest.raises(ValueError):
        aggregate_report([])
    with pytest.raises(ValueError):
        aggregate_report([_case("a")], aggregation="volume")


def test_report_serialization_round_trip(tmp_path):
    rep = aggregate_report([_case("a", dice=0.8, hd=2.0), _case("b", dice=0.6, hd=None)])
    jpath = tmp_path / "report.json"
    cpath = tmp_path / "report.csv"
    rep.write_json(jpath)
    rep.write_csv(cpath)

    doc = json.loads(jpath.read_text())
    assert doc["n_cases"] == 2
    assert doc["means"]["dice"] == rep.means["dice"]
    assert doc["cases"][1]["hd_mm"] is None

    with open(cpath, newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 3
    assert rows[0]["lesion_id"] == "a"
    assert rows[1]["hd_mm"] == ""
    assert rows[2]["lesion_id"] == "mean"
    assert abs(float(rows[2]["dice"]) - rep.means["dice"]) < 1e-15


def test_case_metrics_integration():
    gt = np.zeros((16, 16), dtype=np.uint8)
    gt[5:11, 5:11] = 1
    pred = np.zeros_like(gt)
    pred[6:12, 6:12] = 1
    m = case_metrics(pred, gt, spacing_yx=(0.7, 0.7), lesion_id="sq")
    assert m.lesion_id == "sq"
    assert m.tp == 25
    assert m.hd_mm is not None and m.assd_mm is not None
    assert m.hd_mm >= m.assd_mm > 0
    # one pixel of diagonal offset in both axes
    assert abs(m.hd_mm - math.sqrt(2 * 0.7**2)) < 1e-12

    empty_pred = np.zeros_like(gt)
    m2 = case_metrics(empty_pred, gt, lesion_id="sq")
    assert m2.hd_mm is None and m2.assd_mm is None
    assert m2.sensitivity == 0.0 and m2.precision is None
