import json
import logging

import numpy as np
import pandas as pd
import pytest

from conftest import perturb_plane, posed_triplet
from src.errors import DataError, GeometryError
from src.evaluation import (
    REGION_RULES,
    PlaneErrors,
    ScoreReport,
    aggregate,
    couple_planes,
    evaluate_state,
    intersection_angle,
    markdown_table,
    median_score,
    score,
    summary_frame,
    write_report,
)
from src.geometry import BodyRegion, Plane, PlaneTriplet, rot_z
from src.phantom_data import canonical_planes
from src.regression_model import init_state

ORTHOGONAL_REGIONS = [BodyRegion.ANKLE, BodyRegion.KNEE, BodyRegion.WRIST]


def perturbed_triplet(region, rng):
    truth = posed_triplet(region, rng)
    return PlaneTriplet(*(perturb_plane(p, rng) for p in truth), region=region)


def rotated_in_plane(plane, deg):
    r = rot_z(deg)
    e_u = r[0, 0] * plane.e_u + r[1, 0] * plane.e_v
    e_v = r[0, 1] * plane.e_u + r[1, 1] * plane.e_v
    return Plane(plane.center, e_u, e_v)


def tilted(plane, deg):
    """Rotate the plane about its own e_u."""
    c, s = np.cos(np.deg2rad(deg)), np.sin(np.deg2rad(deg))
    return Plane(plane.center, plane.e_u, c * plane.e_v + s * plane.e_w)


def report(p, region=BodyRegion.KNEE, fold=0):
    errors = PlaneErrors(np.full(3, p), np.full(3, p), np.full(3, p))
    return ScoreReport(errors, p, region, fold)


@pytest.mark.parametrize("region", list(BodyRegion))
def test_canonical_triplets_are_fixed_points(region, rng):
    truth = posed_triplet(region, rng)
    coupled = couple_planes(truth)
    for a, b in zip(truth, coupled):
        np.testing.assert_allclose(b.e_u, a.e_u, atol=1e-12)
        np.testing.assert_allclose(b.e_v, a.e_v, atol=1e-12)
        np.testing.assert_array_equal(b.center, a.center)


def test_coupling_properties_on_perturbed_triplets(rng):
    for k in range(500):
        region = list(BodyRegion)[k % 4]
        pred = perturbed_triplet(region, rng)
        coupled = couple_planes(pred)
        np.testing.assert_array_equal(coupled.axial.e_u, pred.axial.e_u)
        np.testing.assert_array_equal(coupled.axial.e_v, pred.axial.e_v)
        for before, after in zip(pred, coupled):
            np.testing.assert_array_equal(after.center, before.center)
        n_a, n_c, n_s = (p.e_w for p in coupled)
        assert abs(n_a @ n_s) < 1e-9
        if region in ORTHOGONAL_REGIONS:
            assert abs(n_a @ n_c) < 1e-9
            assert abs(n_c @ n_s) < 1e-9
        else:
            np.testing.assert_allclose(n_c, pred.coronal.e_w, atol=1e-12)
        assert intersection_angle(coupled.axial, coupled.coronal) < 1e-7
        assert intersection_angle(coupled.axial, coupled.sagittal) < 1e-7
        twice = couple_planes(coupled)
        for a, b in zip(coupled, twice):
            np.testing.assert_allclose(b.e_u, a.e_u, atol=1e-12)
            np.testing.assert_allclose(b.e_v, a.e_v, atol=1e-12)


def test_in_plane_rotation_is_removed(rng):
    truth = posed_triplet(BodyRegion.KNEE, rng)
    pred = truth.replace(coronal=rotated_in_plane(truth.coronal, 5.0))
    assert intersection_angle(pred.axial, pred.coronal) == pytest.approx(5.0)
    coupled = couple_planes(pred)
    assert intersection_angle(coupled.axial, coupled.coronal) == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(coupled.coronal.e_w, truth.coronal.e_w, atol=1e-12)


def test_sagittal_normal_sign_follows_prediction(rng):
    truth = posed_triplet(BodyRegion.WRIST, rng)
    coupled = couple_planes(truth.replace(sagittal=tilted(truth.sagittal, 10.0)))
    assert coupled.sagittal.e_w @ truth.sagittal.e_w > 0.999


def test_coupling_never_changes_translation_error(rng):
    for _ in range(50):
        truth = posed_triplet(BodyRegion.ANKLE, rng)
        pred = PlaneTriplet(*(perturb_plane(p, rng) for p in truth), region=truth.region)
        before = score(pred, truth).errors.d
        after = score(couple_planes(pred), truth).errors.d
        np.testing.assert_array_equal(after, before)


def test_parallel_normals_skip_coupling(caplog):
    planes = canonical_planes(BodyRegion.KNEE)
    pred = planes.replace(coronal=Plane((0, 0, 0), (1, 0, 0), (0, np.cos(np.deg2rad(0.5)), np.sin(np.deg2rad(0.5)))))
    with caplog.at_level(logging.WARNING):
        out = couple_planes(pred)
    assert out is pred
    assert "parallel" in caplog.text


def test_calcaneus_rule_leaves_coronal_normal():
    assert not REGION_RULES[BodyRegion.CALCANEUS].all_orthogonal
    assert all(REGION_RULES[r].all_orthogonal for r in ORTHOGONAL_REGIONS)


def test_perfect_prediction_scores_zero(rng):
    truth = posed_triplet(BodyRegion.CALCANEUS, rng)
    rep = score(truth, truth)
    assert rep.p == pytest.approx(0.0, abs=1e-9)
    assert not np.any(rep.errors.d) and not np.any(rep.errors.eps_n)
    assert np.all(rep.errors.eps_i < 1e-6)


def test_in_plane_offset_has_no_translation_error(rng):
    truth = posed_triplet(BodyRegion.KNEE, rng)
    axial = truth.axial
    moved = Plane(axial.center + 5.0 * axial.e_u, axial.e_u, axial.e_v)
    rep = score(truth.replace(axial=moved), truth)
    assert rep.errors.d[0] == pytest.approx(0.0, abs=1e-12)


def test_error_components(rng):
    truth = posed_triplet(BodyRegion.ANKLE, rng)
    axial, coronal, sagittal = truth
    pred = truth.replace(
        axial=Plane(axial.center + 3.0 * axial.e_w, axial.e_u, axial.e_v),
        coronal=tilted(coronal, 12.0),
        sagittal=rotated_in_plane(sagittal, 7.0),
    )
    rep = score(pred, truth)
    np.testing.assert_allclose(rep.errors.d, [3.0, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(rep.errors.eps_n, [0.0, 12.0, 0.0], atol=1e-6)
    np.testing.assert_allclose(rep.errors.eps_i, [0.0, 0.0, 7.0], atol=1e-6)
    assert rep.p == pytest.approx((0.2 * 3.0 + 0.6 * 12.0 + 0.2 * 7.0) / 3.0)


@pytest.mark.parametrize("d, eps_n, eps_i, expected", [(9.94, 8.08, 8.09, 8.454), (5.43, 6.61, 6.37, 6.326)])
def test_weighted_score(d, eps_n, eps_i, expected):
    errors = PlaneErrors(np.full(3, d), np.full(3, eps_n), np.full(3, eps_i))
    assert errors.plane_scores().mean() == pytest.approx(expected, abs=1e-9)


def test_score_rejects_region_mismatch(rng):
    with pytest.raises(GeometryError):
        score(posed_triplet(BodyRegion.KNEE, rng), posed_triplet(BodyRegion.WRIST, rng))


def test_degenerate_projection_is_reported(rng):
    truth = canonical_planes(BodyRegion.KNEE)
    flipped = Plane(truth.axial.center, (1.0, 0.0, 0.0), (0.0, 0.0, 1.0))
    rep = score(truth.replace(axial=flipped), truth, volume="v1")
    assert rep.degenerate == ("axial",)
    assert rep.errors.eps_n[0] == pytest.approx(90.0)


def test_aggregate_two_folds():
    summary = aggregate({0: [report(8.0, fold=0)], 1: [report(10.0, fold=1)]})
    row = summary[(summary.region == "knee") & (summary.metric == "score")].iloc[0]
    assert row["mean"] == pytest.approx(9.0)
    assert row["std"] == pytest.approx(np.sqrt(2.0))
    assert row["n_folds"] == 2
    assert set(summary.region) == {"knee"}


def test_aggregate_uses_fold_medians():
    reports = [report(v, fold=0) for v in (1.0, 2.0, 100.0)] + [report(4.0, fold=1)]
    row = aggregate(reports).query("metric == 'd'").iloc[0]
    assert row["mean"] == pytest.approx(3.0)


def test_aggregate_single_volume():
    summary = aggregate([report(5.5)])
    assert (summary["mean"] == 5.5).all()
    assert (summary["std"] == 0.0).all()


def test_aggregate_pools_regions():
    reports = [report(2.0, BodyRegion.KNEE), report(4.0, BodyRegion.WRIST)]
    summary = aggregate(reports)
    pooled = summary[(summary.region == "all") & (summary.metric == "score")].iloc[0]
    assert pooled["mean"] == pytest.approx(3.0)


def test_aggregate_commutes_with_weighting_for_means(rng):
    reports = []
    for fold in range(3):
        errors = PlaneErrors(rng.uniform(0, 5, 3), rng.uniform(0, 20, 3), rng.uniform(0, 20, 3))
        reports.append(ScoreReport(errors, float(errors.plane_scores().mean()), BodyRegion.KNEE, fold))
    summary = aggregate(reports).set_index("metric")["mean"]
    combined = 0.2 * summary["d"] + 0.6 * summary["eps_n"] + 0.2 * summary["eps_i"]
    assert combined == pytest.approx(summary["score"], abs=1e-12)


def test_aggregate_rejects_empty():
    with pytest.raises(DataError):
        aggregate([])
    with pytest.raises(DataError):
        aggregate({0: [report(1.0)], 1: []})


def test_median_score():
    assert median_score([report(v) for v in (3.0, 1.0, 2.0)]) == 2.0


def test_evaluate_state_scores_both_stages(tiny_dataset, fast_model_cfg):
    results = evaluate_state(init_state(fast_model_cfg, seed=1), tiny_dataset, [0], batch_size=3)
    assert set(results) == {"regressed", "postproc"}
    assert len(results["regressed"]) == len(results["postproc"]) == 4
    for before, after in zip(results["regressed"], results["postproc"]):
        assert before.volume == after.volume
        np.testing.assert_array_equal(before.errors.d, after.errors.d)
    with pytest.raises(DataError):
        evaluate_state(init_state(fast_model_cfg), tiny_dataset, [7])


def test_report_files(tmp_path):
    results = {"regressed": [report(2.0), report(3.0, fold=1)], "postproc": [report(1.0), report(2.0, fold=1)]}
    summary = summary_frame(results, representation="6dxy")
    assert set(summary.columns) >= {"region", "metric", "mean", "std", "stage", "representation"}
    records = [dict(r.as_record(), stage=s) for s, reps in results.items() for r in reps]
    write_report(tmp_path, "Smoke", records, summary, group_cols=("representation", "stage"), config={"seed": 1})
    raw = json.loads((tmp_path / "raw_results.json").read_text())
    assert raw["title"] == "Smoke" and len(raw["results"]) == 4
    assert pd.read_csv(tmp_path / "summary.csv").shape[0] == len(summary)
    text = (tmp_path / "report.md").read_text()
    assert "| Representation | Stage |" in text
    assert "2.50 ± 0.71" in text


def test_markdown_table_rows():
    summary = summary_frame({"regressed": [report(1.0)]})
    lines = markdown_table(summary).splitlines()
    assert len(lines) == 3
    assert lines[2].startswith("| knee | regressed |")
