"""Filter correlation math, the per-image ideal network, report plumbing."""

import dataclasses

import numpy as np
import pytest

from _oracles import ref_pearson
from activated_sr.analysis import (
    CorrelationReport,
    FilterTensor,
    GPerCriterion,
    aggregate_reports,
    build_g_per,
    correlation_curve,
    extract_filters,
    filter_correlation,
    layer_correlation,
    layer_correlations,
    load_report,
    save_report,
    save_report_csv,
)
from activated_sr.adapt import AdaptationConfig
from activated_sr.errors import (
    CompatibilityError,
    InputError,
    UndefinedCorrelationError,
)
from activated_sr.imaging import DegradationSpec, load_png, make_pair
from activated_sr.model import BODY_END_LAYER, build_model

# Hand-worked Pearson values: (x, y, rho). The 0.8 case: deviations
# (-1.5,-0.5,0.5,1.5) vs (-1.5,0.5,-0.5,1.5) give cov 4 over sqrt(5*5).
HAND_CASES = [
    ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 1.0),
    ([1.0, 2.0, 3.0], [30.0, 20.0, 10.0], -1.0),
    ([1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 4.0], 0.8),
    ([1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0], 0.0),
    ([0.0, 1.0, 1.0, 2.0], [0.0, 1.0, 2.0, 1.0], 0.5),
    ([2.0, 4.0, 6.0], [5.0, 7.0, 9.0], 1.0),
]


@pytest.mark.parametrize("x,y,want", HAND_CASES)
def test_pearson_hand_values(x, y, want):
    assert filter_correlation(np.array(x), np.array(y)) == pytest.approx(want, abs=1e-10)
    assert ref_pearson(x, y) == pytest.approx(want, abs=1e-10)


def test_pearson_properties(rng):
    for _ in range(1000):
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3))
        r = filter_correlation(a, b)
        assert -1.0 <= r <= 1.0
        assert filter_correlation(b, a) == pytest.approx(r, abs=1e-12)
        assert filter_correlation(2.5 * a + 0.3, b) == pytest.approx(r, abs=1e-9)
        assert filter_correlation(-1.5 * a + 2.0, b) == pytest.approx(-r, abs=1e-9)
        assert filter_correlation(a, b) == pytest.approx(ref_pearson(a, b), abs=1e-12)
    assert filter_correlation(a, a) == pytest.approx(1.0, abs=1e-12)
    assert filter_correlation(a, 2 * a.mean() - a) == pytest.approx(-1.0, abs=1e-10)


def test_pearson_constant_conventions():
    const = np.full(9, 0.7)
    varying = np.arange(9.0)
    with pytest.raises(UndefinedCorrelationError):
        filter_correlation(const, const * 2)
    assert filter_correlation(const, varying) == 0.0
    assert filter_correlation(varying, const) == 0.0
    with pytest.raises(InputError):
        filter_correlation(np.arange(9.0), np.arange(8.0))


def test_filter_tensor_contract():
    with pytest.raises(InputError):
        FilterTensor(np.array([]), ("fp", "layer", 0))
    with pytest.raises(InputError):
        FilterTensor(np.array([np.inf]), ("fp", "layer", 0))
    f = FilterTensor(np.ones((2, 3, 3)), ("fp", "layer", 0))
    assert f.values.shape == (18,)


def test_extract_filters(tiny_model):
    filters = extract_filters(tiny_model)
    assert len(filters) == tiny_model.arch.n_feats
    w = tiny_model.params[f"{BODY_END_LAYER}.weight"]
    for k, f in enumerate(filters):
        np.testing.assert_array_equal(f.values, w[k].astype(np.float64).ravel())
        assert f.source[1:] == (BODY_END_LAYER, k)
    head = extract_filters(tiny_model, "head")
    assert len(head) == tiny_model.arch.n_feats
    with pytest.raises(InputError):
        extract_filters(tiny_model, "nonexistent")
    with pytest.raises(InputError):
        extract_filters(tiny_model, "head.bias")


def test_layer_correlations(tiny_model):
    rhos, skipped = layer_correlations(tiny_model, tiny_model)
    assert skipped == 0
    assert len(rhos) == tiny_model.arch.n_feats
    np.testing.assert_allclose(rhos, 1.0, atol=1e-12)
    assert layer_correlation(tiny_model, tiny_model) == pytest.approx(1.0, abs=1e-12)

    other = build_model(tiny_model.arch, 1)
    # Independently initialized filters are near-orthogonal on average.
    assert abs(layer_correlation(tiny_model, other)) < 0.5

    bigger = build_model(dataclasses.replace(tiny_model.arch, n_feats=16), 0)
    with pytest.raises(CompatibilityError):
        layer_correlation(tiny_model, bigger)


def test_layer_correlations_skip_constant_filters(tiny_model):
    # Zero out one filter in both models: that pair is undefined and must
    # be excluded from the mean rather than poisoning it.
    key = f"{BODY_END_LAYER}.weight"
    a = {k: v.copy() for k, v in tiny_model.params.items()}
    a[key][0] = 0.0
    ck_a = dataclasses.replace(tiny_model, params=a)
    b = {k: v.copy() for k, v in tiny_model.params.items()}
    b[key][0] = 1.0
    ck_b = dataclasses.replace(tiny_model, params=b)
    rhos, skipped = layer_correlations(ck_a, ck_b)
    assert skipped == 1
    assert len(rhos) == tiny_model.arch.n_feats - 1


def test_g_per_criterion_validation():
    with pytest.raises(InputError):
        GPerCriterion(max_steps=-1)
    with pytest.raises(InputError):
        GPerCriterion(lr=0.0)


def _easy_pair(seed=0):
    from activated_sr.synth import make_texture

    hr = make_texture("plasma", 32, np.random.default_rng([70, seed]))
    return make_pair(hr, DegradationSpec(scale=2), f"easy{seed}")


def test_g_per_reaches_toy_target(tiny_model):
    # An untrained tiny net saturates near 16.8 dB (its frozen random tail
    # is the bottleneck), so the toy target checks the stopping mechanics.
    pair = _easy_pair()
    crit = GPerCriterion(target_psnr=16.0, max_steps=400, lr=1e-3)
    g = build_g_per(tiny_model, pair, crit)
    assert g.train_meta["g_per_stop"] == "target"
    assert g.train_meta["g_per_psnr"] >= 16.0
    assert 0 < g.train_meta["g_per_steps"] <= 400
    assert g.train_meta["g_per_image"] == pair.id
    # Tail is frozen and untouched.
    assert g.frozen
    for name in g.frozen:
        np.testing.assert_array_equal(g.params[name], tiny_model.params[name])


def test_g_per_zero_step_when_already_at_target(tiny_model):
    pair = _easy_pair()
    g = build_g_per(tiny_model, pair, GPerCriterion(target_psnr=5.0, max_steps=100))
    assert g.train_meta["g_per_steps"] == 0
    assert g.train_meta["g_per_stop"] == "target"
    for k in tiny_model.params:
        np.testing.assert_array_equal(g.params[k], tiny_model.params[k])


def test_g_per_budget_stop(tiny_model):
    pair = _easy_pair()
    g = build_g_per(tiny_model, pair, GPerCriterion(target_psnr=80.0, max_steps=3))
    assert g.train_meta["g_per_steps"] == 3
    assert g.train_meta["g_per_stop"] == "budget"


def test_g_per_scale_mismatch(tiny_model):
    pair = make_pair(np.zeros((16, 16, 3)), DegradationSpec(scale=4), "x4")
    with pytest.raises(InputError):
        build_g_per(tiny_model, pair)


def test_correlation_curve_toy(tiny_model, toy_index, toy_extractor, toy_corpus):
    path = sorted(toy_corpus.glob("*.png"))[4]
    pair = make_pair(load_png(path), DegradationSpec(scale=2), path.name)
    cfg = AdaptationConfig(
        degradation=DegradationSpec(scale=2), extractor=toy_extractor,
        corpus_dir=str(toy_corpus), m=2, k=2, lr=1e-3, crop=8, epochs=2, rng_seed=0,
    )
    crit = GPerCriterion(target_psnr=24.0, max_steps=150, lr=1e-3)
    rep = correlation_curve(tiny_model, pair, toy_index, cfg, criterion=crit)
    assert rep.epochs == [0, 1, 2]
    assert len(rep.matched) == len(rep.random) == 3
    # Epoch 0 is the unmodified baseline for both runs, by construction.
    assert rep.matched[0] == pytest.approx(rep.baseline, abs=1e-12)
    assert rep.random[0] == pytest.approx(rep.baseline, abs=1e-12)
    assert rep.n_images == 1
    entry = rep.per_image[0]
    for k in ("image_id", "g_per_steps", "g_per_psnr", "g_per_stop",
              "matched_psnr", "matched_ssim", "random_psnr", "random_ssim",
              "selected_image_ids", "random_image_ids"):
        assert k in entry
    assert len(entry["matched_psnr"]) == 3
    rep.validate()


def test_aggregate_and_round_trip(tmp_path, tiny_model, toy_index, toy_extractor, toy_corpus):
    paths = sorted(toy_corpus.glob("*.png"))[4:6]
    cfg = AdaptationConfig(
        degradation=DegradationSpec(scale=2), extractor=toy_extractor,
        corpus_dir=str(toy_corpus), m=2, k=2, lr=1e-3, crop=8, epochs=1, rng_seed=0,
    )
    crit = GPerCriterion(target_psnr=20.0, max_steps=60, lr=1e-3)
    reports = []
    for p in paths:
        pair = make_pair(load_png(p), DegradationSpec(scale=2), p.name)
        reports.append(correlation_curve(tiny_model, pair, toy_index, cfg, criterion=crit))
    agg = aggregate_reports(reports)
    assert agg.n_images == 2
    want = np.mean([r.matched for r in reports], axis=0)
    np.testing.assert_allclose(agg.matched, want, atol=1e-12)

    save_report(agg, tmp_path / "rep.json")
    back = load_report(tmp_path / "rep.json")
    assert back.epochs == agg.epochs
    np.testing.assert_allclose(back.matched, agg.matched, atol=0)
    assert back.n_images == 2

    save_report_csv(agg, tmp_path / "rep.csv")
    lines = (tmp_path / "rep.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,matched_mean_rho,random_mean_rho,baseline_rho,n_images,n_excluded_filters"
    assert len(lines) == len(agg.epochs) + 1

    with pytest.raises(InputError):
        aggregate_reports([])
    short = dataclasses.replace(agg, epochs=[0])
    with pytest.raises(InputError):
        aggregate_reports([agg, short])


def test_report_validation():
    with pytest.raises(InputError):
        CorrelationReport("l", [0, 1], [0.5], [0.5, 0.5], 0.1).validate()
    with pytest.raises(InputError):
        CorrelationReport("l", [0], [1.5], [0.5], 0.1).validate()
    with pytest.raises(InputError):
        CorrelationReport("l", [0], [0.5], [0.5], -2.0).validate()


def test_load_report_rejects_bad_docs(tmp_path):
    p = tmp_path / "r.json"
    p.write_text("{}")
    with pytest.raises(InputError):
        load_report(p)
    p.write_text('{"kind": "correlation_report", "format_version": 42}')
    with pytest.raises(CompatibilityError):
        load_report(p)
