import jsonschema
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sgpmil.data import InstanceBag, MilDataset, SyntheticSpec, generate_synthetic
from sgpmil.errors import DegenerateInputError, InvalidArgumentError
from sgpmil.evaluation import (
    REPORT_SCHEMA,
    PredictionRecord,
    adaptive_ece,
    assign_to_prototypes,
    auroc,
    balanced_accuracy,
    cosine_similarity,
    evaluate,
    inducing_label_map,
    instance_eval,
    metrics_from_records,
    multiclass_auroc,
    predict,
    uncertainty_separation,
)
from sgpmil.mil_head import MilModel, forward_bag
from sgpmil.serialization import load_model, save_model
from sgpmil.stats import betainc_reg, student_t_sf2, welch_ttest

from . import oracles

# Recorded before the build with an independent statistics package (Welch, two-sided).
WELCH_A = [0.5040919121385182, 0.04443349686858178, 0.3418098846725779, 0.24322303938720702,
           0.2547350707889554, 0.2784402836910234, 0.0980013870852749, 0.27680676223558104]
WELCH_B = [0.15673934618625293, 0.3661499758322442, 0.2112893306613961, 0.18236846028292025,
           0.1859356290924325, 0.1665976826945525]
WELCH_T, WELCH_P, WELCH_DF = 0.7372952362883636, 0.47604418010203187, 11.24637650973189

# 12 predictions, 3 equal-mass bins of 4 (w = wrong):
#   .55 .60w .62 .65 -> acc .75, conf .6050, gap .1450
#   .70w .72 .75 .80 -> acc .75, conf .7425, gap .0075
#   .85 .90 .95w .99 -> acc .75, conf .9225, gap .1725
#   ACE = (.1450 + .0075 + .1725) / 3
ACE_CONF = [0.55, 0.6, 0.62, 0.65, 0.7, 0.72, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99]
ACE_CORRECT = [1, 0, 1, 1, 0, 1, 1, 1, 1, 1, 0, 1]
ACE_EXPECTED = 0.325 / 3


def ace_fixture():
    conf = np.array(ACE_CONF)
    probs = np.stack([1 - conf, conf], axis=1)
    return probs, np.array(ACE_CORRECT)


def test_balanced_accuracy_trivial():
    assert balanced_accuracy([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0
    assert balanced_accuracy([0, 0, 0, 0], [0, 1, 0, 1]) == 0.5


def test_balanced_accuracy_hand_tally():
    preds = [0, 0, 1, 1, 0, 1, 2, 2, 0, 1]
    labels = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]
    # recalls: class 0 2/3, class 1 2/3, class 2 2/4
    assert balanced_accuracy(preds, labels) == pytest.approx((2 / 3 + 2 / 3 + 0.5) / 3, abs=1e-15)


def test_balanced_accuracy_errors():
    with pytest.raises(DegenerateInputError):
        balanced_accuracy([], [])
    with pytest.raises(DegenerateInputError):
        balanced_accuracy([0, 1], [0, 0], n_classes=2)


def test_auroc_trivial():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5
    with pytest.raises(DegenerateInputError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_one_tie_fixture():
    s = [0.1, 0.4, 0.35, 0.8, 0.4, 0.2, 0.9, 0.05]
    y = [0, 1, 0, 1, 0, 0, 1, 0]
    assert auroc(s, y) == oracles.auc_pairs(s, y)
    assert auroc(s, y) == (5 * 3 - 0.5) / 15


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**31), st.integers(2, 12))
def test_auroc_matches_pair_count(n, seed, levels):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, levels, n) / levels
    assert auroc(s, y) == oracles.auc_pairs(s, y)


def test_multiclass_auroc_is_one_vs_rest_mean():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=30)
    y = np.arange(30) % 3
    ref = np.mean([oracles.auc_pairs(p[:, c], y == c) for c in range(3)])
    assert multiclass_auroc(p, y) == pytest.approx(ref, abs=1e-15)
    assert multiclass_auroc(p[:, :2] / p[:, :2].sum(1, keepdims=True), y % 2) == \
        oracles.auc_pairs((p[:, 1] / p[:, :2].sum(1)), y % 2 == 1)


def test_ace_trivial():
    assert adaptive_ece(np.array([[0.0, 1.0], [1.0, 0.0]]), [1, 0]) == 0.0
    assert adaptive_ece(np.array([[0.0, 1.0]] * 4), [1, 0, 1, 0], n_bins=1) == 0.5


def test_ace_hand_computation():
    probs, labels = ace_fixture()
    assert adaptive_ece(probs, labels, n_bins=3) == pytest.approx(ACE_EXPECTED, abs=1e-12)


def test_ace_order_invariance_and_per_sample_limit():
    probs, labels = ace_fixture()
    perm = np.random.default_rng(1).permutation(12)
    assert adaptive_ece(probs[perm], labels[perm], 3) == pytest.approx(ACE_EXPECTED, abs=1e-12)
    per_sample = np.mean(np.abs(np.array(ACE_CORRECT) - np.array(ACE_CONF)))
    assert adaptive_ece(probs, labels, n_bins=12) == pytest.approx(per_sample, abs=1e-12)


def test_ace_errors():
    with pytest.raises(DegenerateInputError):
        adaptive_ece(np.zeros((0, 2)), [])
    with pytest.raises(InvalidArgumentError):
        adaptive_ece(np.array([[0.5, 0.5]]), [0], n_bins=0)


def test_instance_eval_perfect_and_constant():
    labels = [np.array([0, 1, 0]), np.array([0, 0, 1, 1])]
    res = instance_eval([l.astype(float) for l in labels], labels)
    assert res.auc == 1.0 and res.best_acc == 1.0 and 0 < res.best_threshold <= 1
    res = instance_eval([np.full(3, 0.2), np.full(4, 0.7)], labels)
    assert res.auc == 0.5 and res.n_constant_bags == 2


def test_instance_eval_matches_sweep_oracle():
    rng = np.random.default_rng(20)
    maps = [rng.uniform(size=5) for _ in range(4)]
    labels = [rng.integers(0, 2, 5) for _ in range(4)]
    labels[0][0], labels[1][0] = 1, 0
    res = instance_eval(maps, labels)
    scores = np.concatenate([(m - m.min()) / (m.max() - m.min()) for m in maps])
    truth = [bool(t) for t in np.concatenate(labels)]
    accs = [oracles.balanced_instance_accuracy(scores, truth, t / 100) for t in range(101)]
    best = int(np.argmax(accs))
    assert res.best_acc == pytest.approx(accs[best], abs=1e-15)
    assert res.best_threshold == best / 100
    assert res.auc == oracles.auc_pairs(scores, truth)
    assert res.best_acc >= accs[50]


def test_instance_eval_errors():
    with pytest.raises(DegenerateInputError):
        instance_eval([np.ones(2)], [None])
    with pytest.raises(InvalidArgumentError):
        instance_eval([np.ones(2)], [np.ones(3)])


def test_welch_matches_recorded_values():
    res = welch_ttest(WELCH_A, WELCH_B)
    assert res.t == pytest.approx(WELCH_T, abs=1e-9)
    assert res.p == pytest.approx(WELCH_P, abs=1e-9)
    assert res.df == pytest.approx(WELCH_DF, abs=1e-9)


def test_welch_symmetry_and_identity():
    a, b = welch_ttest(WELCH_A, WELCH_B), welch_ttest(WELCH_B, WELCH_A)
    assert a.t == -b.t and abs(a.p - b.p) < 1e-12
    same = welch_ttest([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    assert same.t == 0.0 and same.p == pytest.approx(1.0, abs=1e-12)


def test_welch_zero_variance_guard():
    res = welch_ttest([0, 0, 0, 0], [1, 1, 1, 1])
    assert res.zero_variance and np.isinf(res.t) and res.p == 0.0
    with pytest.raises(DegenerateInputError):
        welch_ttest([1.0], [1.0, 2.0])


def test_student_t_tail_against_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    scipy_special = pytest.importorskip("scipy.special")
    for t, df in [(0.3, 1.0), (2.1, 3.5), (-4.0, 11.2), (10.0, 40.0), (0.0, 7.0)]:
        assert student_t_sf2(t, df) == pytest.approx(2 * scipy_stats.t.sf(abs(t), df), abs=1e-12)
    for a, b, x in [(0.5, 0.5, 0.3), (5.0, 0.5, 0.99), (20.0, 3.0, 0.7)]:
        assert betainc_reg(a, b, x) == pytest.approx(scipy_special.betainc(a, b, x), abs=1e-12)


def record(bag_id, std_pred, correct):
    mean = np.array([0.3, 0.7])
    return PredictionRecord(bag_id, np.tile(mean, (2, 1)), mean, np.array([std_pred, std_pred]), 1,
                            1 if correct else 0, np.ones(1), np.zeros(1))


def test_uncertainty_separation_groups():
    recs = [record(f"w{i}", v, False) for i, v in enumerate(WELCH_A)]
    recs += [record(f"c{i}", v, True) for i, v in enumerate(WELCH_B)]
    res, stats = uncertainty_separation(recs)
    assert res.t == pytest.approx(WELCH_T, abs=1e-9) and res.p == pytest.approx(WELCH_P, abs=1e-9)
    assert stats["incorrect"]["n"] == 8 and stats["correct"]["n"] == 6


def test_cosine_similarity_zero_norm_flagged():
    sim, n_zero = cosine_similarity(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 1.0]]))
    assert sim[0, 0] == 0.0 and n_zero == 1
    assert sim[1, 0] == pytest.approx(1 / np.sqrt(2))


def test_assignment_trivial_cases():
    z = np.array([[1.0, 0.0, 0.5], [0.0, 2.0, 0.0]])
    assign, sim, _ = assign_to_prototypes(z[1:2], z)
    assert assign[0] == 1 and sim[0, 1] == pytest.approx(1.0, abs=1e-15)
    assign, _, _ = assign_to_prototypes(np.random.default_rng(0).normal(size=(9, 3)), z[:1])
    assert np.all(assign == 0)


def test_assignment_matches_brute_force_and_scale_invariance():
    rng = np.random.default_rng(30)
    h, z = rng.normal(size=(30, 4)), rng.normal(size=(3, 4))
    assign, _, _ = assign_to_prototypes(h, z)
    for i in range(30):
        sims = [sum(a * b for a, b in zip(h[i], zj)) / (np.sqrt(sum(a * a for a in h[i])) *
                                                        np.sqrt(sum(b * b for b in zj))) for zj in z]
        assert assign[i] == int(np.argmax(sims))
    scaled, _, _ = assign_to_prototypes(h * rng.uniform(0.1, 10.0, size=(30, 1)), z)
    assert np.array_equal(assign, scaled)


def small_dataset():
    return generate_synthetic(SyntheticSpec(n_bags=8, k_range=(3, 6), n_features=5, seed=4,
                                            positive_fraction_range=(0.3, 0.6)))


def test_inducing_label_map_shapes():
    ds = small_dataset()
    model = MilModel(5, 2, hidden_dim=6, proj_dim=3, n_inducing=4, seed=1)
    lm = inducing_label_map(ds, model, top_k=3)
    assert [len(a) for a in lm.assignments] == [b.n_instances for b in ds]
    assert lm.counts.sum() == sum(b.n_instances for b in ds)
    assert all(len(t) == 3 for t in lm.top_instances)
    sims = [s for _, _, s in lm.top_instances[0]]
    assert sims == sorted(sims, reverse=True)


def test_predict_and_report_schema():
    ds = small_dataset()
    model = MilModel(5, 2, hidden_dim=6, proj_dim=3, n_inducing=4, seed=1)
    report, records = evaluate(model, ds, n_samples=8, seed=3)
    jsonschema.validate(report.to_dict(), REPORT_SCHEMA)
    assert report.n_bags == 8 and sum(report.support) == 8
    for r in records:
        assert r.mean_probs.sum() == pytest.approx(1.0, abs=1e-12) and np.all(r.std_probs >= 0)
        assert r.predicted == int(np.argmax(r.mean_probs))
    text = report.to_text()
    assert "balanced_acc=" in text and "support=" in text
    again = predict(model, ds, n_samples=8, seed=3)
    assert all(np.array_equal(a.prob_samples, b.prob_samples) for a, b in zip(records, again))


def test_metrics_require_records():
    with pytest.raises(DegenerateInputError):
        metrics_from_records([], 2)


def test_model_file_roundtrip_is_bit_identical(tmp_path):
    model = MilModel(5, 3, hidden_dim=6, proj_dim=3, n_inducing=4, seed=2, normalization="softmax")
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    back = load_model(save_model(model, tmp_path / "m.json"))
    bag = InstanceBag("b", np.random.default_rng(0).normal(size=(7, 5)), 1)
    with torch.no_grad():
        a = forward_bag(bag, model, 4, np.random.default_rng(9))
        b = forward_bag(bag, back, 4, np.random.default_rng(9))
    assert torch.equal(a.prob_samples, b.prob_samples)
    assert back.config() == model.config()
