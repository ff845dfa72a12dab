import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cgh.data import LabeledImages
from cgh.evaluation import (LinearRecipe, export_embeddings, knn_accuracy, knn_eval, knn_predict, labeled_subset,
                            linear_eval, linear_probe, pr_counts, pr_from_counts, pr_thresholds, read_embeddings,
                            recipe_for_fraction, semi_supervised_finetune, topk_accuracy, write_embeddings)
from cgh.models import build_networks
from conftest import tiny_config


def _blobs(seed, n_per=20, dim=6, classes=2, spread=0.1):
    gen = torch.Generator().manual_seed(seed)
    centers = torch.eye(dim)[:classes] * 3
    x = torch.cat([centers[c] + spread * torch.randn(n_per, dim, generator=gen) for c in range(classes)])
    y = torch.arange(classes).repeat_interleave(n_per)
    return x, y


# ---- KNN -----------------------------------------------------------------
def test_duplicate_point_found_with_k1():
    x, y = _blobs(0, classes=3, spread=2.0)
    res = knn_accuracy(x, y, x[5:6], y[5:6], [1])
    assert res["per_k"][1] == 1.0


def test_separated_blobs_all_k():
    x, y = _blobs(1, n_per=20)
    q, qy = _blobs(2, n_per=10)
    res = knn_accuracy(x, y, q, qy, list(range(1, 21)))
    assert all(acc == 1.0 for acc in res["per_k"].values())


def test_matches_brute_force_oracle():
    gen = torch.Generator().manual_seed(3)
    x = torch.randn(50, 5, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 4, (50,), generator=gen)
    q = torch.randn(20, 5, generator=gen, dtype=torch.float64)
    ks = [1, 3, 10, 50]
    preds = knn_predict(x, y, q, ks, num_classes=4)
    for k in ks:
        ref = oracles.knn_predict(x.tolist(), y.tolist(), q.tolist(), k, 4)
        assert preds[k].tolist() == ref


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(0.1, 50.0))
def test_knn_is_scale_invariant(scale):
    x, y = _blobs(4, classes=3, spread=1.5)
    q, _ = _blobs(5, classes=3, spread=1.5)
    a = knn_predict(x, y, q, [5], 3)[5]
    b = knn_predict(x * scale, y, q, [5], 3)[5]
    assert torch.equal(a, b)


def test_knn_rejects_oversized_k():
    x, y = _blobs(0)
    with pytest.raises(ValueError):
        knn_predict(x, y, x, [100], 2)
    # knn_accuracy drops k values the training set cannot supply
    assert set(knn_accuracy(x, y, x, y, [10, 200])["per_k"]) == {10}


# ---- linear probe ---------------------------------------------------------
def test_one_hot_features_are_perfectly_separable():
    y = torch.arange(5).repeat(20)
    x = torch.eye(5)[y]
    res = linear_probe(x, y, x, y, 5, LinearRecipe(epochs=20, batch_size=32))
    assert res["top1"] == 1.0 and res["top5"] == 1.0


def test_topk():
    logits = torch.tensor([[0.1, 0.9, 0, 0, 0, 0], [0.8, 0.1, 0, 0, 0, 0.05]])
    res = topk_accuracy(logits, torch.tensor([1, 5]))
    assert res == {"top1": 0.5, "top5": 1.0}
    assert "top5" not in topk_accuracy(logits[:, :3], torch.tensor([1, 0]))


def _separable_images(seed, per_class=24):
    """Two classes that differ in brightness: separable from raw pixels."""
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for c in range(2):
        for _ in range(per_class):
            base = 40 + 170 * c
            imgs.append(np.clip(rng.normal(base, 20, (16, 16, 3)), 0, 255).astype(np.uint8))
            labels.append(c)
    return LabeledImages(np.stack(imgs), np.array(labels), 2, (0.5,) * 3, (0.25,) * 3, 16)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_encoder_beats_chance(seed):
    torch.manual_seed(seed)
    net, _ = build_networks(tiny_config())
    res = linear_eval(net, _separable_images(seed), _separable_images(seed + 10), LinearRecipe(epochs=10))
    assert res["top1"] > 0.5
    assert knn_eval(net, _separable_images(seed), _separable_images(seed + 10), [5])["best_acc"] > 0.5


def test_linear_eval_input_modes():
    net, _ = build_networks(tiny_config())
    data = _separable_images(0)
    with pytest.raises(ValueError):
        linear_eval(net, data, data, LinearRecipe(epochs=1), input_mode="both")
    res = linear_eval(net, data, data, LinearRecipe(epochs=2), input_mode="hypercolumn")
    assert 0.0 <= res["top1"] <= 1.0


# ---- semi-supervised --------------------------------------------------------
def test_recipe_selection():
    assert recipe_for_fraction(0.01).head_lr == 0.5 and recipe_for_fraction(0.01).backbone_lr == 1e-4
    assert recipe_for_fraction(0.1).head_lr == 0.2 and recipe_for_fraction(0.1).backbone_lr == 2e-4
    assert recipe_for_fraction(0.1).milestones == (30, 40) and recipe_for_fraction(0.1).epochs == 50
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            recipe_for_fraction(bad)


def test_labeled_subset():
    idx = labeled_subset(1000, 0.01, seed=3)
    assert len(idx) == 10 and len(set(idx.tolist())) == 10
    assert np.array_equal(idx, labeled_subset(1000, 0.01, seed=3))
    assert np.array_equal(labeled_subset(50, 1.0), np.arange(50))


def test_full_fraction_is_supervised_finetuning():
    net, _ = build_networks(tiny_config())
    data = _separable_images(0, per_class=16)
    recipe = recipe_for_fraction(1.0)
    short = type(recipe)(head_lr=recipe.head_lr, backbone_lr=recipe.backbone_lr, epochs=3, batch_size=16,
                         milestones=(2,))
    res = semi_supervised_finetune(net, data, _separable_images(5, per_class=16), 1.0, recipe=short)
    assert res["top1"] > 0.5


# ---- precision / recall of teacher distributions ----------------------------
def test_pr_hand_counts():
    # M=6 bank with labels, two queries
    bank_labels = torch.tensor([0, 0, 1, 1, 2, 2])
    dists = torch.tensor([[0.30, 0.25, 0.20, 0.05, 0.15, 0.05],
                          [0.02, 0.08, 0.40, 0.30, 0.10, 0.10]])
    query_labels = torch.tensor([0, 1])
    [rec] = pr_counts(dists, query_labels, bank_labels, [0.12])
    # predicted: q0 -> {0,1,2,4}; q1 -> {2,3}; true positives: q0 {0,1}, q1 {2,3}
    assert (rec["predicted"], rec["true_positive"], rec["positives"]) == (6, 4, 4)
    rec = pr_from_counts(rec)
    assert rec["precision"] == pytest.approx(4 / 6) and rec["recall"] == 1.0
    assert oracles.pr_counts(dists.tolist(), [0, 1], bank_labels.tolist(), 0.12) == (6, 4, 4)


def test_pr_boundaries():
    dists = torch.softmax(torch.randn(3, 8, generator=torch.Generator().manual_seed(0)), dim=1)
    labels = torch.tensor([0, 1, 0])
    bank_labels = torch.tensor([0, 1, 0, 1, 0, 1, 0, 1])
    above, zero = pr_counts(dists, labels, bank_labels, [float(dists.max()) + 1e-6, 0.0])
    above = pr_from_counts(above)
    assert above["predicted"] == 0 and above["precision"] == 1.0 and above["zero_support"]
    assert pr_from_counts(zero)["recall"] == 1.0


def test_pr_thresholds_scale_with_bank():
    assert pr_thresholds(100) == [(1.0, 0.01), (2.0, 0.02), (5.0, 0.05), (10.0, 0.1), (20.0, 0.2), (50.0, 0.5)]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(2, 10), batch=st.integers(1, 5))
def test_pr_matches_exhaustive_counting(seed, m, batch):
    gen = torch.Generator().manual_seed(seed)
    dists = torch.softmax(3 * torch.randn(batch, m, generator=gen, dtype=torch.float64), dim=1)
    bank_labels = torch.randint(0, 3, (m,), generator=gen)
    labels = torch.randint(0, 3, (batch,), generator=gen)
    thresholds = [a / m for a in (0.5, 1, 2, 5)]
    counts = pr_counts(dists, labels, bank_labels, thresholds)
    recalls = []
    for thr, rec in zip(thresholds, counts):
        ref = oracles.pr_counts(dists.tolist(), labels.tolist(), bank_labels.tolist(), thr)
        assert (rec["predicted"], rec["true_positive"], rec["positives"]) == ref
        recalls.append(pr_from_counts(rec)["recall"])
    assert all(b <= a for a, b in zip(recalls, recalls[1:]))


def test_pr_requires_labeled_bank():
    with pytest.raises(ValueError):
        pr_counts(torch.ones(1, 2) / 2, torch.tensor([0]), torch.tensor([0, -1]), [0.1])


# ---- embedding export ----------------------------------------------------------
def test_export_round_trip_and_determinism(tmp_path):
    net, _ = build_networks(tiny_config())
    data = _separable_images(0, per_class=5)
    for layer, dim in (("pooled", 128), ("hypercolumn", 128), ("projected", 32)):
        a = export_embeddings(net, data, layer, tmp_path / f"{layer}.bin")
        b = export_embeddings(net, data, layer, tmp_path / f"{layer}-again.bin")
        assert a.read_bytes() == b.read_bytes()
        header, ids, labels, vectors = read_embeddings(a)
        assert header["count"] == len(data) == len(ids) == len(labels)
        assert vectors.shape == (len(data), dim) and header["layer"] == layer
        assert np.array_equal(labels, data.labels)


def test_embedding_file_rejects_foreign_bytes(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"not an embedding file")
    with pytest.raises(ValueError):
        read_embeddings(path)
    out = write_embeddings(tmp_path / "y.bin", np.arange(2), np.array([1, 0]), np.ones((2, 3)), "pooled")
    assert read_embeddings(out)[3].dtype == np.float32
