"""Training-engine tests: loss, optimizer, schedule, splits, CV, grid search."""

import csv
import math

import numpy as np
import pytest

from icuxai import autodiff as ad
from icuxai.autodiff import Tape
from icuxai.model import ModelConfig, TriModalNet
from icuxai.records import CLS_ID, PAD_ID, MultimodalDataset
from icuxai.training import (
    Adam,
    TrainConfig,
    clip_global_norm,
    cross_entropy,
    cross_validate,
    grid_search,
    lr_schedule,
    make_split_plan,
    train_model,
    upsample_positives,
    validate_search_config,
    weighted_ce_from_logits,
    write_results_csv,
)


# --- loss -----------------------------------------------------------------------

def test_cross_entropy_pinned_values():
    assert cross_entropy(1, 1.0) == pytest.approx(0.0, abs=1e-9)
    assert cross_entropy(1, 0.5, 1.0) == pytest.approx(math.log(2.0), rel=1e-12)
    assert cross_entropy(1, 0.5, 2.0) == pytest.approx(2.0 * math.log(2.0), rel=1e-12)
    assert cross_entropy(0, 0.5) == pytest.approx(math.log(2.0), rel=1e-12)


def test_cross_entropy_clamps_instead_of_diverging():
    worst = -math.log(1e-12)
    assert cross_entropy(1, 0.0) == pytest.approx(worst, rel=1e-9)
    # the y=0 branch evaluates log(1 - p) after clamping p to 1 - 1e-12;
    # the subtraction cancels catastrophically, so only ~1e-4 relative
    # accuracy of the clamp floor is guaranteed — finiteness is the contract
    assert cross_entropy(0, 1.0) == pytest.approx(worst, rel=1e-3)


def test_tape_loss_agrees_with_scalar_cross_entropy():
    rng = np.random.default_rng(0)
    logits_arr = rng.normal(size=(8, 2)) * 2.0
    labels = rng.integers(0, 2, size=8)
    w = 2.5
    tape = Tape()
    loss = weighted_ce_from_logits(tape.leaf(logits_arr), labels, w)
    e = np.exp(logits_arr - logits_arr.max(axis=1, keepdims=True))
    p1 = (e / e.sum(axis=1, keepdims=True))[:, 1]
    want = np.mean([cross_entropy(int(y), p, w) for y, p in zip(labels, p1)])
    assert float(loss.data) == pytest.approx(want, rel=1e-9)


def test_tape_loss_is_finite_at_extreme_logits():
    logits = np.array([[1000.0, -1000.0], [-1000.0, 1000.0]])
    tape = Tape()
    loss = weighted_ce_from_logits(tape.leaf(logits), np.array([0, 1]))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)
    ad.backward(loss)  # gradients must exist and be finite
    assert np.all(np.isfinite(tape.grads[0]))


def test_tape_loss_gradient_matches_central_differences():
    labels = np.array([1, 0, 1])

    def f(x):
        return weighted_ce_from_logits(x, labels, 1.7)

    point = np.random.default_rng(1).normal(size=(3, 2))
    assert ad.grad_check(f, point, step=1e-5) < 1e-7


# --- optimizer -------------------------------------------------------------------

def make_store(values):
    from icuxai.blocks import ParamStore
    store = ParamStore()
    for k, v in values.items():
        store.add(k, v)
    return store


def test_adam_first_step_is_signed_learning_rate():
    store = make_store({"w": np.array([2.0, -3.0])})
    g = np.array([0.1, -0.2])
    Adam().step(store, {"w": g}, lr=0.01)
    # first bias-corrected step is lr * g / (|g| + eps) = lr * sign(g) up to eps
    np.testing.assert_allclose(store["w"], [2.0 - 0.01, -3.0 + 0.01], rtol=1e-6)


def test_adam_zero_gradient_means_zero_update():
    store = make_store({"w": np.array([1.0, 2.0])})
    Adam().step(store, {"w": np.zeros(2)}, lr=0.5)
    np.testing.assert_array_equal(store["w"], [1.0, 2.0])


def test_adam_skips_parameters_without_gradients():
    store = make_store({"w": np.array([1.0]), "frozen": np.array([5.0])})
    Adam().step(store, {"w": np.array([1.0])}, lr=0.1)
    assert store["frozen"][0] == 5.0
    assert store["w"][0] != 1.0


def test_adam_rejects_non_finite_gradients():
    store = make_store({"w": np.array([1.0])})
    with pytest.raises(ValueError, match="non-finite"):
        Adam().step(store, {"w": np.array([np.inf])}, lr=0.1)


def test_adam_trajectories_are_deterministic():
    runs = []
    for _ in range(2):
        store = make_store({"w": np.array([0.3, -0.7])})
        opt = Adam()
        rng = np.random.default_rng(7)
        for _ in range(5):
            opt.step(store, {"w": rng.normal(size=2)}, lr=0.05)
        runs.append(store["w"].copy())
    np.testing.assert_array_equal(runs[0], runs[1])


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8])
    small = {"a": np.array([0.3])}
    same, norm2 = clip_global_norm(small, 1.0)
    assert norm2 == pytest.approx(0.3)
    np.testing.assert_array_equal(same["a"], [0.3])


def test_lr_schedule_decays_every_ten_epochs():
    assert lr_schedule(1e-3, 0) == 1e-3
    assert lr_schedule(1e-3, 9) == 1e-3
    assert lr_schedule(1e-3, 10) == pytest.approx(0.98e-3)
    assert lr_schedule(1e-3, 25) == pytest.approx(0.9604e-3)
    with pytest.raises(ValueError):
        lr_schedule(1e-3, -1)


# --- rebalancing ---------------------------------------------------------------------

def test_upsample_reaches_class_parity():
    labels = np.array([1] * 364 + [0] * 3183)
    idx = upsample_positives(labels, np.random.default_rng(0))
    assert idx.size == 2 * 3183
    assert int(np.sum(labels[idx] == 1)) == 3183
    assert int(np.sum(labels[idx] == 0)) == 3183
    assert set(idx) == set(range(labels.size))  # every original survives


def test_upsample_balanced_input_is_unchanged_as_multiset():
    labels = np.array([1, 0, 1, 0])
    idx = upsample_positives(labels, np.random.default_rng(0))
    assert sorted(idx.tolist()) == [0, 1, 2, 3]


def test_upsample_is_seed_deterministic():
    labels = np.array([1, 0, 0, 0, 1, 0])
    a = upsample_positives(labels, np.random.default_rng(5))
    b = upsample_positives(labels, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_upsample_without_positives_is_an_error():
    with pytest.raises(ValueError, match="no positive"):
        upsample_positives(np.zeros(4, dtype=int), np.random.default_rng(0))


# --- split plans ------------------------------------------------------------------------

def test_split_plan_partitions_and_stratifies():
    rng = np.random.default_rng(0)
    labels = (rng.random(100) < 0.2).astype(np.int64)
    plan = make_split_plan(labels, k=5, seed=3)
    assert np.all((plan.folds >= 0) & (plan.folds < 5))
    seen = np.zeros(100, dtype=int)
    pos_counts = []
    for fold in range(5):
        train, test = plan.split(fold)
        assert np.intersect1d(train, test).size == 0
        assert np.union1d(train, test).size == 100
        seen[test] += 1
        pos_counts.append(int(np.sum(labels[test])))
    assert np.all(seen == 1)  # the folds partition the data
    assert max(pos_counts) - min(pos_counts) <= 1  # stratified


def test_split_plan_train_val_is_stratified_and_disjoint():
    labels = np.array([1] * 20 + [0] * 80)
    plan = make_split_plan(labels, k=5, val_fraction=0.2, seed=0)
    train, test = plan.split(0)
    fit, val = plan.train_val(0, labels)
    assert np.intersect1d(fit, val).size == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([fit, val])), np.sort(train))
    assert np.sum(labels[val] == 1) >= 1
    assert np.sum(labels[val] == 0) >= 1
    assert val.size == pytest.approx(0.2 * train.size, abs=2)


def test_split_plan_needs_enough_of_each_class():
    labels = np.array([1, 1, 0, 0, 0, 0, 0, 0])
    with pytest.raises(ValueError, match="stratify"):
        make_split_plan(labels, k=5)
    with pytest.raises(ValueError, match="k-fold"):
        make_split_plan(np.array([0, 1]), k=1)


def test_split_plan_rejects_bad_fold_index():
    plan = make_split_plan(np.array([0, 1] * 10), k=2)
    with pytest.raises(ValueError, match="fold"):
        plan.split(5)


# --- end-to-end training -----------------------------------------------------------------

TINY = dict(width=8, heads=2, ffn_width=16, dropout=0.0,
            event_blocks=1, note_blocks=1, vitals_blocks=1,
            event_hours=4, event_dim=5, note_len=6, vocab_size=20,
            vitals_steps=6, vitals_channels=3, fusion_hidden=8)


def separable_dataset(n=50, seed=0, planted=3.0):
    """Half positive, half negative; positives carry an obvious bump in
    events feature 2 so a tiny model can overfit quickly."""
    rng = np.random.default_rng(seed)
    labels = np.array([1, 0] * (n // 2), dtype=np.int64)
    events = rng.normal(size=(n, 4, 5)) * 0.3
    events[labels == 1, :, 2] += planted
    notes = np.full((n, 6), PAD_ID, dtype=np.int64)
    notes[:, 0] = CLS_ID
    notes[:, 1:3] = rng.integers(3, 20, size=(n, 2))
    vitals = rng.normal(size=(n, 6, 3)) * 0.3
    return MultimodalDataset(events=events, events_mask=np.ones_like(events),
                             notes=notes, vitals=vitals, labels=labels,
                             ids=[f"r{i}" for i in range(n)])


def test_training_loss_drops_ninety_percent_on_separable_data():
    ds = separable_dataset()
    model = TriModalNet(ModelConfig(**TINY, seed=0))
    config = TrainConfig(batch_size=50, learning_rate=0.01, epochs=200,
                         upsample=False, dropout=0.0, seed=0)
    result = train_model(model, ds, config)
    first, last = result.history[0]["loss"], result.history[-1]["loss"]
    assert len(result.history) == 200
    assert last <= 0.1 * first, f"loss only went {first:.4f} -> {last:.4f}"


def test_early_stopping_restores_the_best_weights():
    ds = separable_dataset(n=40, seed=1)
    model = TriModalNet(ModelConfig(**TINY, seed=1))
    # learning rate so small that validation AUC cannot improve after
    # the first epoch: patience must trigger and training must stop early
    config = TrainConfig(batch_size=40, learning_rate=1e-12, epochs=80,
                         upsample=False, patience=2, seed=0)
    fit_idx = np.arange(0, 30)
    val_idx = np.arange(30, 40)
    result = train_model(model, ds, config, fit_idx, val_idx)
    assert result.stopped_early
    assert len(result.history) < 80
    assert result.best_val_auc is not None
    from icuxai.metrics import auc_roc
    probs = model.predict_proba(ds.events[val_idx], ds.notes[val_idx],
                                ds.vitals[val_idx])
    assert auc_roc(ds.labels[val_idx], probs[:, 1]) == pytest.approx(
        result.best_val_auc, abs=1e-12)


def test_training_only_touches_active_modalities():
    ds = separable_dataset(n=20, seed=2)
    model = TriModalNet(ModelConfig(**TINY, seed=2))
    before = model.params.snapshot()
    config = TrainConfig(batch_size=10, learning_rate=0.01, epochs=2,
                         upsample=False, seed=0)
    train_model(model, ds, config, active=("events",))
    changed = {n for n in model.params.names()
               if not np.array_equal(model.params[n], before[n])}
    assert any(n.startswith("events.") for n in changed)
    assert not any(n.startswith(("notes.", "vitals.")) for n in changed)


def test_training_is_seed_deterministic():
    outs = []
    for _ in range(2):
        ds = separable_dataset(n=20, seed=3)
        model = TriModalNet(ModelConfig(**TINY, seed=3))
        config = TrainConfig(batch_size=8, learning_rate=0.01, epochs=3,
                             dropout=0.2, seed=11)
        train_model(model, ds, config)
        outs.append(model.predict_proba(ds.events, ds.notes, ds.vitals))
    np.testing.assert_array_equal(outs[0], outs[1])


def test_cross_validate_reports_per_fold_metrics():
    ds = separable_dataset(n=30, seed=4)
    plan = make_split_plan(ds.labels, k=3, seed=0)
    config = TrainConfig(batch_size=16, learning_rate=0.01, epochs=3,
                         upsample=False, seed=0)
    rows = cross_validate(ds, lambda: TriModalNet(ModelConfig(**TINY, seed=4)),
                          config, plan)
    assert len(rows) == 3
    assert sum(r["n_test"] for r in rows) == 30
    for r in rows:
        assert 0.0 <= r["auc_roc"] <= 1.0
        assert 0.0 <= r["auc_pr"] <= 1.0


# --- grid search ----------------------------------------------------------------------

def test_validate_search_config_enforces_table_ranges():
    ok = TrainConfig(batch_size=16, learning_rate=5e-4, dropout=0.3,
                     encoder_blocks=2, heads=4, class_weight=2.0)
    validate_search_config(ok, "vitals")
    with pytest.raises(ValueError, match="batch_size"):
        validate_search_config(ok, "events")  # events want 128/256/512
    with pytest.raises(ValueError, match="learning_rate"):
        validate_search_config(
            TrainConfig(batch_size=16, learning_rate=5e-4, dropout=0.3,
                        encoder_blocks=6, heads=4), "notes")
    with pytest.raises(ValueError, match="encoder_blocks"):
        validate_search_config(
            TrainConfig(batch_size=16, learning_rate=5e-5, dropout=0.3,
                        encoder_blocks=2, heads=4), "notes")  # notes want 5-10
    with pytest.raises(ValueError, match="unknown modality"):
        validate_search_config(ok, "imaging")


def test_grid_search_picks_deterministic_winner(tmp_path):
    ds = separable_dataset(n=30, seed=5)
    plan = make_split_plan(ds.labels, k=2, seed=0)
    configs = [
        TrainConfig(batch_size=16, learning_rate=1e-2, epochs=3, upsample=False,
                    seed=0, heads=2, encoder_blocks=1, dropout=0.0),
        TrainConfig(batch_size=16, learning_rate=1e-7, epochs=3, upsample=False,
                    seed=0, heads=2, encoder_blocks=1, dropout=0.0),
    ]

    def build(cfg):
        return TriModalNet(ModelConfig(**{**TINY, "heads": cfg.heads,
                                          "dropout": cfg.dropout}, seed=5))

    csv_path = tmp_path / "grid.csv"
    best1, rows = grid_search(ds, configs, build, plan, csv_path=csv_path)
    best2, _ = grid_search(ds, configs, build, plan)
    assert best1 == best2
    assert len(rows) == len(configs) * plan.k
    with open(csv_path) as fh:
        parsed = list(csv.DictReader(fh))
    assert len(parsed) == len(rows)
    assert float(parsed[0]["auc_roc"]) == rows[0]["auc_roc"]


def test_grid_search_single_config_returns_it():
    ds = separable_dataset(n=20, seed=6)
    plan = make_split_plan(ds.labels, k=2, seed=0)
    only = TrainConfig(batch_size=16, learning_rate=1e-3, epochs=2,
                       upsample=False, seed=0, heads=2, encoder_blocks=1,
                       dropout=0.0)
    best, rows = grid_search(ds, [only], lambda cfg: TriModalNet(
        ModelConfig(**TINY, seed=6)), plan)
    assert best == only
    assert len(rows) == 2


def test_grid_search_empty_space_is_an_error():
    ds = separable_dataset(n=20, seed=7)
    plan = make_split_plan(ds.labels, k=2, seed=0)
    with pytest.raises(ValueError, match="empty"):
        grid_search(ds, [], lambda cfg: None, plan)


def test_write_results_csv_round_trips_floats_exactly(tmp_path):
    rows = [{"fold": 0, "auc_roc": 1 / 3, "auc_pr": 2 / 7}]
    path = tmp_path / "r.csv"
    write_results_csv(rows, path)
    with open(path) as fh:
        back = list(csv.DictReader(fh))
    assert float(back[0]["auc_roc"]) == 1 / 3
    assert float(back[0]["auc_pr"]) == 2 / 7


def test_train_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="dropout"):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError, match="class_weight"):
        TrainConfig(class_weight=0.0)
