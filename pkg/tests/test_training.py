from dataclasses import replace

import numpy as np
import pytest

from attnpatch import tensor as T
from attnpatch.data import LabeledSet, ModalDataset, apply_split, make_split
from attnpatch.models import ModelSpec, build, forward
from attnpatch.optim import Adam
from attnpatch.tap import ReferenceBank
from attnpatch.training import (
    NumericAbort,
    TrainConfig,
    batch_size_sweep,
    evaluate,
    final_metric,
    majority_vote,
    monte_carlo,
    predict,
    RunCache,
    run_key,
    run_variant,
    train,
)


def toy_dataset(n=400, seed=0):
    """Three informative primary features; the secondary view carries the label too."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, size=n)
    X = rng.normal(size=(n, 4)) + np.eye(3, 4)[y] * 4.0
    Z = rng.normal(size=(n, 5)) + np.eye(3, 5)[y] * 3.0
    return ModalDataset("toy", X, Z, y, 3, standardize=True)


TOY = dict(n_labeled=40, n_reference=100, ref_batch=25, data_batch=20, epochs_base=8, lr=1e-2, hidden_dim=8)


def toy_cfg(**kw):
    return TrainConfig(**{**TOY, **kw})


class TestAdam:
    def test_first_step_moves_by_lr(self):
        w = T.parameter(np.array([1.0]))
        opt = Adam([w], lr=0.1)
        T.reduce_sum(T.square(w)).backward()
        opt.step()
        assert w.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_minimises_quadratic(self):
        w = T.parameter(np.array([3.0, -2.0]))
        opt = Adam([w], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            T.reduce_sum(T.square(w)).backward()
            opt.step()
        assert np.all(np.abs(w.data) < 0.05)

    def test_state_round_trip(self):
        w = T.parameter(np.array([1.0, 2.0]))
        opt = Adam([w], lr=0.1)
        T.reduce_sum(T.square(w)).backward()
        opt.step()
        other = Adam([T.parameter(np.zeros(2))])
        other.load_state_dict(opt.state_dict())
        assert other.t == 1 and np.array_equal(other.m[0], opt.m[0])


class TestVoting:
    def test_majority(self):
        assert majority_vote([[2], [2], [7], [2]]).tolist() == [2]

    def test_tie_goes_to_lowest(self):
        assert majority_vote([[1], [3]]).tolist() == [1]
        assert majority_vote([[3], [1]]).tolist() == [1]

    def test_single_vote_is_argmax(self, rng):
        logits = rng.normal(size=(50, 6))
        np.testing.assert_array_equal(majority_vote([logits.argmax(axis=1)], 6), logits.argmax(axis=1))

    def test_single_batch_ensemble_equals_argmax(self, rng):
        spec = ModelSpec("tap", 4, 3, ref_dim=5, hidden_dim=8, ref_batch=100, n_reference=100)
        model = build(spec, 0)
        bank = ReferenceBank(rng.normal(size=(100, 5)), 100)
        X, y = rng.normal(size=(60, 4)), rng.integers(0, 3, 60)
        plain = forward(model, X, bank.batch(0)).data.argmax(axis=1)
        np.testing.assert_array_equal(predict(model, X, bank), plain)
        assert evaluate(model, LabeledSet(X, y), bank) == np.mean(plain == y)

    def test_empty_eval(self):
        model = build(ModelSpec("baseline", 2, 2), 0)
        with pytest.raises(ValueError):
            evaluate(model, LabeledSet(np.zeros((0, 2)), np.zeros(0, int)))


class TestFinalMetric:
    def test_constant(self):
        for mode in ("best5", "literal_lowest5"):
            assert final_metric([0.8] * 9, mode) == pytest.approx(0.8)

    def test_window_extremes(self):
        h = [0] * 5 + [1] * 5
        assert final_metric(h, "best5") == 1.0
        assert final_metric(h, "literal_lowest5") == 0.0

    def test_ramp(self):
        assert final_metric(np.arange(10) / 10, "best5") == pytest.approx(0.7)

    def test_short_history(self):
        with pytest.raises(ValueError):
            final_metric([0.5] * 4)


class TestBudget:
    def test_protocol_default(self):
        cfg = TrainConfig()
        assert cfg.num_ref_batches("tap") == 4
        assert cfg.epochs_for("tap") == 250 and cfg.epochs_for("control_group") == 250
        assert cfg.epochs_for("baseline") == 1000 and cfg.epochs_for("tap_no_batch") == 1000

    def test_single_batch_limit(self):
        cfg = TrainConfig(ref_batch=1000)
        assert cfg.num_ref_batches("tap") == 1 and cfg.epochs_for("tap") == 1000

    def test_step_counts_match(self):
        ds = toy_dataset()
        cfg = toy_cfg()
        base, _, _ = run_variant(ds, "baseline", cfg)
        tap, _, bank = run_variant(ds, "tap", cfg)
        assert bank.m == 4 and tap.epochs == 2
        per_epoch = cfg.n_labeled // cfg.data_batch
        assert base.steps == 8 * per_epoch
        assert abs(tap.steps - base.steps) <= per_epoch * bank.m

    def test_bad_metric_mode(self):
        with pytest.raises(ValueError):
            TrainConfig(metric_mode="median")


class TestTrain:
    def test_learns_toy_problem(self):
        result, _, _ = run_variant(toy_dataset(), "baseline", toy_cfg(epochs_base=40))
        assert result.val_accuracy[-1] > 0.8
        assert result.train_loss[-1] < result.train_loss[0]
        assert len(result.val_accuracy) == 40 and result.final_metric is not None

    def test_tap_learns_toy_problem(self):
        result, _, _ = run_variant(toy_dataset(), "tap", toy_cfg(epochs_base=80))
        assert result.val_accuracy[-1] > 0.8

    def test_reproducible(self):
        a, _, _ = run_variant(toy_dataset(), "tap", toy_cfg(seed=3))
        b, _, _ = run_variant(toy_dataset(), "tap", toy_cfg(seed=3))
        assert a.val_accuracy == b.val_accuracy and a.train_loss == b.train_loss

    def test_non_finite_loss_aborts(self):
        ds = toy_dataset()
        split = apply_split(ds, make_split(ds, 0, 40, 100))
        bad = replace(split, labeled=LabeledSet(np.full_like(split.labeled.X, np.nan), split.labeled.y))
        model = build(ModelSpec("baseline", 4, 3, hidden_dim=8), 0)
        with pytest.raises(NumericAbort, match="lr=0.01, epoch=0"):
            train(model, bad, toy_cfg(), rng=0)

    def test_bank_contract(self):
        ds = toy_dataset()
        split = apply_split(ds, make_split(ds, 0, 40, 100))
        with pytest.raises(ValueError):
            train(build(ModelSpec("tap", 4, 3, ref_dim=5, hidden_dim=8), 0), split, toy_cfg())


class TestMonteCarlo:
    def test_rows_and_determinism(self):
        cfg = toy_cfg(mc_runs=2, epochs_base=5)
        rows, results = monte_carlo(toy_dataset(), cfg=cfg)
        assert [r["variant"] for r in rows] == ["baseline", "ffn", "control_group", "tap", "tap_no_batch"]
        again, _ = monte_carlo(toy_dataset(), variants=["tap"], cfg=cfg)
        assert again[0]["mean"] == rows[3]["mean"]
        for row in rows:
            metrics = [r.final_metric for r in results[row["variant"]]]
            assert row["mean"] == pytest.approx(np.mean(metrics), rel=1e-15)
            assert row["runs"] == 2 and row["failed"] == 0

    def test_noise_bank_differs_across_runs(self):
        cfg = toy_cfg(mc_runs=2, epochs_base=5)
        _, results = monte_carlo(toy_dataset(), variants=["control_group"], cfg=cfg)
        hashes = {r.bank_hash for r in results["control_group"]}
        assert len(hashes) == 2

    def test_needs_two_runs(self):
        with pytest.raises(ValueError):
            monte_carlo(toy_dataset(), cfg=toy_cfg(mc_runs=1))

    def test_sweep_points(self):
        cfg = toy_cfg(mc_runs=2, epochs_base=10, n_reference=100)
        points, baseline = batch_size_sweep(toy_dataset(), sizes=(10, 20, 25, 50, 100), cfg=cfg)
        assert len(points) == 5
        assert [p["ratio"] for p in points] == [0.25, 0.5, 0.625, 1.25, 2.5]
        assert [p["m"] for p in points] == [10, 5, 4, 2, 1]
        assert [p["epochs"] for p in points] == [1, 2, 2, 5, 10]
        assert baseline["kind"] == "baseline"

    def test_sweep_clamps_oversized_batch(self):
        cfg = toy_cfg(mc_runs=2, epochs_base=5)
        with pytest.warns(UserWarning, match="clamped"):
            points, _ = batch_size_sweep(toy_dataset(), sizes=(500,), cfg=cfg)
        assert points[0]["ref_batch"] == 100 and points[0]["m"] == 1


class TestRunCache:
    def test_full_bank_tap_is_tap_no_batch(self):
        ds, cfg = toy_dataset(), toy_cfg()
        a, _, _ = run_variant(ds, "tap", cfg, ref_batch=100, epochs=8)
        b, _, _ = run_variant(ds, "tap_no_batch", cfg)
        assert a.val_accuracy == b.val_accuracy and a.train_loss == b.train_loss
        assert run_key(ds, "tap", cfg, 0, 100, 8) == run_key(ds, "tap_no_batch", cfg, 0)
        assert run_key(ds, "tap", cfg, 0) != run_key(ds, "tap", cfg, 1)

    def test_reuse_and_metric_mode(self, tmp_path):
        ds, cfg = toy_dataset(), toy_cfg(mc_runs=2, epochs_base=6)
        cache = RunCache(tmp_path / "runs.jsonl")
        rows, _ = monte_carlo(ds, variants=["baseline", "tap"], cfg=cfg, cache=cache)
        assert len(cache) == 4
        reloaded = RunCache(tmp_path / "runs.jsonl")
        again, _ = monte_carlo(ds, variants=["baseline", "tap"], cfg=cfg, cache=reloaded)
        assert again == rows and len(reloaded) == 4
        low, res = monte_carlo(ds, variants=["tap"], cfg=replace(cfg, metric_mode="literal_lowest5"), cache=reloaded)
        assert res["tap"][0].metric_mode == "literal_lowest5"
        assert low[0]["mean"] <= rows[1]["mean"]
