import logging
import math

import numpy as np
import pytest

from sympcam import training
from sympcam.errors import ConfigError, LeakageError, TrainingError
from sympcam.model import ModelConfig, load_checkpoint
from sympcam.preprocess import PreparedSession
from sympcam.training import (
    FoldSplit,
    LeakageGuard,
    TrainConfig,
    aggregate,
    loso_splits,
    predict_full,
    predict_participant,
    run_experiment,
    table_markdown,
    train_fold,
)

TINY = ModelConfig(T=32, reduction=4, widths=(4, 4, 4), input_size=16)
FAST = TrainConfig(epochs=2, seeds=(0,))


class TestLoso:
    def test_eighteen_participants(self):
        ids = [f"S{i:02d}" for i in range(18)]
        folds = loso_splits(ids)
        assert len(folds) == 18
        assert sorted(f.test_id for f in folds) == ids
        for f in folds:
            assert f.test_id not in f.train_ids and f.val_id not in f.train_ids
            assert {f.test_id, f.val_id, *f.train_ids} == set(ids)

    def test_three_participants(self):
        folds = loso_splits(["c", "a", "b"])
        assert [(f.test_id, f.val_id, f.train_ids) for f in folds] == [
            ("a", "b", ("c",)), ("b", "c", ("a",)), ("c", "a", ("b",))]

    def test_too_few_or_duplicate(self):
        with pytest.raises(ConfigError):
            loso_splits(["a", "b"])
        with pytest.raises(ConfigError):
            loso_splits(["a", "b", "b", "c"])

    def test_fold_ids_distinct(self):
        with pytest.raises(ConfigError):
            FoldSplit("a", "a", ("b",))


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.learning_rate, len(cfg.seeds)) == (4, 30, 1e-3, 3)

    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": 0.0},
                                        {"seeds": ()}, {"target_kind": "phasic"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestAggregate:
    def test_hand_computed(self):
        rows = [{"seed": s, "rho_raw": v, "rho_tonic": v}
                for s, vals in enumerate([(0.5, 0.7, 0.9), (0.4, 0.6, 0.8), (0.6, 0.6, 0.6)]) for v in vals]
        out = aggregate(rows, "rho_tonic")
        means = [0.7, 0.6, 0.6]
        stds = [math.sqrt(((0.2 ** 2) * 2) / 3)] * 2 + [0.0]
        np.testing.assert_allclose(out["mean"], sum(means) / 3, rtol=1e-12)
        np.testing.assert_allclose(out["mean_sd"], math.sqrt(sum((m - sum(means) / 3) ** 2 for m in means) / 3), rtol=1e-9)
        np.testing.assert_allclose(out["std"], sum(stds) / 3, rtol=1e-9)
        np.testing.assert_allclose(out["std_sd"], np.std(stds), rtol=1e-9)

    def test_single_seed(self):
        rows = [{"seed": 0, "rho_tonic": v} for v in (0.5, 0.7, 0.9)]
        out = aggregate(rows, "rho_tonic")
        np.testing.assert_allclose(out["mean"], 0.7)
        assert out["mean_sd"] == 0.0

    def test_markdown_layout(self):
        summ = {k: {"mean": 0.77, "mean_sd": 0.02, "std": 0.1, "std_sd": 0.01} for k in ("rho_raw", "rho_tonic")}
        md = table_markdown([("Ours", 768, summ)])
        assert "| Ours | 768 | 0.77 ± 0.02 | 0.10 ± 0.01 | 0.77 ± 0.02 | 0.10 ± 0.01 |" in md


class TestLeakageGuard:
    def test_raises_on_held_out(self):
        guard = LeakageGuard(["P01"])
        guard.check(["P00", "P02"])
        with pytest.raises(LeakageError):
            guard.check(["P00", "P01"])
        assert guard.checks == 2


class TestTrainFold:
    def test_improves_validation_and_records_history(self, small_prepared):
        fold = loso_splits(list(small_prepared))[0]
        out = train_fold(fold, small_prepared, TINY, TrainConfig(epochs=3, seeds=(0,)), seed=0)
        assert [h["epoch"] for h in out.history] == [0, 1, 2, 3]
        assert out.history[0]["train_loss"] is None
        best = out.history[out.best_epoch]["val_loss"]
        assert best < out.history[0]["val_loss"]
        assert best == min(h["val_loss"] for h in out.history[1:])
        assert out.predictions.shape == (len(range(0, 600 - 32, 32)) * 32,)

    def test_deterministic_history(self, small_prepared):
        fold = loso_splits(list(small_prepared))[1]
        a = train_fold(fold, small_prepared, TINY, FAST, seed=4)
        b = train_fold(fold, small_prepared, TINY, FAST, seed=4)
        assert a.history == b.history
        np.testing.assert_array_equal(a.predictions, b.predictions)

    def test_nan_loss_aborts_with_diagnostics(self, small_prepared):
        sessions = dict(small_prepared)
        p = sessions["P02"]
        bad = np.array(p.tonic)
        bad[5] = np.nan
        sessions["P02"] = PreparedSession("P02", p.frames, p.eda, bad, p.fs)
        fold = FoldSplit("P00", "P01", ("P02",))
        with pytest.raises(TrainingError, match="lr=0.001"):
            train_fold(fold, sessions, TINY, FAST, seed=0)

    def test_guard_sees_every_training_batch(self, small_prepared):
        fold = loso_splits(list(small_prepared))[2]
        guard = LeakageGuard([fold.test_id, fold.val_id])
        train_fold(fold, small_prepared, TINY, FAST, seed=0, guard=guard)
        n_windows = len(range(0, 600 - 32, 32))
        assert guard.windows_seen == FAST.epochs * n_windows


class TestPrediction:
    def test_full_coverage(self, small_prepared):
        from sympcam.model import build_model

        model = build_model(TINY)
        p = small_prepared["P00"]
        frames = p.frames[:250]
        full = predict_full(model, frames, 32)
        assert full.shape == (249,)
        stitched = predict_participant(model, PreparedSession("P00", frames, p.eda[:250], p.tonic[:250]), 32)
        np.testing.assert_allclose(full[:len(stitched)], stitched, rtol=1e-6)


@pytest.fixture(scope="module")
def experiment(small_prepared, tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    table = run_experiment(small_prepared, TINY, TrainConfig(epochs=1, seeds=(0, 1)), out)
    return table, out


class TestRunExperiment:
    def test_one_row_per_participant_and_seed(self, experiment):
        table, _ = experiment
        cells = [(r["participant"], r["seed"]) for r in table.rows]
        assert sorted(cells) == [(p, s) for p in ("P00", "P01", "P02") for s in (0, 1)]
        assert all(-1 <= r["rho_tonic"] <= 1 for r in table.ok_rows())
        assert table.leakage_checks > 0

    def test_checkpoints_and_predictions(self, experiment):
        _, out = experiment
        model, extra = load_checkpoint(out / "checkpoints" / "T32" / "seed1" / "fold_P02.pt")
        assert model.config == TINY
        assert extra["fold"]["test_id"] == "P02" and extra["seed"] == 1
        assert (out / "predictions" / "T32_seed0_P00.npy").is_file()

    def test_csv(self, experiment, tmp_path):
        table, _ = experiment
        table.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "participant,seed,rho_raw,rho_tonic,best_epoch,status"
        assert len(lines) == 7

    def test_failed_fold_excluded(self, small_prepared, monkeypatch, caplog):
        real = training.train_fold

        def flaky(fold, *args, **kwargs):
            if fold.test_id == "P01":
                raise TrainingError("boom")
            return real(fold, *args, **kwargs)

        monkeypatch.setattr(training, "train_fold", flaky)
        with caplog.at_level(logging.WARNING):
            table = run_experiment(small_prepared, TINY, TrainConfig(epochs=1, seeds=(0,)))
        status = {r["participant"]: r["status"] for r in table.rows}
        assert status == {"P00": "ok", "P01": "failed", "P02": "ok"}
        assert "excluded from aggregation" in caplog.text
        assert not math.isnan(table.summary()["rho_tonic"]["mean"])
