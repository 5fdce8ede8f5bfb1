"""Leave-one-subject-out training harness with multi-seed aggregation."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, LeakageError, TrainingError, UndefinedCorrelationError
from .evaluation import evaluate_participant
from .model import ModelConfig, build_model, clips_to_tensor, save_checkpoint
from .preprocess import TARGET_KINDS, PreparedSession, diff_normalize, diff_normalize_signal, window_starts

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldSplit:
    test_id: str
    val_id: str
    train_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "train_ids", tuple(self.train_ids))
        ids = [self.test_id, self.val_id, *self.train_ids]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"fold ids are not distinct: {ids}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    epochs: int = 30
    learning_rate: float = 1e-3
    seeds: tuple[int, ...] = (0, 1, 2)
    target_kind: str = "tonic"
    stride: Optional[int] = None
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.batch_size < 1 or self.epochs < 1 or not self.learning_rate > 0:
            raise ConfigError("batch_size, epochs and learning_rate must be positive")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.target_kind not in TARGET_KINDS:
            raise ConfigError(f"target_kind must be one of {TARGET_KINDS}")


def loso_splits(participant_ids: Sequence[str]) -> list[FoldSplit]:
    """One fold per participant; validation is the next id in sorted order (cyclic)."""
    ids = sorted(set(participant_ids))
    if len(ids) != len(participant_ids):
        raise ConfigError("participant ids must be unique")
    if len(ids) < 3:
        raise ConfigError(f"LOSO needs >= 3 participants, got {len(ids)}")
    folds = []
    for i, test in enumerate(ids):
        val = ids[(i + 1) % len(ids)]
        folds.append(FoldSplit(test, val, tuple(p for p in ids if p not in (test, val))))
    return folds


class LeakageGuard:
    """Raises if a training batch contains a window from a held-out participant."""

    def __init__(self, held_out: Sequence[str]):
        self.held_out = frozenset(held_out)
        self.checks = 0
        self.windows_seen = 0

    def check(self, participant_ids: Sequence[str]) -> None:
        self.checks += 1
        self.windows_seen += len(participant_ids)
        leaked = self.held_out.intersection(participant_ids)
        if leaked:
            raise LeakageError(f"held-out participants {sorted(leaked)} in a training batch")


class WindowSet:
    """Lazily materialized normalized windows drawn from prepared sessions."""

    def __init__(self, sessions: Sequence[PreparedSession], T: int, target_kind: str,
                 stride: Optional[int] = None):
        self.sessions = list(sessions)
        self.T = T
        self.target_kind = target_kind
        self.index = [(i, s) for i, p in enumerate(self.sessions)
                      for s in window_starts(len(p), T, stride)]

    def __len__(self):
        return len(self.index)

    def participant(self, k: int) -> str:
        return self.sessions[self.index[k][0]].participant_id

    def get(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        i, s = self.index[k]
        p = self.sessions[i]
        T = self.T
        return (diff_normalize(p.frames[s:s + T + 1]),
                diff_normalize_signal(p.target(self.target_kind)[s:s + T + 1]))

    def batch(self, ks: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
        xs, ys = zip(*(self.get(k) for k in ks))
        return (clips_to_tensor(np.stack(xs)), torch.as_tensor(np.stack(ys)),
                [self.participant(k) for k in ks])


@dataclass
class FoldOutcome:
    fold: FoldSplit
    seed: int
    history: list[dict]
    best_epoch: int
    state_dict: dict = field(repr=False)
    predictions: np.ndarray = field(repr=False)
    guard_checks: int = 0


def _set_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(deterministic)


def _mean_loss(model, windows: WindowSet, batch_size: int) -> float:
    if len(windows) == 0:
        return math.nan
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            ks = range(start, min(start + batch_size, len(windows)))
            x, y, _ = windows.batch(ks)
            total += torch.nn.functional.mse_loss(model(x), y, reduction="sum").item()
    return total / (len(windows) * windows.T)


def predict_participant(model, prepared: PreparedSession, T: int) -> np.ndarray:
    """Stitched predictions over non-overlapping windows (length ``n_windows * T``)."""
    model.eval()
    outs = []
    with torch.no_grad():
        for s in window_starts(len(prepared), T):
            x = clips_to_tensor(diff_normalize(prepared.frames[s:s + T + 1]))
            outs.append(model(x)[0].numpy().astype(np.float64))
    return np.concatenate(outs) if outs else np.zeros(0)


def predict_full(model, frames: np.ndarray, T: int) -> np.ndarray:
    """Predictions for every frame pair (length ``len(frames) - 1``).

    Non-overlapping windows as in :func:`predict_participant`, plus one final
    window aligned to the end whose trailing outputs fill the remainder.
    """
    n = len(frames) - 1
    if n < T:
        raise ValueError(f"{len(frames)} frames is shorter than one window of T={T}")
    model.eval()
    out = np.empty(n)
    covered = 0
    with torch.no_grad():
        for s in window_starts(len(frames), T):
            out[s:s + T] = model(clips_to_tensor(diff_normalize(frames[s:s + T + 1])))[0].numpy()
            covered = s + T
        if covered < n:
            tail = model(clips_to_tensor(diff_normalize(frames[n - T:n + 1])))[0].numpy()
            out[covered:] = tail[T - (n - covered):]
    return out


def train_fold(fold: FoldSplit, sessions: Mapping[str, PreparedSession], model_config: ModelConfig,
               train_config: TrainConfig, seed: int, guard: Optional[LeakageGuard] = None) -> FoldOutcome:
    """Train on ``fold.train_ids``, keep the epoch with the lowest validation loss.

    ``history[0]`` is the untrained model's validation loss (epoch 0).
    """
    cfg = train_config
    _set_determinism(seed, cfg.deterministic)
    guard = guard or LeakageGuard([fold.test_id, fold.val_id])
    T = model_config.T
    train = WindowSet([sessions[p] for p in fold.train_ids], T, cfg.target_kind, cfg.stride)
    val = WindowSet([sessions[fold.val_id]], T, cfg.target_kind)
    if len(train) == 0:
        raise TrainingError(f"fold {fold.test_id}: no training windows of T={T}")

    model = build_model(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(seed)
    history = [{"epoch": 0, "train_loss": None, "val_loss": _mean_loss(model, val, cfg.batch_size)}]
    best = (math.inf, 0, None)

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train))
        running, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            ks = order[start:start + cfg.batch_size]
            x, y, pids = train.batch(ks)
            guard.check(pids)
            if len(ks) < 2:
                continue  # batch norm needs more than one sample
            opt.zero_grad()
            loss = torch.nn.functional.mse_loss(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} "
                                    f"(lr={cfg.learning_rate}, fold={fold.test_id}, seed={seed})")
            loss.backward()
            opt.step()
            running += loss.item() * len(ks)
            count += len(ks)
        val_loss = _mean_loss(model, val, cfg.batch_size)
        history.append({"epoch": epoch, "train_loss": running / max(count, 1), "val_loss": val_loss})
        logger.info("fold %s seed %d epoch %d: train %.4f val %.4f", fold.test_id, seed, epoch,
                    history[-1]["train_loss"], val_loss)
        if val_loss < best[0] or best[2] is None:
            best = (val_loss, epoch, copy.deepcopy(model.state_dict()))

    model.load_state_dict(best[2])
    preds = predict_participant(model, sessions[fold.test_id], T)
    return FoldOutcome(fold, seed, history, best[1], best[2], preds, guard.checks)


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


RESULT_FIELDS = ["participant", "seed", "rho_raw", "rho_tonic", "best_epoch", "status"]


@dataclass
class ResultTable:
    T: int
    target_kind: str
    rows: list[dict]

    def ok_rows(self) -> list[dict]:
        return [r for r in self.rows if r["status"] == "ok"]

    def summary(self) -> dict:
        return {key: aggregate(self.ok_rows(), key) for key in ("rho_raw", "rho_tonic")}

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r.get(k)) for k in RESULT_FIELDS})

    def to_markdown(self, method: str = "Ours") -> str:
        return table_markdown([(method, self.T, self.summary())])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def aggregate(rows: Sequence[dict], key: str) -> dict:
    """Table-II statistics for one correlation column.

    For each seed the mean and STD across participants are computed; reported
    are the across-seed mean and STD (population) of both.
    """
    seeds = sorted({r["seed"] for r in rows})
    means, stds = [], []
    for s in seeds:
        vals = np.array([r[key] for r in rows if r["seed"] == s and not math.isnan(r[key])])
        if len(vals):
            means.append(vals.mean())
            stds.append(vals.std())
    if not means:
        return {"mean": math.nan, "mean_sd": math.nan, "std": math.nan, "std_sd": math.nan}
    return {"mean": float(np.mean(means)), "mean_sd": float(np.std(means)),
            "std": float(np.mean(stds)), "std_sd": float(np.std(stds))}


def table_markdown(entries: Sequence[tuple[str, Optional[int], dict]]) -> str:
    lines = ["| Method | Window | Raw mean rho | Raw STD | Tonic mean rho | Tonic STD |",
             "|---|---|---|---|---|---|"]
    for method, T, summ in entries:
        cells = []
        for key in ("rho_raw", "rho_tonic"):
            a = summ[key]
            cells += [f"{a['mean']:.2f} ± {a['mean_sd']:.2f}", f"{a['std']:.2f} ± {a['std_sd']:.2f}"]
        lines.append(f"| {method} | {T if T is not None else '---'} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _run_job(args):
    fold, sessions, model_config, train_config, seed, ckpt_dir = args
    guard = LeakageGuard([fold.test_id, fold.val_id])
    try:
        out = train_fold(fold, sessions, model_config, train_config, seed, guard)
    except (TrainingError, RuntimeError) as exc:
        logger.warning("fold %s seed %d failed: %s", fold.test_id, seed, exc)
        return {"participant": fold.test_id, "seed": seed, "rho_raw": math.nan,
                "rho_tonic": math.nan, "best_epoch": None, "status": "failed"}, None, guard.checks
    if ckpt_dir is not None:
        model = build_model(model_config)
        model.load_state_dict(out.state_dict)
        save_checkpoint(model, Path(ckpt_dir) / f"seed{seed}" / f"fold_{fold.test_id}.pt",
                        {"fold": dataclasses.asdict(fold), "seed": seed, "history": out.history,
                         "train_config": dataclasses.asdict(train_config)})
    row = {"participant": fold.test_id, "seed": seed, "best_epoch": out.best_epoch}
    try:
        res = evaluate_participant(out.predictions, sessions[fold.test_id],
                                   train_config.target_kind, model_config.T)
        row.update(rho_raw=res.rho_raw, rho_tonic=res.rho_tonic, status="ok")
    except (UndefinedCorrelationError, ValueError) as exc:
        logger.warning("fold %s seed %d degenerate: %s", fold.test_id, seed, exc)
        row.update(rho_raw=math.nan, rho_tonic=math.nan, status="degenerate")
    return row, out.predictions, guard.checks


def run_experiment(sessions: Mapping[str, PreparedSession], model_config: ModelConfig,
                   train_config: TrainConfig, out_dir: Optional[str | Path] = None,
                   workers: int = 1) -> ResultTable:
    """Train and evaluate every LOSO fold for every seed.

    With ``out_dir`` set, checkpoints land in ``out_dir/checkpoints/T{T}/seed{s}/``
    and stitched test predictions in ``out_dir/predictions/``.
    """
    folds = loso_splits(list(sessions))
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints" / f"T{model_config.T}"
        (out_dir / "predictions").mkdir(parents=True, exist_ok=True)
    jobs = [(f, sessions, model_config, train_config, s, ckpt_dir)
            for s in train_config.seeds for f in folds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]

    rows, total_checks = [], 0
    for (fold, *_rest), (row, preds, checks) in zip(jobs, results):
        rows.append(row)
        total_checks += checks
        if out_dir is not None and preds is not None:
            np.save(out_dir / "predictions" / f"T{model_config.T}_seed{row['seed']}_{fold.test_id}.npy",
                    preds)
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        logger.warning("%d of %d fold runs excluded from aggregation", len(failed), len(rows))
    seen = {(r["participant"], r["seed"]) for r in rows}
    if len(seen) != len(rows) or len(rows) != len(folds) * len(train_config.seeds):
        raise TrainingError("result table does not hold exactly one row per (participant, seed)")
    table = ResultTable(model_config.T, train_config.target_kind, rows)
    table.leakage_checks = total_checks
    return table
