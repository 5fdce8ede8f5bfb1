"""Physical-stress detection from arousal and pulse signals.

Sessions are cut into 19 consecutive 30 s windows; ten features per window
(five from heart rate, five from the arousal/EDA series) feed a gradient
boosted tree classifier evaluated leave-one-subject-out.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import signal
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.metrics import balanced_accuracy_score, f1_score

from .dataset import CARDIAC_BAND_HZ, PINCH_DURATION_S, PROTOCOL_DURATION_S, Series, Session
from .errors import ConfigError, DomainError, InsufficientDataError, ProtocolError
from .model import ModelConfig, build_model
from .preprocess import decimation_step, detect_and_crop_face
from .training import LeakageGuard, TrainConfig, loso_splits, train_fold

logger = logging.getLogger(__name__)

N_WINDOWS = 19
REFRACTORY_S = 0.33
RPPG_FS = 25.0  # integer decimation of 100 Hz video
HR_FEATURES = ("mu_HR", "min_HR", "max_HR", "mu_HRChange", "SDNN")
EDA_FEATURES = ("mu_EDA", "sigma_EDA", "min_EDA", "max_EDA", "mu_EDAChange")
FEATURES = HR_FEATURES + EDA_FEATURES
MODES = {"ppg_only": HR_FEATURES, "eda_only": EDA_FEATURES, "both": FEATURES}
SOURCES = ("contact", "camera")

REST, STRESS = 0, 1


@dataclass(frozen=True)
class GBParams:
    n_estimators: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    subsample: float = 1.0
    random_state: int = 0


@dataclass(frozen=True, eq=False)
class StressWindow:
    participant_id: str
    index: int
    start_s: float
    label: int
    eda: Series
    ppg: Series
    duration_s: float = PINCH_DURATION_S

    @property
    def label_name(self) -> str:
        return "stress" if self.label == STRESS else "rest"


def _overlap(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def window_session(session: Session, eda: Optional[Series] = None, ppg: Optional[Series] = None,
                   window_s: float = PINCH_DURATION_S, tolerance_s: float = 1.0) -> list[StressWindow]:
    """Cut a protocol session into 19 labeled 30 s windows.

    ``eda`` and ``ppg`` default to the contact signals; pass camera-derived
    series to window those instead. A window is labeled stress when more than
    half of it lies inside a pinch interval.
    """
    if abs(session.duration - PROTOCOL_DURATION_S) > tolerance_s:
        raise ProtocolError(f"{session.participant_id}: session lasts {session.duration:.2f} s, "
                            f"protocol requires {PROTOCOL_DURATION_S:.0f} +- {tolerance_s} s")
    eda = session.eda if eda is None else eda
    ppg = session.ppg if ppg is None else ppg
    windows = []
    for k in range(N_WINDOWS):
        a, b = k * window_s, (k + 1) * window_s
        covered = sum(_overlap(a, b, s, e) for s, e in session.pinch_intervals)
        label = STRESS if covered > window_s / 2 else REST
        windows.append(StressWindow(
            session.participant_id, k, a, label,
            _slice_series(eda, a, b), _slice_series(ppg, a, b), window_s))
    return windows


def _slice_series(s: Series, a: float, b: float) -> Series:
    values = s.slice_time(a, b)
    if len(values) < 2:
        raise InsufficientDataError(f"signal does not cover [{a}, {b}) s")
    return Series(values, s.fs, s.units)


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------


def detect_peaks(ppg: Series, band: tuple[float, float] = CARDIAC_BAND_HZ,
                 refractory_s: float = REFRACTORY_S) -> np.ndarray:
    """NN intervals (seconds) from a pulse waveform.

    The signal is band-passed (2nd-order Butterworth, zero phase) and local
    maxima above zero at least ``refractory_s`` apart are taken as beats.
    """
    if ppg.fs <= 2 * band[1]:
        raise DomainError(f"pulse sampled at {ppg.fs} Hz cannot resolve {band[1]} Hz")
    x = ppg.values - ppg.values.mean()
    sos = signal.butter(2, band, btype="bandpass", fs=ppg.fs, output="sos")
    if len(x) > 3 * (2 * len(sos) + 1):
        x = signal.sosfiltfilt(sos, x)
    distance = max(1, math.ceil(refractory_s * ppg.fs))
    peaks, _ = signal.find_peaks(x, height=0.0, distance=distance)
    if len(peaks) < 2:
        raise InsufficientDataError(f"found {len(peaks)} pulse peaks; need >= 2")
    return np.diff(peaks) / ppg.fs


def hr_features(nn: np.ndarray) -> dict:
    hr = 60.0 / nn
    return {
        "mu_HR": float(hr.mean()),
        "min_HR": float(hr.min()),
        "max_HR": float(hr.max()),
        "mu_HRChange": float(np.abs(np.diff(hr)).mean()) if len(hr) > 1 else math.nan,
        "SDNN": float(nn.std()),
    }


def eda_features(values: np.ndarray) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {
        "mu_EDA": float(v.mean()),
        "sigma_EDA": float(v.std()),
        "min_EDA": float(v.min()),
        "max_EDA": float(v.max()),
        "mu_EDAChange": float(np.diff(v).mean()),
    }


def extract_features(window: StressWindow) -> dict:
    """All ten features; HR entries are NaN when too few beats are found."""
    try:
        hr = hr_features(detect_peaks(window.ppg))
    except InsufficientDataError:
        logger.info("%s window %d: insufficient peaks, HR features missing",
                    window.participant_id, window.index)
        hr = dict.fromkeys(HR_FEATURES, math.nan)
    return {**hr, **eda_features(window.eda.values)}


@dataclass
class FeatureSet:
    """Stacked feature rows for one signal source."""

    participants: np.ndarray
    window_idx: np.ndarray
    labels: np.ndarray
    X: np.ndarray  # (n, 10) in FEATURES order
    source: str = "contact"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}")
        n = len(self.labels)
        if not (len(self.participants) == len(self.window_idx) == n and self.X.shape == (n, len(FEATURES))):
            raise ValueError("feature set columns disagree in length")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["participant", "window_idx", "label", *FEATURES])
            for p, k, y, row in zip(self.participants, self.window_idx, self.labels, self.X):
                w.writerow([p, int(k), "stress" if y == STRESS else "rest",
                            *("" if math.isnan(v) else repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path: str | Path, source: str = "contact") -> "FeatureSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        X = np.array([[float(r[f]) if r[f] != "" else math.nan for f in FEATURES] for r in rows])
        return cls(np.array([r["participant"] for r in rows]),
                   np.array([int(r["window_idx"]) for r in rows]),
                   np.array([STRESS if r["label"] == "stress" else REST for r in rows]),
                   X.reshape(len(rows), len(FEATURES)), source)


def build_features(windows: Sequence[StressWindow], source: str = "contact") -> FeatureSet:
    rows = [extract_features(w) for w in windows]
    X = np.array([[r[f] for f in FEATURES] for r in rows], dtype=np.float64).reshape(len(rows), len(FEATURES))
    return FeatureSet(np.array([w.participant_id for w in windows]),
                      np.array([w.index for w in windows]),
                      np.array([w.label for w in windows]), X, source)


# --------------------------------------------------------------------------
# classification
# --------------------------------------------------------------------------


@dataclass
class StressResult:
    mode: str
    source: str
    bacc: float
    f1: float
    y_true: np.ndarray = field(repr=False)
    y_pred: np.ndarray = field(repr=False)
    per_fold: list[dict] = field(default_factory=list, repr=False)


def scores(y_true, y_pred) -> tuple[float, float]:
    """Balanced accuracy and F1 of the stress class."""
    return (float(balanced_accuracy_score(y_true, y_pred)),
            float(f1_score(y_true, y_pred, pos_label=STRESS, zero_division=0)))


def _impute(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
        med = np.nanmedian(train, axis=0)
    med = np.where(np.isnan(med), 0.0, med)
    return np.where(np.isnan(train), med, train), np.where(np.isnan(test), med, test)


def classify_stress(features: FeatureSet, mode: str = "both", params: GBParams = GBParams(),
                    guard: Optional[LeakageGuard] = None) -> StressResult:
    """LOSO gradient boosting on the features selected by ``mode``.

    Each fold trains on every participant except the held-out one; missing
    values are filled with the training-fold median.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {sorted(MODES)}")
    cols = [FEATURES.index(f) for f in MODES[mode]]
    X = features.X[:, cols]
    y = features.labels
    pids = features.participants
    y_pred = np.full(len(y), -1)
    per_fold = []
    for fold in loso_splits(sorted(set(pids.tolist()))):
        fold_guard = guard or LeakageGuard([fold.test_id])
        fold_guard.held_out = frozenset([fold.test_id])
        tr = pids != fold.test_id
        te = ~tr
        fold_guard.check(pids[tr].tolist())
        if len(np.unique(y[tr])) < 2:
            raise InsufficientDataError(f"fold {fold.test_id}: training labels hold one class only")
        Xtr, Xte = _impute(X[tr], X[te])
        clf = GradientBoostingClassifier(
            n_estimators=params.n_estimators, max_depth=params.max_depth,
            learning_rate=params.learning_rate, subsample=params.subsample,
            random_state=params.random_state)
        clf.fit(Xtr, y[tr])
        y_pred[te] = clf.predict(Xte)
        per_fold.append({"participant": fold.test_id, "n_test": int(te.sum()),
                         "recall_stress": _recall(y[te], y_pred[te], STRESS),
                         "recall_rest": _recall(y[te], y_pred[te], REST)})
    bacc, f1 = scores(y, y_pred)
    return StressResult(mode, features.source, bacc, f1, y, y_pred, per_fold)


def _recall(y_true, y_pred, cls) -> float:
    m = y_true == cls
    return float((y_pred[m] == cls).mean()) if m.any() else math.nan


def always_rest_baseline(features: FeatureSet) -> StressResult:
    y = features.labels
    pred = np.full(len(y), REST)
    bacc, f1 = scores(y, pred)
    return StressResult("baseline", features.source, bacc, f1, y, pred)


def table_markdown(results: Sequence[StressResult]) -> str:
    lines = ["| Signal source | Features | BACC | F1 |", "|---|---|---|---|"]
    for r in results:
        source = "---" if r.mode == "baseline" else r.source
        lines.append(f"| {source} | {r.mode} | {r.bacc:.2f} | {r.f1:.2f} |")
    return "\n".join(lines) + "\n"


def write_report(results: Sequence[StressResult], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "stress_results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "mode", "bacc", "f1"])
        for r in results:
            w.writerow([r.source, r.mode, repr(r.bacc), repr(r.f1)])
    path = out_dir / "stress_results.md"
    path.write_text(table_markdown(results))
    return path


def run_stress(feature_sets: Mapping[str, FeatureSet], modes: Sequence[str] = tuple(MODES),
               params: GBParams = GBParams()) -> list[StressResult]:
    """Always-rest baseline plus every (source, mode) combination available."""
    results = []
    first = next(iter(feature_sets.values()))
    results.append(always_rest_baseline(first))
    for source in SOURCES:
        if source in feature_sets:
            for mode in modes:
                results.append(classify_stress(feature_sets[source], mode, params))
    return results


# --------------------------------------------------------------------------
# camera-derived signals
# --------------------------------------------------------------------------


def trend_series(predictions: np.ndarray, fs: float) -> Series:
    """Camera signal from full-coverage difference predictions (cumulative, starts at 0)."""
    return Series(np.r_[0.0, np.cumsum(np.asarray(predictions, dtype=np.float64))], fs, "a.u.")


@dataclass(frozen=True, eq=False)
class PulseSession:
    """Cropped frames at the rPPG rate with the contact PPG as target."""

    participant_id: str
    frames: np.ndarray
    ppg: np.ndarray
    fs: float = RPPG_FS

    def __len__(self):
        return len(self.frames)

    def target(self, kind: str = "raw") -> np.ndarray:
        return self.ppg


def prepare_pulse_session(session: Session, size: int = 72, fs_out: float = RPPG_FS,
                          detector=None, fallback_box=None) -> PulseSession:
    step = decimation_step(session.face_frames.fs, fs_out)
    frames = detect_and_crop_face(session.face_frames.read(0, None, step), fs_out, size,
                                  detector, 1.0, fallback_box)
    t = np.arange(len(frames)) / fs_out
    return PulseSession(session.participant_id, frames,
                        np.interp(t, session.ppg.times, session.ppg.values), fs_out)


def train_pulse_model(sessions: Mapping[str, PulseSession], test_id: str,
                      model_config: ModelConfig, train_config: TrainConfig, seed: int = 0):
    """rPPG network for one held-out participant, trained on the remaining ones."""
    if model_config.attention:
        raise ConfigError("the rPPG network is the plain backbone; set attention=False")
    fold = next(f for f in loso_splits(list(sessions)) if f.test_id == test_id)
    out = train_fold(fold, sessions, model_config, train_config, seed)
    model = build_model(model_config)
    model.load_state_dict(out.state_dict)
    return model.eval()
