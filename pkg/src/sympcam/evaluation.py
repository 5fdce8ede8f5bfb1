"""Per-participant scoring, the blood-pulsation-amplitude baseline and the motion probe."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .dataset import CARDIAC_BAND_HZ
from .eda import spearman
from .errors import UndefinedCorrelationError
from .preprocess import PreparedSession, optical_flow_magnitude

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalResult:
    participant_id: str
    rho_raw: float
    rho_tonic: float
    rho_motion: Optional[float] = None
    window_T: Optional[int] = None
    target_kind: str = "tonic"

    def __post_init__(self):
        for name in ("rho_raw", "rho_tonic", "rho_motion"):
            v = getattr(self, name)
            if v is not None and not (math.isnan(v) or -1.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [-1, 1]")


def trend_from_differences(predictions: np.ndarray) -> np.ndarray:
    """Cumulative sum of predicted differences: the arousal trend up to an offset."""
    return np.cumsum(np.asarray(predictions, dtype=np.float64))


def evaluate_participant(predictions: np.ndarray, prepared: PreparedSession,
                         target_kind: str = "tonic", window_T: Optional[int] = None,
                         motion: bool = False) -> EvalResult:
    """Score stitched window predictions against raw and tonic EDA.

    ``predictions[i]`` estimates the change from frame ``i`` to ``i + 1``, so
    the trend is compared with samples ``1 .. len(predictions)``. Raises
    :class:`UndefinedCorrelationError` for a constant trend.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    n = len(pred)
    if n + 1 > len(prepared):
        raise ValueError(f"{n} predictions exceed the {len(prepared) - 1} frame pairs")
    trend = trend_from_differences(pred)
    rho_raw = spearman(trend, prepared.eda[1:n + 1])
    rho_tonic = spearman(trend, prepared.tonic[1:n + 1])
    rho_motion = motion_probe(pred, prepared.frames[:n + 1]) if motion else None
    return EvalResult(prepared.participant_id, rho_raw, rho_tonic, rho_motion, window_T, target_kind)


def motion_probe(predictions: np.ndarray, frames: np.ndarray,
                 flow: Optional[np.ndarray] = None) -> Optional[float]:
    """Spearman between the predicted trend and per-pair optical-flow magnitude.

    Returns ``None`` when the correlation is undefined (e.g. a static video).
    """
    pred = np.asarray(predictions, dtype=np.float64)
    if flow is None:
        flow = optical_flow_magnitude(frames)
    n = min(len(pred), len(flow))
    try:
        return spearman(trend_from_differences(pred[:n]), flow[:n])
    except UndefinedCorrelationError:
        logger.info("motion probe not applicable: flow or prediction is constant")
        return None


def forehead_roi(size: int) -> tuple[int, int, int, int]:
    """Upper third of a square face crop as (x, y, w, h)."""
    return 0, 0, size, max(size // 3, 1)


def baseline_bpa(frames: np.ndarray, fs: float, roi: Optional[tuple[int, int, int, int]] = None,
                 window_s: float = 30.0, step_s: float = 10.0,
                 band: tuple[float, float] = CARDIAC_BAND_HZ) -> tuple[np.ndarray, np.ndarray]:
    """Blood pulsation amplitude baseline.

    The ROI's green-channel mean is band-passed to the cardiac band; its
    standard deviation in sliding ``window_s`` windows stepped by ``step_s`` is
    the arousal estimate.

    Returns
    -------
    centres, envelope
        Window centre times in seconds and the amplitude per window.
    """
    frames = np.asarray(frames)
    x, y, w, h = roi if roi is not None else forehead_roi(frames.shape[1])
    patch = frames[:, y:y + h, x:x + w, 1]
    if patch.size == 0 or patch.shape[1] == 0 or patch.shape[2] == 0:
        raise ValueError(f"ROI {(x, y, w, h)} is empty for frames {frames.shape[1:3]}")
    green = patch.reshape(len(frames), -1).mean(axis=1).astype(np.float64)
    sos = signal.butter(2, band, btype="bandpass", fs=fs, output="sos")
    pulse = signal.sosfiltfilt(sos, green - green.mean())
    win = int(round(window_s * fs))
    step = int(round(step_s * fs))
    if len(pulse) < win:
        raise ValueError(f"need at least {window_s} s of video for one baseline window")
    starts = np.arange(0, len(pulse) - win + 1, step)
    envelope = np.array([pulse[s:s + win].std() for s in starts])
    centres = (starts + win / 2.0) / fs
    return centres, envelope


def write_eval_csv(results: Sequence[EvalResult], path: str | Path) -> None:
    fields = ["participant_id", "rho_raw", "rho_tonic", "rho_motion", "window_T", "target_kind"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in results:
            row = asdict(r)
            w.writerow({k: ("" if row[k] is None else row[k]) for k in fields})


def plot_prediction(predictions: np.ndarray, prepared: PreparedSession, path: str | Path,
                    title: str = "") -> Path:
    """Predicted trend vs tonic EDA, both z-scored, saved as a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    trend = trend_from_differences(predictions)
    n = len(trend)
    t = np.arange(1, n + 1) / prepared.fs / 60.0
    tonic = prepared.tonic[1:n + 1]

    def z(v):
        s = v.std()
        return (v - v.mean()) / s if s > 0 else v - v.mean()

    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(t, z(tonic), color="black", label="tonic EDA")
    ax.plot(t, z(trend), color="tab:blue", label="predicted arousal")
    ax.set_xlabel("time (min)")
    ax.set_ylabel("z-score")
    ax.set_title(title or prepared.participant_id)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
