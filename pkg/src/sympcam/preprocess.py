"""Video/label preprocessing: face crop, decimation, difference normalization, windows.

Order of operations per session: decimate 100 Hz -> 10 Hz, detect/crop/resize
the face to a square, resample EDA (raw and tonic) to the frame timestamps,
then cut windows of ``T + 1`` frames and difference-normalize frames and
labels per window. Cropping is per-frame and detection timestamps are kept on
whole seconds, so decimating first gives the same crops as cropping first.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import cv2
import numpy as np

from .dataset import FrameSource, Session
from .eda import decompose_tonic
from .errors import AlignmentError, FaceDetectionError, ResampleError

logger = logging.getLogger(__name__)

PREPROCESS_VERSION = "1"
EPS = 1e-7
WINDOW_SIZES = (256, 384, 512, 768, 1024)
TARGET_KINDS = ("raw", "tonic")

Box = tuple[int, int, int, int]  # x, y, w, h


@dataclass(frozen=True, eq=False)
class Clip:
    frames: np.ndarray  # (T, H, W, 3)
    fs: float
    origin: tuple[str, int] = ("", 0)

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True, eq=False)
class NormalizedClip:
    diff_frames: np.ndarray  # (T, H, W, 3) float32
    labels: np.ndarray  # (T,) float32
    target_kind: str
    origin: tuple[str, int] = ("", 0)
    window_index: int = 0

    def __post_init__(self):
        if len(self.diff_frames) != len(self.labels):
            raise AlignmentError(
                f"{len(self.diff_frames)} difference frames vs {len(self.labels)} labels")

    @property
    def T(self) -> int:
        return len(self.labels)

    @property
    def participant_id(self) -> str:
        return self.origin[0]


# --------------------------------------------------------------------------
# face detection and cropping
# --------------------------------------------------------------------------


class HaarFaceDetector:
    """OpenCV frontal-face cascade; returns the largest detection or ``None``."""

    def __init__(self, cascade: str = "haarcascade_frontalface_default.xml",
                 scale_factor: float = 1.1, min_neighbors: int = 5):
        path = Path(cascade)
        if not path.is_file():
            path = Path(cv2.data.haarcascades) / cascade
        self._clf = cv2.CascadeClassifier(str(path))
        if self._clf.empty():
            raise FaceDetectionError(f"could not load face cascade {path}")
        self.scale_factor = scale_factor
        self.min_neighbors = min_neighbors

    def __call__(self, frame: np.ndarray) -> Optional[Box]:
        gray = cv2.cvtColor(np.ascontiguousarray(frame), cv2.COLOR_RGB2GRAY)
        found = self._clf.detectMultiScale(gray, self.scale_factor, self.min_neighbors)
        if len(found) == 0:
            return None
        x, y, w, h = max(found, key=lambda b: b[2] * b[3])
        return int(x), int(y), int(w), int(h)


def _box_moved(a: Box, b: Box, tol_px: float) -> bool:
    return max(abs(i - j) for i, j in zip(a, b)) >= tol_px


def track_boxes(frames: np.ndarray, fs: float, detector: Callable[[np.ndarray], Optional[Box]],
                redetect_s: float = 1.0, fallback_box: Optional[Box] = None,
                jitter_px: float = 2.0) -> list[Box]:
    """One box per frame: detect every ``redetect_s`` seconds, hold in between.

    A re-detection that moves every edge by less than ``jitter_px`` keeps the
    previous box. Detection gaps reuse the last box; frames before the first
    successful detection use the first one found, or ``fallback_box``.
    """
    n = len(frames)
    every = max(int(round(redetect_s * fs)), 1)
    found: dict[int, Box] = {}
    for i in range(0, n, every):
        box = detector(frames[i])
        if box is not None:
            found[i] = box
    if not found:
        if fallback_box is None:
            raise FaceDetectionError(f"no face found in {math.ceil(n / every)} detection frames")
        return [tuple(fallback_box)] * n
    current = fallback_box if fallback_box is not None else found[min(found)]
    boxes = []
    for i in range(n):
        new = found.get(i)
        if new is not None and (current is None or _box_moved(new, current, jitter_px)):
            current = new
        boxes.append(tuple(current))
    return boxes


def crop_resize(frame: np.ndarray, box: Box, size: int) -> np.ndarray:
    x, y, w, h = box
    H, W = frame.shape[:2]
    x0, y0 = max(int(x), 0), max(int(y), 0)
    x1, y1 = min(int(x + w), W), min(int(y + h), H)
    if x1 <= x0 or y1 <= y0:
        raise FaceDetectionError(f"box {box} does not intersect the {W}x{H} frame")
    patch = np.ascontiguousarray(frame[y0:y1, x0:x1])
    if patch.shape[:2] == (size, size):
        return patch.copy()
    return cv2.resize(patch, (size, size), interpolation=cv2.INTER_LINEAR)


def detect_and_crop_face(frames: np.ndarray, fs: float, size: int = 72,
                         detector: Optional[Callable] = None, redetect_s: float = 1.0,
                         fallback_box: Union[Box, str, None] = None) -> np.ndarray:
    """Crop every frame to the tracked face box and resize bilinearly to ``size``.

    ``fallback_box="full"`` stands for the whole frame.
    """
    frames = np.asarray(frames)
    if fallback_box == "full":
        fallback_box = (0, 0, frames.shape[2], frames.shape[1])
    if detector is None:
        detector = HaarFaceDetector()
    boxes = track_boxes(frames, fs, detector, redetect_s, fallback_box)
    out = np.empty((len(frames), size, size, 3), dtype=frames.dtype)
    for i, (frame, box) in enumerate(zip(frames, boxes)):
        out[i] = crop_resize(frame, box, size)
    return out


# --------------------------------------------------------------------------
# temporal resampling and normalization
# --------------------------------------------------------------------------


def decimation_step(fs_in: float, fs_out: float) -> int:
    ratio = fs_in / fs_out
    step = int(round(ratio))
    if step < 1 or not math.isclose(ratio, step, rel_tol=0, abs_tol=1e-9):
        raise ResampleError(f"cannot decimate {fs_in} Hz to {fs_out} Hz by an integer stride")
    return step


def resample_video(clip: Union[Clip, FrameSource], fs_out: float = 10.0) -> Clip:
    """Keep every ``fs_in / fs_out``-th frame starting from frame 0."""
    step = decimation_step(clip.fs, fs_out)
    if isinstance(clip, Clip):
        return Clip(clip.frames[::step], fs_out, clip.origin)
    return Clip(clip.read(0, None, step), fs_out)


def diff_normalize(frames: np.ndarray) -> np.ndarray:
    """Consecutive frame differences divided by their overall standard deviation.

    Input has ``T + 1`` frames, output ``T``. The divisor is
    ``max(std(d), 1e-7)`` with the std taken over all elements, so a constant
    video maps to zeros and a perfectly linear ramp to ``d / 1e-7``.
    """
    x = np.asarray(frames, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least 2 frames")
    d = np.diff(x, axis=0)
    return (d / max(d.std(), EPS)).astype(np.float32)


def diff_normalize_signal(values: np.ndarray, n_frames: Optional[int] = None) -> np.ndarray:
    """Label counterpart of :func:`diff_normalize` for a 1-D series of ``T + 1`` samples."""
    v = np.asarray(values, dtype=np.float64)
    if n_frames is not None and len(v) != n_frames:
        raise AlignmentError(f"signal has {len(v)} samples but clip has {n_frames} frames")
    if v.ndim != 1 or len(v) < 2:
        raise ValueError("need a 1-D signal with at least 2 samples")
    d = np.diff(v)
    return (d / max(d.std(), EPS)).astype(np.float32)


def optical_flow_magnitude(frames: np.ndarray) -> np.ndarray:
    """Mean dense (Farneback) optical-flow magnitude per consecutive frame pair.

    Returns ``len(frames) - 1`` values in pixels per frame. Identical frame
    pairs are reported as exactly 0; Farneback leaves small spurious vectors
    near the borders even when nothing moves.
    """
    frames = np.asarray(frames)
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    gray = [cv2.cvtColor(np.ascontiguousarray(f, dtype=np.uint8), cv2.COLOR_RGB2GRAY)
            for f in frames]
    out = np.empty(len(frames) - 1)
    for i in range(len(frames) - 1):
        if np.array_equal(gray[i], gray[i + 1]):
            out[i] = 0.0
            continue
        flow = cv2.calcOpticalFlowFarneback(gray[i], gray[i + 1], None,
                                            0.5, 3, 15, 3, 5, 1.2, 0)
        out[i] = np.hypot(flow[..., 0], flow[..., 1]).mean()
    return out


# --------------------------------------------------------------------------
# prepared sessions and windows
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PreparedSession:
    """Cropped 10 Hz frames with EDA and tonic EDA sampled at the frame times."""

    participant_id: str
    frames: np.ndarray  # (N, S, S, 3) uint8
    eda: np.ndarray  # (N,)
    tonic: np.ndarray  # (N,)
    fs: float = 10.0

    def __post_init__(self):
        if not len(self.frames) == len(self.eda) == len(self.tonic):
            raise AlignmentError("frames, eda and tonic must share length")

    def __len__(self):
        return len(self.frames)

    def target(self, kind: str) -> np.ndarray:
        if kind == "raw":
            return self.eda
        if kind == "tonic":
            return self.tonic
        raise ValueError(f"unknown target kind {kind!r}")


def prepare_session(session: Session, size: int = 72, fs_out: float = 10.0,
                    detector: Optional[Callable] = None,
                    fallback_box: Union[Box, str, None] = None) -> PreparedSession:
    step = decimation_step(session.face_frames.fs, fs_out)
    decimated = session.face_frames.read(0, None, step)
    frames = detect_and_crop_face(decimated, fs_out, size, detector, 1.0, fallback_box)
    t = np.arange(len(frames)) / fs_out
    eda = np.interp(t, session.eda.times, session.eda.values)
    tonic_series = decompose_tonic(session.eda).tonic
    tonic = np.interp(t, tonic_series.times, tonic_series.values)
    return PreparedSession(session.participant_id, frames, eda, tonic, fs_out)


def window_starts(n_frames: int, T: int, stride: Optional[int] = None) -> list[int]:
    stride = T if stride is None else stride
    if not 1 <= stride <= T:
        raise ValueError(f"stride must be in [1, T], got {stride}")
    if n_frames < T + 1:
        return []
    return list(range(0, n_frames - T, stride))


def window_clips(prepared: PreparedSession, T: int, stride: Optional[int] = None,
                 target_kind: str = "tonic") -> list[NormalizedClip]:
    """Difference-normalized windows; window ``k`` uses frames ``[k*stride, k*stride + T]``."""
    starts = window_starts(len(prepared), T, stride)
    if not starts:
        logger.warning("%s: %d frames is shorter than one window of T=%d",
                       prepared.participant_id, len(prepared), T)
    target = prepared.target(target_kind)
    clips = []
    for k, s in enumerate(starts):
        clips.append(NormalizedClip(
            diff_normalize(prepared.frames[s:s + T + 1]),
            diff_normalize_signal(target[s:s + T + 1], T + 1),
            target_kind,
            (prepared.participant_id, s),
            k,
        ))
    return clips


def cache_key(params: dict) -> str:
    blob = json.dumps({"version": PREPROCESS_VERSION, **params}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_prepared(prepared: PreparedSession, directory: str | Path, params: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "frames.npy", prepared.frames)
    np.savez(directory / "signals.npz", eda=prepared.eda, tonic=prepared.tonic)
    meta = {
        "participant_id": prepared.participant_id,
        "fs": prepared.fs,
        "n_frames": len(prepared),
        "preprocess_version": PREPROCESS_VERSION,
        "cache_key": cache_key(params),
        "params": params,
    }
    (directory / "prepared.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_prepared(directory: str | Path, mmap: bool = True) -> PreparedSession:
    directory = Path(directory)
    meta = json.loads((directory / "prepared.json").read_text())
    if meta["preprocess_version"] != PREPROCESS_VERSION:
        raise ValueError(f"{directory}: cache written by preprocess version "
                         f"{meta['preprocess_version']}, expected {PREPROCESS_VERSION}")
    frames = np.load(directory / "frames.npy", mmap_mode="r" if mmap else None)
    with np.load(directory / "signals.npz") as z:
        eda, tonic = z["eda"], z["tonic"]
    return PreparedSession(meta["participant_id"], frames, eda, tonic, meta["fs"])


def write_window_manifest(prepared: Sequence[PreparedSession], path: str | Path, T: int,
                          target_kind: str, stride: Optional[int] = None) -> list[dict]:
    rows = []
    for p in prepared:
        for k, s in enumerate(window_starts(len(p), T, stride)):
            rows.append({"session_id": p.participant_id, "window_index": k, "start": s,
                         "T": T, "target_kind": target_kind,
                         "preprocess_version": PREPROCESS_VERSION})
    Path(path).write_text(json.dumps(rows, indent=1))
    return rows
