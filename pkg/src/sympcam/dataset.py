"""Session data model, on-disk layout, synthetic sessions and responder screening.

A session directory looks like::

    meta.json            participant_id, skin_type, fs values, pinch_intervals
    face_video/
        index.json       chunk manifest
        chunk_00000.npy  (count, H, W, 3) uint8
        ...
    eda.csv              t_s,eda_us
    ppg.csv              t_s,ppg
    truth.npz            optional, synthetic ground truth
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import (
    ConfigError,
    InsufficientDataError,
    IntegrityError,
    SessionLoadError,
)

logger = logging.getLogger(__name__)

# protocol: 2 min rest, 30 s pinch, repeated three times, closing 2 min rest
PROTOCOL_DURATION_S = 570.0
PROTOCOL_PINCH_ONSETS_S = (120.0, 270.0, 420.0)
PINCH_DURATION_S = 30.0

AROUSAL_BAND_HZ = (0.045, 0.25)
CARDIAC_BAND_HZ = (0.7, 2.5)

CHUNK_FRAMES = 1000
LAYOUT_VERSION = 1


def protocol_pinch_intervals(onsets: Sequence[float] = PROTOCOL_PINCH_ONSETS_S,
                             duration: float = PINCH_DURATION_S) -> list[tuple[float, float]]:
    return [(float(s), float(s + duration)) for s in onsets]


@dataclass(frozen=True, eq=False)
class Series:
    """A uniformly sampled 1-D signal."""

    values: np.ndarray
    fs: float
    units: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("Series values must be 1-D")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if len(values) < 2:
            raise ValueError("Series needs at least 2 samples")
        if not np.all(np.isfinite(values)):
            raise ValueError("Series values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def duration(self) -> float:
        return len(self.values) / self.fs

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.values)) / self.fs

    def slice_time(self, start_s: float, stop_s: float) -> np.ndarray:
        """Samples with ``start_s <= t < stop_s``."""
        i0 = int(math.ceil(start_s * self.fs - 1e-9))
        i1 = int(math.ceil(stop_s * self.fs - 1e-9))
        return self.values[max(i0, 0):min(i1, len(self.values))]


class FrameSource:
    """Read-only random access to a video as (n, H, W, 3) uint8 frames."""

    fs: float
    height: int
    width: int

    def __len__(self) -> int:
        raise NotImplementedError

    def read(self, start: int = 0, stop: Optional[int] = None, step: int = 1) -> np.ndarray:
        raise NotImplementedError

    @property
    def duration(self) -> float:
        return len(self) / self.fs

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (len(self), self.height, self.width, 3)

    def iter_chunks(self, size: int = CHUNK_FRAMES) -> Iterator[np.ndarray]:
        for start in range(0, len(self), size):
            yield self.read(start, min(start + size, len(self)))

    def _bounds(self, start, stop):
        n = len(self)
        stop = n if stop is None else min(stop, n)
        if start < 0 or start > stop:
            raise IndexError(f"bad frame range [{start}, {stop}) for {n} frames")
        return start, stop


class ArrayFrames(FrameSource):
    def __init__(self, frames: np.ndarray, fs: float):
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"expected (n, H, W, 3) frames, got {frames.shape}")
        self._frames = frames
        self.fs = float(fs)
        self.height, self.width = frames.shape[1:3]

    def __len__(self):
        return len(self._frames)

    def read(self, start=0, stop=None, step=1):
        start, stop = self._bounds(start, stop)
        return np.asarray(self._frames[start:stop:step])


class ChunkedFrames(FrameSource):
    """Frames stored as a sequence of ``.npy`` chunks described by ``index.json``.

    Chunks are memory-mapped on demand, so opening a 57k-frame session is cheap.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        index_path = self.directory / "index.json"
        if not index_path.is_file():
            raise SessionLoadError(f"missing frame index: {index_path}")
        index = json.loads(index_path.read_text())
        self.fs = float(index["fs"])
        self.height = int(index["height"])
        self.width = int(index["width"])
        self._chunks = index["chunks"]
        self._starts = np.array([c["start"] for c in self._chunks], dtype=np.int64)
        self._n = int(index["n_frames"])
        for c in self._chunks:
            if not (self.directory / c["file"]).is_file():
                raise SessionLoadError(f"missing frame chunk: {self.directory / c['file']}")

    def __len__(self):
        return self._n

    def _chunk(self, k):
        return np.load(self.directory / self._chunks[k]["file"], mmap_mode="r")

    def read(self, start=0, stop=None, step=1):
        start, stop = self._bounds(start, stop)
        wanted = np.arange(start, stop, step)
        out = np.empty((len(wanted), self.height, self.width, 3), dtype=np.uint8)
        if len(wanted) == 0:
            return out
        owner = np.searchsorted(self._starts, wanted, side="right") - 1
        for k in np.unique(owner):
            sel = owner == k
            out[sel] = self._chunk(k)[wanted[sel] - self._starts[k]]
        return out


def write_frames(frames: FrameSource, directory: str | Path, chunk: int = CHUNK_FRAMES) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks = []
    for k, block in enumerate(frames.iter_chunks(chunk)):
        name = f"chunk_{k:05d}.npy"
        np.save(directory / name, np.ascontiguousarray(block, dtype=np.uint8))
        chunks.append({"file": name, "start": k * chunk, "count": len(block)})
    index = {
        "version": LAYOUT_VERSION,
        "fs": frames.fs,
        "n_frames": len(frames),
        "height": frames.height,
        "width": frames.width,
        "dtype": "uint8",
        "chunks": chunks,
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2))


@dataclass(frozen=True, eq=False)
class Session:
    """One participant's recording."""

    participant_id: str
    face_frames: FrameSource
    eda: Series
    ppg: Series
    pinch_intervals: list[tuple[float, float]]
    skin_type: Optional[int] = None
    truth: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        if self.skin_type is not None and not 1 <= int(self.skin_type) <= 6:
            raise ValueError(f"skin type must be 1-6 or None, got {self.skin_type}")
        intervals = [(float(a), float(b)) for a, b in self.pinch_intervals]
        object.__setattr__(self, "pinch_intervals", intervals)
        prev_end = -math.inf
        for a, b in intervals:
            if not a < b:
                raise IntegrityError(f"empty pinch interval ({a}, {b})")
            if a < prev_end:
                raise IntegrityError("pinch intervals must be ordered and non-overlapping")
            if a < 0 or b > self.duration + 1e-9:
                raise IntegrityError(f"pinch interval ({a}, {b}) outside the recording")
            prev_end = b

    @property
    def duration(self) -> float:
        return self.face_frames.duration


def check_durations(video_s: float, eda: Series, ppg: Series, tolerance_s: float = 1.0) -> None:
    for name, s in (("eda", eda), ("ppg", ppg)):
        if abs(s.duration - video_s) > tolerance_s:
            raise IntegrityError(
                f"{name} lasts {s.duration:.3f} s but video lasts {video_s:.3f} s "
                f"(tolerance {tolerance_s} s)"
            )


def _write_csv(path: Path, header: str, series: Series) -> None:
    data = np.column_stack([series.times, series.values])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def _read_csv(path: Path, fs: float, units: str) -> Series:
    if not path.is_file():
        raise SessionLoadError(f"missing file: {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Series(data[:, 1], fs, units)


def save_session(session: Session, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": LAYOUT_VERSION,
        "participant_id": session.participant_id,
        "skin_type": session.skin_type,
        "fs_video": session.face_frames.fs,
        "fs_eda": session.eda.fs,
        "fs_ppg": session.ppg.fs,
        "pinch_intervals": [list(p) for p in session.pinch_intervals],
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    write_frames(session.face_frames, path / "face_video")
    _write_csv(path / "eda.csv", "t_s,eda_us", session.eda)
    _write_csv(path / "ppg.csv", "t_s,ppg", session.ppg)
    if session.truth:
        np.savez(path / "truth.npz", **session.truth)
    return path


def load_session(path: str | Path) -> Session:
    """Load and validate a session directory; video frames stay on disk."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise SessionLoadError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    frames = ChunkedFrames(path / "face_video")
    if not math.isclose(frames.fs, meta["fs_video"]):
        raise IntegrityError("frame index fs disagrees with meta.json")
    eda = _read_csv(path / "eda.csv", meta["fs_eda"], "uS")
    ppg = _read_csv(path / "ppg.csv", meta["fs_ppg"], "a.u.")
    check_durations(frames.duration, eda, ppg)
    truth = None
    if (path / "truth.npz").is_file():
        with np.load(path / "truth.npz") as z:
            truth = {k: z[k] for k in z.files}
    return Session(
        participant_id=str(meta["participant_id"]),
        face_frames=frames,
        eda=eda,
        ppg=ppg,
        pinch_intervals=[tuple(p) for p in meta["pinch_intervals"]],
        skin_type=meta.get("skin_type"),
        truth=truth,
    )


def list_sessions(root: str | Path) -> list[Path]:
    root = Path(root)
    return sorted(p.parent for p in root.glob("*/meta.json"))


# --------------------------------------------------------------------------
# synthetic sessions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic session generator.

    Gains are fractions of the base pixel intensity; ``noise_std`` is in 8-bit
    levels. ``fs_video=10`` emits already-decimated video for small fixtures.
    """

    n_participants: int = 3
    duration_s: float = PROTOCOL_DURATION_S
    fs_video: float = 100.0
    fs_physio: float = 50.0
    arousal_band: tuple[float, float] = AROUSAL_BAND_HZ
    cardiac_band: tuple[float, float] = CARDIAC_BAND_HZ
    arousal_gain: float = 0.02
    cardiac_gain: float = 0.004
    pulse_coupling: float = 0.5
    noise_std: float = 2.0
    tonic_rms: float = 0.4
    pinch_gain: float = 2.0
    scr_rate_hz: float = 0.05
    pinch_onsets: tuple[float, ...] = PROTOCOL_PINCH_ONSETS_S
    pinch_duration: float = PINCH_DURATION_S
    frame_size: int = 72
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arousal_band", tuple(self.arousal_band))
        object.__setattr__(self, "cardiac_band", tuple(self.cardiac_band))
        object.__setattr__(self, "pinch_onsets", tuple(self.pinch_onsets))
        self.validate()

    def validate(self) -> None:
        if self.n_participants < 1:
            raise ConfigError("n_participants must be >= 1")
        if self.duration_s <= 0 or self.fs_video <= 0 or self.fs_physio <= 0:
            raise ConfigError("durations and sampling rates must be positive")
        nyquist = min(self.fs_video, self.fs_physio) / 2
        for name, (lo, hi) in (("arousal_band", self.arousal_band),
                               ("cardiac_band", self.cardiac_band)):
            if not 0 < lo < hi < nyquist:
                raise ConfigError(f"{name} {lo, hi} must lie inside (0, {nyquist}) Hz")
        for name in ("arousal_gain", "cardiac_gain", "pulse_coupling", "noise_std",
                     "tonic_rms", "pinch_gain", "scr_rate_hz"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.pulse_coupling >= 1:
            raise ConfigError("pulse_coupling must be < 1 to keep pulse amplitude positive")
        if self.frame_size < 8:
            raise ConfigError("frame_size must be >= 8")

    @property
    def pinch_intervals(self) -> list[tuple[float, float]]:
        return [(s, e) for s, e in protocol_pinch_intervals(self.pinch_onsets, self.pinch_duration)
                if e <= self.duration_s]


def band_limited_walk(n: int, fs: float, band: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS noise with a 1/f^2 (random-walk) spectrum restricted to ``band``."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    inside = (freqs >= band[0]) & (freqs <= band[1])
    weight = np.zeros_like(freqs)
    weight[inside] = 1.0 / freqs[inside]
    out = np.fft.irfft(spec * weight, n)
    rms = np.sqrt(np.mean(out ** 2))
    return out / rms if rms > 0 else out


def _pinch_response(t: np.ndarray, intervals, gain: float, rise_s=4.0, width_s=1.5, decay_s=25.0):
    """Smooth step that rises early in each pinch interval and decays afterwards."""
    out = np.zeros_like(t)
    for start, end in intervals:
        rise = 1.0 / (1.0 + np.exp(-(t - start - rise_s) / width_s))
        level_at_end = 1.0 / (1.0 + np.exp(-(end - start - rise_s) / width_s))
        after = level_at_end * np.exp(-np.clip(t - end, 0, None) / decay_s)
        out += np.where(t < end, rise, after)
    return gain * out


class _Cardiac:
    """Heart rhythm with stress-independent slow HR variability; phase is analytic."""

    def __init__(self, rng: np.random.Generator, band: tuple[float, float]):
        lo, hi = band
        self.f0 = rng.uniform(max(lo + 0.2, 1.0), min(hi - 0.3, 1.5))
        self.amps = rng.uniform(0.02, 0.06, size=2)
        self.nus = np.array([rng.uniform(0.08, 0.15), rng.uniform(0.01, 0.03)])
        self.phis = rng.uniform(0, 2 * np.pi, size=2)
        self.phase0 = rng.uniform(0, 2 * np.pi)

    def phase(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        wobble = (self.amps / (2 * np.pi * self.nus)) * (
            np.cos(self.phis) - np.cos(2 * np.pi * self.nus * t + self.phis))
        return self.phase0 + 2 * np.pi * (self.f0 * t[..., 0] + wobble.sum(-1))

    def frequency(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        return self.f0 + (self.amps * np.sin(2 * np.pi * self.nus * t + self.phis)).sum(-1)


def _phasic_responses(t: np.ndarray, rate_hz: float, rng: np.random.Generator,
                      tau_fast=0.7, tau_slow=2.0) -> np.ndarray:
    """Sparse SCR train: Poisson onsets convolved with a unit-peak Bateman kernel."""
    duration = t[-1] if len(t) else 0.0
    n_events = rng.poisson(rate_hz * duration)
    onsets = np.sort(rng.uniform(0, duration, size=n_events))
    amps = rng.uniform(0.05, 0.3, size=n_events)
    t_peak = np.log(tau_slow / tau_fast) * tau_fast * tau_slow / (tau_slow - tau_fast)
    norm = np.exp(-t_peak / tau_slow) - np.exp(-t_peak / tau_fast)
    out = np.zeros_like(t)
    for onset, amp in zip(onsets, amps):
        lag = np.clip(t - onset, 0, None)
        out += amp * (np.exp(-lag / tau_slow) - np.exp(-lag / tau_fast)) / norm
    return out


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    base = gaussian_filter(rng.standard_normal((size, size)), sigma=max(size / 24, 1.0))
    base = (base - base.min()) / (np.ptp(base) + 1e-12)
    tint = np.array([0.95, 0.75, 0.6])  # RGB skin-like ratio
    return (60.0 + 140.0 * base)[..., None] * tint[None, None, :]


class SyntheticFrames(FrameSource):
    """Lazily rendered synthetic face video.

    Pixel noise is drawn per fixed-size block from a seed derived from the
    block index, so any frame range renders identically regardless of how the
    video is traversed.
    """

    def __init__(self, texture, fs, n_frames, arousal, cardiac, cfg: SynthConfig, seed: int):
        self.texture = texture
        self.fs = float(fs)
        self.height = self.width = texture.shape[0]
        self._n = n_frames
        self._arousal = arousal    # normalized arousal modulation per frame
        self._cardiac = cardiac    # cardiac waveform per frame
        self._cfg = cfg
        self._seed = seed

    def __len__(self):
        return self._n

    def intensity(self, idx: np.ndarray) -> np.ndarray:
        """Multiplicative gain applied to the texture for frames ``idx``."""
        cfg = self._cfg
        a = self._arousal[idx]
        pulse = cfg.cardiac_gain * (1.0 + cfg.pulse_coupling * np.tanh(a)) * self._cardiac[idx]
        return 1.0 + cfg.arousal_gain * a + pulse

    def _render_block(self, k: int) -> np.ndarray:
        lo = k * CHUNK_FRAMES
        hi = min(lo + CHUNK_FRAMES, self._n)
        gain = self.intensity(np.arange(lo, hi))
        frames = self.texture[None] * gain[:, None, None, None]
        if self._cfg.noise_std > 0:
            rng = np.random.default_rng([self._seed, 7919, k])
            frames = frames + rng.normal(0.0, self._cfg.noise_std, size=frames.shape)
        return np.clip(np.rint(frames), 0, 255).astype(np.uint8)

    def read(self, start=0, stop=None, step=1):
        start, stop = self._bounds(start, stop)
        wanted = np.arange(start, stop, step)
        out = np.empty((len(wanted), self.height, self.width, 3), dtype=np.uint8)
        blocks = wanted // CHUNK_FRAMES
        for k in np.unique(blocks):
            sel = blocks == k
            out[sel] = self._render_block(int(k))[wanted[sel] - k * CHUNK_FRAMES]
        return out


def generate_synthetic_session(config: SynthConfig, participant_seed: int,
                               participant_id: Optional[str] = None) -> Session:
    """Build a deterministic synthetic session.

    Tonic EDA is a baseline plus a band-limited random walk in the arousal band
    plus step-like rises inside pinch intervals; sparse Bateman-shaped SCRs are
    added on top to give the raw EDA. The video is a static texture whose
    brightness follows the standardized tonic EDA (arousal channel) and a cardiac
    oscillation whose amplitude is mildly coupled to arousal. PPG carries the
    same cardiac oscillation. HR is independent of the pinch protocol.
    """
    cfg = config
    rng = np.random.default_rng([cfg.seed, participant_seed])
    pid = participant_id or f"P{participant_seed:02d}"

    n_phys = int(round(cfg.duration_s * cfg.fs_physio))
    n_vid = int(round(cfg.duration_s * cfg.fs_video))
    t_phys = np.arange(n_phys) / cfg.fs_physio
    t_vid = np.arange(n_vid) / cfg.fs_video
    intervals = cfg.pinch_intervals

    baseline = rng.uniform(2.0, 8.0)
    walk = band_limited_walk(n_phys, cfg.fs_physio, cfg.arousal_band, rng)
    tonic = baseline + cfg.tonic_rms * walk + _pinch_response(t_phys, intervals, cfg.pinch_gain)
    phasic = _phasic_responses(t_phys, cfg.scr_rate_hz, rng)
    eda = np.clip(tonic + phasic, 0.5, 20.0)

    # the camera sees the slow sympathetic level, not individual sweat bursts
    tonic_vid = np.interp(t_vid, t_phys, tonic)
    scale = tonic.std()
    arousal_vid = (tonic_vid - tonic.mean()) / scale if scale > 0 else np.zeros_like(tonic_vid)

    cardiac = _Cardiac(rng, cfg.cardiac_band)
    ppg = np.sin(cardiac.phase(t_phys))
    cardiac_vid = np.sin(cardiac.phase(t_vid))

    texture = _texture(cfg.frame_size, rng)
    frames = SyntheticFrames(texture, cfg.fs_video, n_vid, arousal_vid, cardiac_vid, cfg,
                             seed=int(rng.integers(2**31)))
    skin_type = int(rng.integers(1, 7))
    truth = {
        "arousal_video": arousal_vid,
        "walk_physio": walk,
        "tonic_physio": tonic,
        "cardiac_freq_physio": cardiac.frequency(t_phys),
    }
    return Session(pid, frames, Series(eda, cfg.fs_physio, "uS"), Series(ppg, cfg.fs_physio, "a.u."),
                   intervals, skin_type, truth)


def generate_dataset(config: SynthConfig, out: Optional[str | Path] = None) -> list[Session]:
    """Generate ``config.n_participants`` sessions, optionally writing them under ``out``."""
    sessions = []
    for i in range(config.n_participants):
        s = generate_synthetic_session(config, i)
        if out is not None:
            save_session(s, Path(out) / s.participant_id)
            s = load_session(Path(out) / s.participant_id)
        sessions.append(s)
    return sessions


# --------------------------------------------------------------------------
# responder screening
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScreeningResult:
    t_stat: float
    p_value: float
    responsive: bool

    def __iter__(self):
        return iter((self.t_stat, self.p_value, self.responsive))


def stress_rest_pairs(session: Session, window_s: float = PINCH_DURATION_S) -> np.ndarray:
    """Mean EDA of each pinch window and of the rest window just before it.

    Returns an array of shape (n_pairs, 2) with columns (rest, stress).
    """
    pairs = []
    for start, end in session.pinch_intervals:
        if start - window_s < 0:
            continue
        rest = session.eda.slice_time(start - window_s, start)
        stress = session.eda.slice_time(start, end)
        if len(rest) and len(stress):
            pairs.append((rest.mean(), stress.mean()))
    return np.array(pairs, dtype=np.float64).reshape(-1, 2)


def screen_responders(session: Session, alpha: float = 0.05) -> ScreeningResult:
    """Paired t-test of mean EDA in pinch windows vs. the preceding rest windows.

    Identical differences give zero variance; all-zero differences are reported
    as ``t = 0, p = 1`` and constant nonzero differences as ``t = +-inf, p = 0``.
    """
    pairs = stress_rest_pairs(session)
    if len(pairs) < 2:
        raise InsufficientDataError(f"need >= 2 rest/stress pairs, got {len(pairs)}")
    diff = pairs[:, 1] - pairs[:, 0]
    if np.ptp(diff) == 0:
        if diff[0] == 0:
            t, p = 0.0, 1.0
        else:
            t, p = math.copysign(math.inf, diff[0]), 0.0
    else:
        res = stats.ttest_rel(pairs[:, 1], pairs[:, 0])
        t, p = float(res.statistic), float(res.pvalue)
    return ScreeningResult(t, p, bool(p < alpha))
