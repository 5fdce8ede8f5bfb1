"""Tonic/phasic EDA decomposition and rank correlation.

The decomposition models the (standardized) skin conductance ``y`` as::

    y = M q + B l + C d + e

where ``p = A q >= 0`` is a sparse sudomotor driver filtered through a
biexponential (Bateman) impulse response written as the ARMA pair ``(A, M)``,
``B l`` is a cubic B-spline tonic on coarse knots, ``C d`` an offset plus
linear trend and ``e`` the residual. The QP solved is::

    min  0.5 ||M q + B l + C d - y||^2 + alpha * 1'A q + 0.5 * gamma * ||l||^2
    s.t. A q >= 0
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import signal, stats

from .dataset import Series
from .errors import DecompositionError, DomainError, UndefinedCorrelationError

logger = logging.getLogger(__name__)

DECOMPOSITION_FS = 4.0


@dataclass(frozen=True)
class CvxEDAParams:
    tau_fast: float = 0.7
    tau_slow: float = 2.0
    knot_spacing_s: float = 10.0
    alpha: float = 8e-4
    gamma: float = 1e-2
    reltol: float = 1e-9
    abstol: float = 1e-9
    feastol: float = 1e-9
    maxiters: int = 200


@dataclass(frozen=True)
class EDADecomposition:
    """``tonic + phasic + residual`` reproduces the input exactly (same rate).

    ``driver`` is the non-negative sudomotor driver at the decomposition rate.
    """

    tonic: Series
    phasic: Series
    residual: Series
    driver: Series

    def to_csv(self, path: str | Path, raw: Series) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "raw", "tonic", "phasic"])
            for row in zip(raw.times, raw.values, self.tonic.values, self.phasic.values):
                w.writerow([repr(float(v)) for v in row])


def _bateman_arma(n: int, dt: float, tau_fast: float, tau_slow: float):
    """Sparse AR (``A``) and MA (``M``) matrices of the discretized Bateman response."""
    a1 = 1.0 / min(tau_fast, tau_slow)
    a0 = 1.0 / max(tau_fast, tau_slow)
    ar = np.array([
        (a1 * dt + 2.0) * (a0 * dt + 2.0),
        2.0 * a1 * a0 * dt ** 2 - 8.0,
        (a1 * dt - 2.0) * (a0 * dt - 2.0),
    ]) / ((a1 - a0) * dt ** 2)
    ma = np.array([1.0, 2.0, 1.0])
    # rows 0 and 1 stay empty: both filters start from rest
    rows = np.repeat(np.arange(2, n), 3)
    cols = (np.arange(2, n)[:, None] - np.arange(3)[None, :]).ravel()
    A = sp.csc_matrix((np.tile(ar, n - 2), (rows, cols)), shape=(n, n))
    M = sp.csc_matrix((np.tile(ma, n - 2), (rows, cols)), shape=(n, n))
    return A, M


def _spline_basis(n: int, dt: float, knot_spacing_s: float) -> sp.csc_matrix:
    """Cubic B-spline bumps centred every ``knot_spacing_s`` seconds."""
    k = int(round(knot_spacing_s / dt))
    tri = np.r_[np.arange(1.0, k), np.arange(k, 0.0, -1.0)]
    spl = np.convolve(tri, tri, "full")
    spl /= spl.max()
    offsets = np.arange(-(len(spl) // 2), (len(spl) + 1) // 2)
    centres = np.arange(0, n, k)
    idx = offsets[:, None] + centres[None, :]
    cols = np.broadcast_to(np.arange(len(centres)), idx.shape)
    vals = np.broadcast_to(spl[:, None], idx.shape)
    ok = (idx >= 0) & (idx < n)
    return sp.csc_matrix((vals[ok], (idx[ok], cols[ok])), shape=(n, len(centres)))


def _to_cvx(m):
    import cvxopt

    m = sp.coo_matrix(m)
    return cvxopt.spmatrix(m.data.tolist(), m.row.tolist(), m.col.tolist(), m.shape)


def cvxeda(y: np.ndarray, dt: float, params: CvxEDAParams = CvxEDAParams()) -> dict:
    """Solve the decomposition QP for a (typically standardized) signal ``y``.

    Returns a dict with ``phasic`` (M q), ``driver`` (A q), ``tonic`` (B l + C d),
    ``residual`` and solver diagnostics.
    """
    import cvxopt
    import cvxopt.solvers

    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    A, M = _bateman_arma(n, dt, params.tau_fast, params.tau_slow)
    B = _spline_basis(n, dt, params.knot_spacing_s)
    C = sp.csc_matrix(np.c_[np.ones(n), np.arange(1.0, n + 1.0) / n])
    nB, nC = B.shape[1], C.shape[1]

    X = sp.hstack([M, C, B], format="csc")
    H = (X.T @ X).tocsc()
    H = H + sp.block_diag([sp.csc_matrix((n + nC, n + nC)), params.gamma * sp.eye(nB)], format="csc")
    f = -(X.T @ y)
    f[:n] += params.alpha * np.asarray(A.sum(axis=0)).ravel()
    G = sp.hstack([-A, sp.csc_matrix((n, nC + nB))], format="csc")

    options = {
        "show_progress": False,
        "reltol": params.reltol,
        "abstol": params.abstol,
        "feastol": params.feastol,
        "maxiters": params.maxiters,
    }
    res = cvxopt.solvers.qp(_to_cvx(H), cvxopt.matrix(f), _to_cvx(G), cvxopt.matrix(np.zeros(n)),
                            options=options)
    if res["status"] != "optimal":
        raise DecompositionError(
            f"QP did not converge: status={res['status']}, iterations={res['iterations']}, "
            f"gap={res['gap']}, relative gap={res['relative gap']}, "
            f"primal infeasibility={res['primal infeasibility']}"
        )
    x = np.array(res["x"]).ravel()
    q, d, l = x[:n], x[n:n + nC], x[n + nC:]
    tonic = B @ l + C @ d
    phasic = M @ q
    return {
        "tonic": tonic,
        "phasic": phasic,
        "driver": A @ q,
        "residual": y - tonic - phasic,
        "iterations": res["iterations"],
        "relative_gap": res["relative gap"],
    }


def resample_series(series: Series, fs: float) -> Series:
    """Anti-aliased rational resampling with linear end padding."""
    if np.isclose(series.fs, fs):
        return series
    ratio = Fraction(fs / series.fs).limit_denominator(1000)
    values = signal.resample_poly(series.values, ratio.numerator, ratio.denominator, padtype="line")
    return Series(values, fs, series.units)


def decompose_tonic(eda: Series, params: CvxEDAParams = CvxEDAParams(),
                    fs: float = DECOMPOSITION_FS) -> EDADecomposition:
    """Split EDA into tonic, phasic and residual parts.

    The signal is resampled to ``fs`` (4 Hz) and standardized before solving;
    tonic and phasic parts are then rescaled and linearly interpolated back onto
    the input sample times, and the residual absorbs whatever remains. The
    standardization makes the result scale-equivariant.
    """
    if eda.fs < 1.0:
        raise DomainError(f"EDA sampled at {eda.fs} Hz; need >= 1 Hz")
    if eda.duration < 30.0:
        raise DomainError(f"EDA lasts {eda.duration:.1f} s; need >= 30 s")
    if np.any(eda.values <= 0):
        raise DomainError("EDA must be strictly positive")

    low = resample_series(eda, fs)
    mu = low.values.mean()
    sd = low.values.std()
    t_low = np.arange(len(low)) / fs
    if sd == 0:
        tonic_low = np.full(len(low), mu)
        phasic_low = np.zeros(len(low))
        driver_low = np.zeros(len(low))
    else:
        out = cvxeda((low.values - mu) / sd, 1.0 / fs, params)
        tonic_low = mu + sd * out["tonic"]
        phasic_low = sd * out["phasic"]
        driver_low = sd * out["driver"]

    t = eda.times
    tonic = np.interp(t, t_low, tonic_low)
    phasic = np.interp(t, t_low, phasic_low)
    residual = eda.values - tonic - phasic
    return EDADecomposition(
        tonic=Series(tonic, eda.fs, eda.units),
        phasic=Series(phasic, eda.fs, eda.units),
        residual=Series(residual, eda.fs, eda.units),
        driver=Series(driver_low, fs, eda.units),
    )


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties.

    Raises
    ------
    UndefinedCorrelationError
        If either input has zero rank variance (e.g. is constant).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 3:
        raise ValueError("spearman needs at least 3 samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("spearman inputs must be finite")
    ra = stats.rankdata(a) - (len(a) + 1) / 2.0
    rb = stats.rankdata(b) - (len(b) + 1) / 2.0
    sa = np.sqrt(np.dot(ra, ra))
    sb = np.sqrt(np.dot(rb, rb))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("zero rank variance; correlation undefined")
    rho = float(np.dot(ra, rb) / (sa * sb))
    return min(1.0, max(-1.0, rho))
