"""Objective metrics: STOI, SI-SDR and per-order SHC error."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import firwin, resample_poly

from .errors import DomainError, ShapeError
from .sh_core import order_from_count

STOI_FS = 10000
_FRAME = 256
_NFFT = 512
_N_BANDS = 15
_MIN_FREQ = 150.0
_SEG = 30  # frames per 384 ms segment
_BETA_DB = -15.0
_DYN_RANGE = 40.0
SI_SDR_CAP = 80.0

_RESAMPLE_TAPS = 64
_KAISER_BETA = 12.0


def resample_to(x, fs_in: int, fs_out: int = STOI_FS) -> np.ndarray:
    """Polyphase windowed-sinc resampling with a fixed Kaiser(12) prototype.

    The prototype has 64 taps per polyphase branch (``64 * up + 1`` total,
    odd so the filter is zero-phase), so the output is bit-stable for a
    given rate pair.
    """
    fs_in, fs_out = int(round(fs_in)), int(round(fs_out))
    if fs_in == fs_out:
        return np.asarray(x, float)
    g = math.gcd(fs_in, fs_out)
    up, down = fs_out // g, fs_in // g
    # resample_poly applies the interpolation gain ``up`` itself
    h = firwin(_RESAMPLE_TAPS * up + 1, 1.0 / max(up, down), window=("kaiser", _KAISER_BETA))
    return resample_poly(np.asarray(x, float), up, down, window=h)


def _third_octave_matrix():
    freqs = np.linspace(0, STOI_FS, _NFFT + 1)[: _NFFT // 2 + 1]
    k = np.arange(_N_BANDS)
    cf = _MIN_FREQ * 2.0 ** (k / 3.0)
    lo = _MIN_FREQ * 2.0 ** ((2 * k - 1) / 6.0)
    hi = _MIN_FREQ * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((_N_BANDS, freqs.size))
    for i in range(_N_BANDS):
        a = np.argmin((freqs - lo[i]) ** 2)
        b = np.argmin((freqs - hi[i]) ** 2)
        obm[i, a:b] = 1.0
    return obm, cf


def _frames(x, hop):
    n = (x.size - _FRAME) // hop + 1
    idx = np.arange(n)[:, None] * hop + np.arange(_FRAME)[None, :]
    return x[idx]


def _remove_silent_frames(x, y):
    hop = _FRAME // 2
    win = np.hanning(_FRAME + 2)[1:-1]
    xf = _frames(x, hop) * win
    yf = _frames(y, hop) * win
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - _DYN_RANGE
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    length = (n - 1) * hop + _FRAME if n else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(n):
        xs[i * hop:i * hop + _FRAME] += xf[i]
        ys[i * hop:i * hop + _FRAME] += yf[i]
    return xs, ys


def _band_envelopes(x, obm):
    hop = _FRAME // 2
    win = np.hanning(_FRAME + 2)[1:-1]
    spec = np.fft.rfft(_frames(x, hop) * win, n=_NFFT, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)  # (band, frame)


def stoi(clean, processed, fs: float) -> float:
    """Short-time objective intelligibility (Taal et al.) in ``[0, 1]``-ish.

    Both signals are resampled to 10 kHz, frames more than 40 dB below the
    loudest clean frame are removed, and the mean correlation of clipped,
    normalized one-third-octave envelopes over 384 ms segments is returned.
    """
    x = np.asarray(clean, float).ravel()
    y = np.asarray(processed, float).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"clean {x.shape} and processed {y.shape} lengths differ")
    x, y = resample_to(x, fs), resample_to(y, fs)
    x, y = _remove_silent_frames(x, y)
    obm, _ = _third_octave_matrix()
    if x.size < _FRAME:
        raise DomainError("signal too short for STOI after silence removal")
    xb, yb = _band_envelopes(x, obm), _band_envelopes(y, obm)
    n_frames = xb.shape[1]
    if n_frames < _SEG:
        raise DomainError(f"STOI needs >= {_SEG} active frames (384 ms), got {n_frames}")
    clip = 10.0 ** (-_BETA_DB / 20.0)
    eps = np.finfo(float).eps
    scores = []
    for m in range(_SEG, n_frames + 1):
        xs = xb[:, m - _SEG:m]
        ys = yb[:, m - _SEG:m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + eps)
        yp = np.minimum(alpha * ys, xs * (1.0 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yp - yp.mean(axis=1, keepdims=True)
        num = np.sum(xc * yc, axis=1)
        den = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + eps
        scores.append(num / den)
    return float(np.mean(scores))


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at +80 dB."""
    s = np.asarray(reference, float).ravel()
    e = np.asarray(estimate, float).ravel()
    if s.shape != e.shape:
        raise ShapeError(f"reference {s.shape} and estimate {e.shape} lengths differ")
    ss = float(s @ s)
    if ss == 0:
        raise DomainError("reference signal is all zeros")
    target = (float(e @ s) / ss) * s
    err = float(np.sum((target - e) ** 2))
    tp = float(target @ target)
    if err == 0:
        return SI_SDR_CAP
    if tp == 0:
        return -SI_SDR_CAP
    return float(min(10.0 * math.log10(tp / err), SI_SDR_CAP))


def shc_order_mse(predicted, clean) -> list[float]:
    """Mean squared SHC error per order ``n = 0..N`` (over degree, frame and bin)."""
    predicted, clean = np.asarray(predicted), np.asarray(clean)
    if predicted.shape != clean.shape:
        raise ShapeError(f"predicted {predicted.shape} and clean {clean.shape} differ")
    order = order_from_count(predicted.shape[0])
    err = np.abs(predicted - clean) ** 2
    return [float(err[n * n:(n + 1) ** 2].mean()) for n in range(order + 1)]


@dataclass
class MetricsReport:
    stoi: float
    si_sdr_db: float
    shc_mse: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stoi"] = float(min(max(self.stoi, 0.0), 1.0))
        d["stoi_x100"] = 100.0 * d["stoi"]
        d["stoi_raw"] = self.stoi
        return d
