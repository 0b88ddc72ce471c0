"""Sine-window STFT with 50% overlap-add resynthesis.

Frames start at sample 0 and the tail is zero-padded to a whole number of
hops. The same sine window is used for analysis and synthesis; at 50% overlap
``sin^2`` frames sum to one, so no synthesis normalization is needed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class StftConfig:
    win_len: int = 400
    hop: int = 200
    n_fft: int = 400

    def __post_init__(self):
        if self.n_fft < self.win_len or self.hop <= 0 or self.hop > self.win_len:
            raise DomainError(f"invalid STFT configuration {self}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def window(self) -> np.ndarray:
        return np.sin(math.pi * (np.arange(self.win_len) + 0.5) / self.win_len)

    def n_frames(self, length: int) -> int:
        return math.ceil(length / self.hop)


def stft(x, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex spectra ``(..., frame, bin)`` of real signals ``(..., sample)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise DomainError("cannot transform an empty signal")
    n_frames = cfg.n_frames(x.shape[-1])
    padded_len = (n_frames - 1) * cfg.hop + cfg.win_len
    pad = [(0, 0)] * (x.ndim - 1) + [(0, padded_len - x.shape[-1])]
    xp = np.pad(x, pad)
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.win_len)[None, :]
    frames = xp[..., idx] * cfg.window()
    return np.fft.rfft(frames, n=cfg.n_fft, axis=-1)


def istft(spec, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    """Overlap-add inverse of :func:`stft`; output trimmed to ``length`` samples."""
    spec = np.asarray(spec)
    if spec.ndim < 2 or spec.shape[-1] != cfg.n_bins:
        raise ShapeError(f"expected (..., frame, {cfg.n_bins}) spectra, got {spec.shape}")
    n_frames = spec.shape[-2]
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1)[..., :cfg.win_len] * cfg.window()
    total = (n_frames - 1) * cfg.hop + cfg.win_len
    out = np.zeros(spec.shape[:-2] + (total,))
    for f in range(n_frames):
        out[..., f * cfg.hop:f * cfg.hop + cfg.win_len] += frames[..., f, :]
    if length is None:
        length = n_frames * cfg.hop
    if length > total:
        out = np.pad(out, [(0, 0)] * (out.ndim - 1) + [(0, length - total)])
    return out[..., :length]
