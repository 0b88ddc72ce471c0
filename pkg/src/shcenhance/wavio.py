"""Multichannel RIFF WAV read/write (PCM16 or float32)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

FORMATS = ("float32", "pcm16")


def write_wav(path, data, fs: int, fmt: str = "float32") -> Path:
    """Write ``data`` shaped ``(channel, sample)`` or ``(sample,)``."""
    path = Path(path)
    data = np.asarray(data, dtype=np.float64)
    frames = data.T if data.ndim == 2 else data
    if fmt == "float32":
        out = frames.astype(np.float32)
    elif fmt == "pcm16":
        out = np.round(np.clip(frames, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    else:
        raise ValueError(f"unsupported WAV format {fmt!r}; use one of {FORMATS}")
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, int(fs), np.ascontiguousarray(out))
    return path


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return ``(data, fs)`` with data float64 shaped ``(channel, sample)``."""
    fs, data = wavfile.read(Path(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    else:
        data = data.astype(np.float64)
    data = data[:, None] if data.ndim == 1 else data
    return np.ascontiguousarray(data.T), int(fs)
