"""Multichannel STFT analysis / overlap-add synthesis.

Square-root periodic Hann windows on both sides, which makes the
analysis-synthesis pair perfectly reconstructing at 50% overlap.  Frames
are zero-padded at the tail up to ``fft_size`` before the transform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import StftConfig


class StftError(ValueError):
    pass


@dataclass
class Spectrogram:
    """Complex one-sided spectra, ``data[channel, frame, bin]``."""

    data: np.ndarray
    cfg: StftConfig

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def bins(self) -> int:
        return self.data.shape[2]

    def by_bin(self) -> np.ndarray:
        """Contiguous (bin, channel, frame) view used by the filter kernels."""
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))

    @classmethod
    def from_bins(cls, arr: np.ndarray, cfg: StftConfig) -> "Spectrogram":
        return cls(np.ascontiguousarray(arr.transpose(1, 2, 0)), cfg)


def window(cfg: StftConfig) -> np.ndarray:
    n = np.arange(cfg.frame_len)
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.frame_len))


def n_frames(n_samples: int, cfg: StftConfig) -> int:
    return (n_samples - cfg.frame_len) // cfg.hop + 1


def analyze(signal, cfg: StftConfig = StftConfig()) -> Spectrogram:
    x = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    if x.shape[-1] < cfg.frame_len:
        raise StftError(f"signal has {x.shape[-1]} samples, need at least {cfg.frame_len}")
    T = n_frames(x.shape[-1], cfg)
    idx = np.arange(T)[:, None] * cfg.hop + np.arange(cfg.frame_len)[None, :]
    frames = x[:, idx] * window(cfg)
    return Spectrogram(np.fft.rfft(frames, n=cfg.fft_size, axis=-1), cfg)


def synthesize(spec: Spectrogram, cfg: StftConfig | None = None) -> np.ndarray:
    """Overlap-add inverse; returns (channels, (T-1)*hop + frame_len)."""
    cfg = cfg or spec.cfg
    if spec.bins != cfg.n_bins:
        raise StftError(f"spectrogram has {spec.bins} bins, config expects {cfg.n_bins}")
    C, T = spec.channels, spec.frames
    frames = np.fft.irfft(spec.data, n=cfg.fft_size, axis=-1)[..., :cfg.frame_len]
    frames *= window(cfg)
    out = np.zeros((C, (T - 1) * cfg.hop + cfg.frame_len))
    # frame_len / hop interleaved groups never overlap within a group
    step = cfg.frame_len // cfg.hop
    for k in range(step):
        sel = frames[:, k::step]
        start = k * cfg.hop
        out[:, start:start + sel.shape[1] * cfg.frame_len] += sel.reshape(C, -1)
    return out


def interior(n_samples: int, cfg: StftConfig) -> slice:
    """Sample range that excludes one frame at each edge."""
    return slice(cfg.frame_len, max(cfg.frame_len, n_samples - cfg.frame_len))
