"""WAV reading/writing (RIFF, pcm16 or float32, interleaved channels)."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

PROCESSING_RATE = 16000


class WavError(IOError):
    pass


@dataclass(frozen=True)
class WavSpec:
    sample_rate: int
    channels: int
    encoding: str  # "pcm16" | "float32"


def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, WavSpec]:
    """Read a WAV file as float64 samples shaped (channels, n).

    pcm16 samples are scaled to [-1, 1); float32 samples are returned
    unchanged.  If ``expected_rate`` is given a mismatch raises WavError.
    """
    path = Path(path)
    if not path.exists():
        raise WavError(f"no such file: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    # scipy can surface a header without a fmt chunk as UnboundLocalError
    except (ValueError, EOFError, OSError, struct.error, UnboundLocalError) as exc:
        raise WavError(f"malformed WAV {path.name}: {exc}") from None
    if data.dtype == np.int16:
        samples, encoding = data.astype(np.float64) / 32768.0, "pcm16"
    elif data.dtype == np.float32:
        samples, encoding = data.astype(np.float64), "float32"
    else:
        raise WavError(f"unsupported encoding {data.dtype} in {path.name}")
    samples = samples.T if samples.ndim == 2 else samples[None, :]
    spec = WavSpec(int(rate), samples.shape[0], encoding)
    if expected_rate is not None and rate != expected_rate:
        raise WavError(f"{path.name}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return samples, spec


def write_wav(path, samples, sample_rate: int = PROCESSING_RATE,
              encoding: str = "float32") -> None:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if encoding == "float32":
        data = samples.T.astype(np.float32)
    elif encoding == "pcm16":
        data = np.clip(np.round(samples.T * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise WavError(f"unsupported encoding {encoding!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, sample_rate, np.ascontiguousarray(data))
