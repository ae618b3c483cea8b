"""Frame-synchronous echo cancellation / dereverberation pipelines.

Three topologies, each with a Kalman or RLS estimator:

* ``joint``: one unified filter per (mic, bin) over playback taps and
  delayed taps of all raw microphone spectra.
* ``aec_then_dr``: playback-only filter, then a multichannel predictor on
  the delayed echo-cancelled outputs.
* ``dr_then_aec``: multichannel predictor on the delayed raw microphones,
  then a playback-only filter on its outputs.

Because the prediction delay is at least one frame, the second stage of
a cascade only ever reads past outputs of the first, so running stage 1
over the whole signal before stage 2 gives the same numbers as
interleaving them frame by frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AlgorithmVariant, DraecConfig, RunConfig
from .core import BankState, TapLayout, run_bank
from .stft import Spectrogram, analyze, synthesize
from .wavio import read_wav, write_wav


class PipelineError(ValueError):
    pass


@dataclass
class StageRecord:
    """What one adaptive stage did, enough to re-apply it to other signals.

    ``kind`` is "joint", "aec" or "dr"; ``trace`` holds posterior weights
    (bins, mics, frames/stride, taps), None when tracing was off.
    """

    kind: str
    taps: TapLayout
    trace: np.ndarray | None
    trace_stride: int
    state: BankState | None = None


@dataclass
class PipelineOutput:
    enhanced: Spectrogram
    intermediate: Spectrogram | None = None
    stages: list[StageRecord] = field(default_factory=list)

    @property
    def filter_trace(self) -> dict[str, np.ndarray]:
        """Weight norms per stage, (mics, bins, snapshots)."""
        out = {}
        for st in self.stages:
            if st.trace is not None:
                out[st.kind] = np.linalg.norm(st.trace, axis=-1).transpose(1, 0, 2)
        return out


def _check_inputs(mics: Spectrogram, playback: Spectrogram, cfg: DraecConfig):
    if playback.channels != 1:
        raise PipelineError(f"playback must have one channel, got {playback.channels}")
    if mics.channels != cfg.n_mics:
        raise PipelineError(f"got {mics.channels} microphone channels, config expects {cfg.n_mics}")
    if mics.frames != playback.frames or mics.bins != playback.bins:
        raise PipelineError(
            f"mic spectrogram {mics.data.shape[1:]} and playback {playback.data.shape[1:]} differ")


def _playback_by_bin(playback: Spectrogram, cfg: DraecConfig) -> np.ndarray:
    X = playback.by_bin()
    if cfg.bulk_delay:
        d = min(cfg.bulk_delay, X.shape[2])
        X = np.concatenate([np.zeros_like(X[..., :d]), X[..., :X.shape[2] - d]], axis=2)
    return X


def _stage(kind, src, targets, taps, cfg, estimator, trace_stride, workers, backend):
    if len(taps) == 0:
        return targets, StageRecord(kind, taps, None, trace_stride)
    res = run_bank(src, targets, taps, cfg, estimator, trace_stride=trace_stride,
                   workers=workers, backend=backend)
    return res.s_hat, StageRecord(kind, taps, res.trace, trace_stride, res.state)


def run_joint(mics: Spectrogram, playback: Spectrogram, cfg: DraecConfig,
              estimator: str = "kalman", trace_stride: int = 0, workers: int = 1,
              backend: str | None = None) -> PipelineOutput:
    _check_inputs(mics, playback, cfg)
    Y = mics.by_bin()
    src = np.concatenate([_playback_by_bin(playback, cfg), Y], axis=1)
    out, rec = _stage("joint", src, Y, TapLayout.joint(cfg), cfg, estimator,
                      trace_stride, workers, backend)
    return PipelineOutput(Spectrogram.from_bins(out, mics.cfg), None, [rec])


def run_aec_only(mics, playback, cfg, estimator="kalman", trace_stride=0, workers=1,
                 backend=None) -> PipelineOutput:
    _check_inputs(mics, playback, cfg)
    out, rec = _stage("aec", _playback_by_bin(playback, cfg), mics.by_bin(), TapLayout.aec(cfg),
                      cfg, estimator, trace_stride, workers, backend)
    return PipelineOutput(Spectrogram.from_bins(out, mics.cfg), None, [rec])


def run_dr_only(mics, playback, cfg, estimator="kalman", trace_stride=0, workers=1,
                backend=None) -> PipelineOutput:
    _check_inputs(mics, playback, cfg)
    Y = mics.by_bin()
    out, rec = _stage("dr", Y, Y, TapLayout.dr(cfg), cfg, estimator, trace_stride, workers, backend)
    return PipelineOutput(Spectrogram.from_bins(out, mics.cfg), None, [rec])


def run_aec_then_dr(mics: Spectrogram, playback: Spectrogram, cfg: DraecConfig,
                    estimator: str = "kalman", trace_stride: int = 0, workers: int = 1,
                    backend: str | None = None) -> PipelineOutput:
    _check_inputs(mics, playback, cfg)
    s_bar, rec1 = _stage("aec", _playback_by_bin(playback, cfg), mics.by_bin(),
                         TapLayout.aec(cfg), cfg, estimator, trace_stride, workers, backend)
    out, rec2 = _stage("dr", s_bar, s_bar, TapLayout.dr(cfg), cfg, estimator,
                       trace_stride, workers, backend)
    return PipelineOutput(Spectrogram.from_bins(out, mics.cfg),
                          Spectrogram.from_bins(s_bar, mics.cfg), [rec1, rec2])


def run_dr_then_aec(mics: Spectrogram, playback: Spectrogram, cfg: DraecConfig,
                    estimator: str = "kalman", trace_stride: int = 0, workers: int = 1,
                    backend: str | None = None) -> PipelineOutput:
    _check_inputs(mics, playback, cfg)
    Y = mics.by_bin()
    d, rec1 = _stage("dr", Y, Y, TapLayout.dr(cfg), cfg, estimator, trace_stride, workers, backend)
    out, rec2 = _stage("aec", _playback_by_bin(playback, cfg), d, TapLayout.aec(cfg),
                       cfg, estimator, trace_stride, workers, backend)
    return PipelineOutput(Spectrogram.from_bins(out, mics.cfg),
                          Spectrogram.from_bins(d, mics.cfg), [rec1, rec2])


TOPOLOGY_RUNNERS = {
    "joint": run_joint,
    "aec_then_dr": run_aec_then_dr,
    "dr_then_aec": run_dr_then_aec,
}


def run_variant(variant: AlgorithmVariant | str, mics: Spectrogram, playback: Spectrogram,
                cfg: DraecConfig, **kw) -> PipelineOutput:
    if isinstance(variant, str):
        variant = AlgorithmVariant.parse(variant)
    return TOPOLOGY_RUNNERS[variant.topology](mics, playback, cfg, variant.estimator, **kw)


def process_signals(mic_signals, playback_signal, cfg: RunConfig,
                    variant: AlgorithmVariant | str | None = None,
                    trace_stride: int = 0) -> tuple[np.ndarray, PipelineOutput]:
    """analyze -> pipeline -> synthesize.  Returns time signals (mics, n)."""
    mic_signals = np.atleast_2d(mic_signals)
    playback_signal = np.atleast_2d(playback_signal)
    if mic_signals.shape[1] != playback_signal.shape[1]:
        raise PipelineError("microphone and playback signals differ in length")
    variant = variant or cfg.pipeline.variant
    out = run_variant(variant, analyze(mic_signals, cfg.stft), analyze(playback_signal, cfg.stft),
                      cfg.filter, trace_stride=trace_stride, workers=cfg.pipeline.workers)
    enhanced = synthesize(out.enhanced)
    full = np.zeros_like(mic_signals, dtype=np.float64)
    full[:, :enhanced.shape[1]] = enhanced
    return full, out


def process_wav(mic_path, playback_path, cfg: RunConfig, variant=None, out_path=None):
    """Enhance a multichannel mic WAV given the playback WAV.

    Output length equals the input length; samples past the last full
    frame are zero.
    """
    rate = cfg.stft.sample_rate
    mics, _ = read_wav(mic_path, expected_rate=rate)
    playback, pspec = read_wav(playback_path, expected_rate=rate)
    if pspec.channels != 1:
        raise PipelineError(f"playback file has {pspec.channels} channels, expected 1")
    if mics.shape[0] != cfg.filter.n_mics:
        raise PipelineError(
            f"mic file has {mics.shape[0]} channels, config expects {cfg.filter.n_mics}")
    n = min(mics.shape[1], playback.shape[1])
    enhanced, _ = process_signals(mics[:, :n], playback[:, :n], cfg, variant)
    if out_path is not None:
        write_wav(Path(out_path), enhanced, rate)
    return enhanced
