"""Objective measures: ERLE over time, projection SDR, SIER via shadow filtering."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_toeplitz
from scipy.signal import fftconvolve

from .config import DraecConfig, MetricsOptions, StftConfig
from .core import apply_trace
from .pipelines import PipelineOutput
from .stft import Spectrogram, analyze, interior, synthesize

ERLE_CAP_DB = 80.0
SDR_CAP_DB = 60.0
SIER_CAP_DB = 80.0

CSV_FIELDS = ("scene", "variant", "erle_steady_db", "sdr_in_db", "sdr_out_db",
              "sdr_improvement_db", "sier_in_db", "sier_out_db", "sier_improvement_db")


class MetricsError(ValueError):
    pass


def _ratio_db(num: float, den: float, cap: float) -> float:
    if den <= 0:
        return cap if num > 0 else 0.0
    if num <= 0:
        return -cap
    return float(np.clip(10 * np.log10(num / den), -cap, cap))


@dataclass
class ErleCurve:
    times: np.ndarray   # window centres, s
    db: np.ndarray


def erle(mic, out, fs: int = 16000, window_s: float = 1.0, hop_s: float = 0.25) -> ErleCurve:
    """Sliding-window 10*log10(P_in / P_out), capped at +/-80 dB."""
    mic = np.asarray(mic, dtype=np.float64)
    out = np.asarray(out, dtype=np.float64)
    if mic.shape != out.shape:
        raise MetricsError(f"length mismatch {mic.shape} vs {out.shape}")
    win = int(round(window_s * fs))
    hop = int(round(hop_s * fs))
    starts = np.arange(0, max(len(mic) - win, 0) + 1, hop)
    c_in = np.concatenate([[0.0], np.cumsum(mic ** 2)])
    c_out = np.concatenate([[0.0], np.cumsum(out ** 2)])
    vals = []
    for s in starts:
        e = min(s + win, len(mic))
        vals.append(_ratio_db(c_in[e] - c_in[s], max(c_out[e] - c_out[s], 0.0), ERLE_CAP_DB))
    return ErleCurve((starts + win / 2) / fs, np.array(vals))


def steady_erle(curve: ErleCurve, end_s: float, fraction: float = 0.25) -> float:
    """Mean ERLE of windows centred in the last ``fraction`` of [0, end_s)."""
    sel = (curve.times >= (1 - fraction) * end_s) & (curve.times < end_s)
    if not np.any(sel):
        raise MetricsError("no ERLE window in the steady-state region")
    return float(np.mean(curve.db[sel]))


def sdr(reference, estimate, taps: int = 32) -> float:
    """Signal-to-distortion ratio allowing a ``taps``-long FIR on the reference.

    The estimate is projected onto the span of delayed copies of the
    reference (zero-padded); the projection is the signal part, the rest is
    distortion.
    """
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise MetricsError(f"length mismatch {ref.shape} vs {est.shape}")
    if not np.any(ref):
        raise MetricsError("reference is all zeros")
    n = len(ref)
    nfft = 1 << int(np.ceil(np.log2(n + taps - 1)))
    R = np.fft.rfft(ref, nfft)
    E = np.fft.rfft(est, nfft)
    acf = np.fft.irfft(np.abs(R) ** 2, nfft)[:taps]
    xcorr = np.fft.irfft(np.conj(R) * E, nfft)[:taps]
    coeffs = solve_toeplitz(acf, xcorr)
    proj = fftconvolve(ref, coeffs)
    resid = np.concatenate([est, np.zeros(taps - 1)]) - proj
    return _ratio_db(float(np.sum(proj ** 2)), float(np.sum(resid ** 2)), SDR_CAP_DB)


def shadow_decompose(run: PipelineOutput, stems: dict[str, Spectrogram], playback: Spectrogram,
                     cfg: DraecConfig, echo_stem: str = "echo_image") -> dict[str, Spectrogram]:
    """Re-apply a run's recorded weights to each stem separately.

    The playback regressor belongs to the echo stem; every other stem sees
    zero playback.  Because the output is linear in (Y, z) for a fixed
    weight sequence, the components sum to the processed mixture.
    """
    for st in run.stages:
        if len(st.taps) and (st.trace is None or st.trace_stride != 1):
            raise MetricsError(f"stage '{st.kind}' has no full-stride weight trace")
    X = playback.by_bin()
    if cfg.bulk_delay:
        d = min(cfg.bulk_delay, X.shape[2])
        X = np.concatenate([np.zeros_like(X[..., :d]), X[..., :X.shape[2] - d]], axis=2)
    out = {}
    for name, spec in stems.items():
        cur = spec.by_bin()
        Xs = X if name == echo_stem else np.zeros_like(X)
        for st in run.stages:
            if not len(st.taps):
                continue
            if st.kind == "joint":
                src = np.concatenate([Xs, cur], axis=1)
            elif st.kind == "aec":
                src = Xs
            else:
                src = cur
            cur = apply_trace(src, cur, st.taps, st.trace)
        out[name] = Spectrogram.from_bins(cur, spec.cfg)
    return out


@dataclass
class SierResult:
    input_db: float
    output_db: float
    improvement_db: float


def sier(target_comp, interference_comp, echo_comp, target_in, interference_in, echo_in) -> SierResult:
    """Target to interference-plus-echo power ratio before and after processing."""
    def p(x):
        return float(np.sum(np.square(x)))
    before = _ratio_db(p(target_in), p(interference_in) + p(echo_in), SIER_CAP_DB)
    after = _ratio_db(p(target_comp), p(interference_comp) + p(echo_comp), SIER_CAP_DB)
    return SierResult(before, after, after - before)


@dataclass
class MetricsReport:
    variant: str
    scene: str = ""
    erle_times: list = field(default_factory=list)
    erle_db: list = field(default_factory=list)
    erle_steady_db: float | None = None
    sdr_in_db: float | None = None
    sdr_out_db: float | None = None
    sdr_improvement_db: float | None = None
    sier_in_db: float | None = None
    sier_out_db: float | None = None
    sier_improvement_db: float | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_finite(asdict(self)), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def append_csv(path, reports) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new:
            writer.writeheader()
        for r in reports:
            writer.writerow(r.csv_row())


def evaluate(scene, enhanced, variant: str, stft: StftConfig = StftConfig(),
             opts: MetricsOptions = MetricsOptions(), components: dict | None = None,
             scene_name: str = "") -> MetricsReport:
    """Metrics for one processed scene.

    ``enhanced`` is the processed time signal (M, n); ``components`` the
    shadow-filtered stems as time signals, needed for SIER and for ERLE
    in double talk.  Edge frames are excluded from SDR/SIER.
    """
    fs = stft.sample_rate
    enhanced = np.asarray(enhanced, dtype=np.float64)
    n = min(scene.n_samples, enhanced.shape[1])
    mics = scene.mics[:, :n]
    enhanced = enhanced[:, :n]
    core = interior(n, stft)
    rep = MetricsReport(variant=variant, scene=scene_name,
                        meta={k: v for k, v in scene.meta.items() if k != "room"})

    end = scene.meta.get("change_point") or n
    if scene.meta.get("single_talk"):
        curve = erle(mics[0], enhanced[0], fs, opts.erle_window_s, opts.erle_hop_s)
    elif components is not None and np.any(scene.stems["echo_image"]):
        curve = erle(scene.stems["echo_image"][0, :n], components["echo_image"][0, :n], fs,
                     opts.erle_window_s, opts.erle_hop_s)
    else:
        curve = None
    if curve is not None and len(curve.db):
        rep.erle_times = curve.times.tolist()
        rep.erle_db = curve.db.tolist()
        try:
            rep.erle_steady_db = steady_erle(curve, end / fs)
        except MetricsError:
            rep.erle_steady_db = None

    ref = scene.stems["target_image"][:, :n]
    if np.any(ref[:, core]):
        sdr_in = np.mean([sdr(ref[m, core], mics[m, core], opts.sdr_taps) for m in range(len(ref))])
        sdr_out = np.mean([sdr(ref[m, core], enhanced[m, core], opts.sdr_taps) for m in range(len(ref))])
        rep.sdr_in_db, rep.sdr_out_db = float(sdr_in), float(sdr_out)
        rep.sdr_improvement_db = float(sdr_out - sdr_in)

    if components is not None:
        st = scene.stems
        res = sier(components["full_target_image"][:, core], components["interference_image"][:, core],
                   components["echo_image"][:, core], st["full_target_image"][:, core],
                   st["interference_image"][:, core], st["echo_image"][:, core])
        rep.sier_in_db, rep.sier_out_db, rep.sier_improvement_db = (
            res.input_db, res.output_db, res.improvement_db)
    return rep


def shadow_components(scene, run: PipelineOutput, stft: StftConfig, cfg: DraecConfig) -> dict:
    """Shadow-filtered mixture stems as time signals (M, n)."""
    stems = {k: analyze(scene.stems[k], stft) for k in
             ("full_target_image", "echo_image", "interference_image", "noise")}
    comps = shadow_decompose(run, stems, analyze(scene.playback[None, :], stft), cfg)
    out = {}
    for k, spec in comps.items():
        x = synthesize(spec)
        full = np.zeros((x.shape[0], scene.n_samples))
        full[:, :x.shape[1]] = x
        out[k] = full
    return out
