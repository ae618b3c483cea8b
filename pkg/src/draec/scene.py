"""Synthetic acoustic scenes with ground-truth stems.

Rooms are simulated with the image method (uniform wall absorption,
seeded by Sabine's formula and refined against the simulated decay;
8-tap windowed-sinc fractional delays).  A scene keeps
every additive component of the microphone mixture so the metrics can
decompose processed outputs by source.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .config import DraecConfig, SceneOptions, StftConfig
from .stft import Spectrogram
from .wavio import read_wav, write_wav

SOUND_SPEED = 343.0
EARLY_MS = 50.0
STEMS = ("target_image", "full_target_image", "echo_image", "interference_image", "noise")
# stems that add up to the microphone mixture
MIX_STEMS = ("full_target_image", "echo_image", "interference_image", "noise")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple[float, float, float]
    rt60: float
    source_pos: tuple[float, float, float]
    loudspeaker_pos: tuple[float, float, float]
    mic_pos: tuple[tuple[float, float, float], ...]
    interferer_pos: tuple[float, float, float] | None = None
    sample_rate: int = 16000
    max_rir_len: int | None = None
    echo_rt60: float | None = None  # loudspeaker path; defaults to rt60

    def __post_init__(self):
        if self.rt60 < 0:
            raise SceneError("rt60 must be >= 0")
        pts = [self.source_pos, self.loudspeaker_pos, *self.mic_pos]
        if self.interferer_pos is not None:
            pts.append(self.interferer_pos)
        for p in pts:
            if not all(0 < c < d for c, d in zip(p, self.dimensions)):
                raise SceneError(f"position {p} is not strictly inside the room {self.dimensions}")
        mics = np.asarray(self.mic_pos, dtype=float)
        if len(mics) > 1 and np.min(np.linalg.norm(mics[:, None] - mics[None], axis=-1)
                                    + np.eye(len(mics))) <= 0:
            raise SceneError("microphones must be spatially distinct")


def sabine_absorption(dimensions, rt60: float) -> float:
    """Uniform absorption coefficient giving ``rt60`` by Sabine's formula."""
    lx, ly, lz = dimensions
    if rt60 == 0:
        return 1.0
    volume = lx * ly * lz
    area = 2 * (lx * ly + lx * lz + ly * lz)
    a = 0.161 * volume / (area * rt60)
    if a > 1:
        raise SceneError(f"rt60={rt60}s is too short for a {lx}x{ly}x{lz} m room (absorption {a:.2f} > 1)")
    return a


def image_method_rir(room: RoomSpec, src, mic, rt60: float | None = None,
                     n_samples: int | None = None) -> np.ndarray:
    """Room impulse response from ``src`` to ``mic`` (1/(4 pi r) spreading)."""
    rt60 = room.rt60 if rt60 is None else rt60
    fs = room.sample_rate
    direct = np.linalg.norm(np.subtract(src, mic)) / SOUND_SPEED * fs
    if n_samples is None:
        n_samples = room.max_rir_len or int(math.ceil(direct + max(rt60, EARLY_MS / 1000) * fs)) + 8
    beta = math.sqrt(1.0 - wall_absorption(tuple(room.dimensions), rt60, fs))
    return _image_rir(np.asarray(room.dimensions, dtype=float), beta, src, mic, fs, n_samples)


@lru_cache(maxsize=256)
def wall_absorption(dimensions: tuple, rt60: float, fs: int = 16000) -> float:
    """Absorption coefficient whose simulated decay matches ``rt60``.

    Starts from Sabine's value and rescales it by measured/requested T60
    on a fixed probe pair until they agree within 2%.  Shoebox image
    responses decay slower than Sabine predicts, hence the correction.
    """
    a = sabine_absorption(dimensions, rt60)
    if a >= 1.0:
        return 1.0
    dims = np.asarray(dimensions, dtype=float)
    p1, p2 = 0.31 * dims, 0.67 * dims
    n = int(math.ceil((np.linalg.norm(p1 - p2) / SOUND_SPEED + 1.2 * rt60) * fs))
    for _ in range(6):
        t60 = measure_t60(_image_rir(dims, math.sqrt(1.0 - a), p1, p2, fs, n), fs)
        if abs(t60 / rt60 - 1.0) < 0.02:
            break
        a = min(1.0, a * t60 / rt60)
    return a


def _image_rir(dims, beta, src, mic, fs, n_samples):
    src = np.asarray(src, dtype=float)
    mic = np.asarray(mic, dtype=float)
    max_dist = (n_samples + 4) / fs * SOUND_SPEED
    if beta == 0.0:
        n = np.zeros((1, 3), dtype=int)
        q = np.zeros((1, 3), dtype=int)
    else:
        reach = np.ceil(max_dist / (2 * dims)).astype(int) + 1
        grids = np.meshgrid(*(np.arange(-r, r + 1) for r in reach), indexing="ij")
        grid = np.stack([g.ravel() for g in grids], axis=1)
        n = np.tile(grid, (8, 1))
        q = np.repeat(np.array(list(np.ndindex(2, 2, 2))), len(grid), axis=0)
    img = (1 - 2 * q) * src + 2 * n * dims
    dist = np.linalg.norm(img - mic, axis=1)
    keep = dist <= max_dist
    dist, n, q = dist[keep], n[keep], q[keep]
    refl = np.sum(np.abs(n - q) + np.abs(n), axis=1)
    amp = beta ** refl / (4 * np.pi * np.maximum(dist, 1e-3))
    delay = dist / SOUND_SPEED * fs

    # 8-tap Hann-windowed sinc around each fractional delay
    base = np.floor(delay).astype(int)
    idx = base[:, None] + np.arange(-3, 5)[None, :]
    x = idx - delay[:, None]
    taps = np.sinc(x) * (0.5 + 0.5 * np.cos(np.pi * x / 4.5))
    valid = (idx >= 0) & (idx < n_samples)
    h = np.bincount(idx[valid], weights=(amp[:, None] * taps)[valid], minlength=n_samples)
    return h[:n_samples]


def direct_delay(room: RoomSpec, src, mic) -> float:
    return float(np.linalg.norm(np.subtract(src, mic)) / SOUND_SPEED * room.sample_rate)


def split_early(rir: np.ndarray, direct: float, fs: int, early_ms: float = EARLY_MS):
    """(early, late) parts; the cut sits ``early_ms`` after the direct path."""
    cut = int(math.floor(direct + early_ms * fs / 1000.0)) + 1
    early = rir.copy()
    early[cut:] = 0.0
    return early, rir - early


def measure_t60(rir: np.ndarray, fs: int, lo_db: float = -5.0, hi_db: float = -25.0) -> float:
    """T60 from a line fit to the Schroeder energy decay curve between lo_db and hi_db."""
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    edc = 10 * np.log10(np.maximum(energy / energy[0], 1e-300))
    sel = np.where((edc <= lo_db) & (edc >= hi_db))[0]
    if len(sel) < 2:
        raise SceneError("decay range not covered by the impulse response")
    slope, _ = np.polyfit(sel / fs, edc[sel], 1)
    return -60.0 / slope


def loudspeaker_nonlinearity(x, clip_threshold: float):
    if clip_threshold <= 0:
        raise SceneError("clip threshold must be positive")
    return np.clip(x, -clip_threshold, clip_threshold)


def speech_like(n: int, fs: int, rng: np.random.Generator, pause_prob: float = 0.2) -> np.ndarray:
    """Deterministic stand-in for speech: syllable-length bursts of noise shaped
    by random formant resonances, with occasional pauses.  RMS 0.1."""
    out = np.zeros(n)
    t = 0
    while t < n:
        seg = int(rng.uniform(0.12, 0.3) * fs)
        if rng.random() < pause_prob:
            t += int(rng.uniform(0.05, 0.25) * fs)
            continue
        seg = min(seg, n - t)
        a = np.array([1.0])
        for lo, hi in ((250, 900), (900, 2300), (2300, 3500)):
            f = rng.uniform(lo, hi)
            r = rng.uniform(0.94, 0.985)
            a = np.convolve(a, [1.0, -2 * r * np.cos(2 * np.pi * f / fs), r * r])
        burst = lfilter([1.0, -0.9], a, rng.standard_normal(seg + 256))[256:]
        burst /= np.sqrt(np.mean(burst ** 2)) + 1e-12
        out[t:t + seg] = burst * np.hanning(seg) * rng.uniform(0.5, 1.5)
        t += seg
    rms = np.sqrt(np.mean(out ** 2))
    return 0.1 * out / rms if rms > 0 else out


@dataclass
class Scene:
    mics: np.ndarray                  # (M, n)
    playback: np.ndarray              # (n,)
    stems: dict[str, np.ndarray]      # each (M, n)
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.mics.shape[1]

    def stem_sum(self) -> np.ndarray:
        return sum(self.stems[k] for k in MIX_STEMS)


def _power(x) -> float:
    return float(np.mean(np.square(x)))


def _convolve(sig, rir, n):
    return fftconvolve(sig, rir)[:n]


def synthesize_scene(speech, interference, playback, room: RoomSpec,
                     ser_db: float | None, sir_db: float | None, snr_db: float = math.inf,
                     seed: int = 0, clip_threshold: float | None = None) -> Scene:
    """Convolve sources with room responses and mix at the requested ratios.

    Ratios are measured on full-utterance power at the first microphone
    relative to the reverberant target image.  Without a target
    (``speech is None``) the echo keeps its natural level and the noise is
    set relative to the echo.
    """
    playback = np.asarray(playback, dtype=np.float64)
    n = len(playback)
    M = len(room.mic_pos)
    fs = room.sample_rate
    rng = np.random.default_rng(seed)
    zeros = np.zeros((M, n))

    echo_rt60 = room.rt60 if room.echo_rt60 is None else room.echo_rt60
    driven = playback if clip_threshold is None else loudspeaker_nonlinearity(playback, clip_threshold)
    echo = np.stack([_convolve(driven, image_method_rir(room, room.loudspeaker_pos, m, echo_rt60), n)
                     for m in room.mic_pos])

    if speech is not None:
        speech = np.asarray(speech, dtype=np.float64)[:n]
        full, early = [], []
        for m in room.mic_pos:
            rir = image_method_rir(room, room.source_pos, m)
            e, _ = split_early(rir, direct_delay(room, room.source_pos, m), fs)
            full.append(_convolve(speech, rir, n))
            early.append(_convolve(speech, e, n))
        full, early = np.stack(full), np.stack(early)
    else:
        full, early = zeros.copy(), zeros.copy()
    p_target = _power(full[0])

    if p_target > 0:
        if ser_db is None or not math.isfinite(ser_db):
            raise SceneError("a target is present but ser_db is not finite")
        p_echo = _power(echo[0])
        if p_echo > 0:
            echo *= math.sqrt(p_target / (p_echo * 10 ** (ser_db / 10)))
        ref_power = p_target
    else:
        if ser_db is not None and math.isfinite(ser_db):
            raise SceneError("silent target with a finite requested SER")
        ref_power = _power(echo[0])

    if interference is not None and sir_db is not None and math.isfinite(sir_db):
        if room.interferer_pos is None:
            raise SceneError("interference requested but the room has no interferer position")
        interference = np.asarray(interference, dtype=np.float64)[:n]
        interf = np.stack([_convolve(interference, image_method_rir(room, room.interferer_pos, m), n)
                           for m in room.mic_pos])
        p_int = _power(interf[0])
        if p_int > 0:
            interf *= math.sqrt(ref_power / (p_int * 10 ** (sir_db / 10)))
    else:
        interf = zeros.copy()

    if math.isfinite(snr_db):
        noise = rng.standard_normal((M, n))
        noise *= math.sqrt(ref_power / (_power(noise[0]) * 10 ** (snr_db / 10)))
    else:
        noise = zeros.copy()

    stems = {
        "target_image": early,
        "full_target_image": full,
        "echo_image": echo,
        "interference_image": interf,
        "noise": noise,
    }
    mics = full + echo + interf + noise
    meta = {
        "ser_db": ser_db, "sir_db": sir_db, "snr_db": snr_db, "rt60": room.rt60,
        "echo_rt60": echo_rt60, "seed": seed, "sample_rate": fs, "n_mics": M,
        "change_point": None, "single_talk": p_target == 0 and not np.any(interf),
        "clip_threshold": clip_threshold, "room": _room_dict(room),
    }
    return Scene(mics, playback.copy(), stems, meta)


def _room_dict(room: RoomSpec) -> dict:
    d = asdict(room)
    return {k: (list(map(list, v)) if k == "mic_pos" else (list(v) if isinstance(v, tuple) else v))
            for k, v in d.items()}


def apply_path_change(a: Scene, b: Scene) -> Scene:
    if a.mics.shape[0] != b.mics.shape[0]:
        raise SceneError("scenes differ in channel count")
    if a.meta.get("sample_rate") != b.meta.get("sample_rate"):
        raise SceneError("scenes differ in sample rate")
    if set(a.stems) != set(b.stems):
        raise SceneError("scenes carry different stems")
    stems = {k: np.concatenate([a.stems[k], b.stems[k]], axis=1) for k in a.stems}
    meta = dict(a.meta)
    meta["change_point"] = a.n_samples
    meta["second"] = {k: v for k, v in b.meta.items() if k != "second"}
    meta["single_talk"] = bool(a.meta.get("single_talk") and b.meta.get("single_talk"))
    return Scene(np.concatenate([a.mics, b.mics], axis=1),
                 np.concatenate([a.playback, b.playback]), stems, meta)


def sample_room(rng: np.random.Generator, rt60: float, n_mics: int = 2,
                fs: int = 16000, mic_spacing: float = 0.06,
                echo_rt60: float | None = None) -> RoomSpec:
    """Random shoebox room with a smart-speaker-like device.

    Room in [4,8]x[3,6]x[2.5,3.5] m, mics on a line, loudspeaker 5-15 cm
    from the nearest mic, target and interferer 1-3 m from the device.
    """
    for _ in range(1000):
        dims = (rng.uniform(4, 8), rng.uniform(3, 6), rng.uniform(2.5, 3.5))
        try:
            sabine_absorption(dims, rt60)
            if echo_rt60 is not None:
                sabine_absorption(dims, echo_rt60)
        except SceneError:
            continue
        center = np.array([rng.uniform(1.0, dims[0] - 1.0), rng.uniform(1.0, dims[1] - 1.0),
                           rng.uniform(0.8, min(1.5, dims[2] - 0.5))])
        offsets = (np.arange(n_mics) - (n_mics - 1) / 2) * mic_spacing
        mics = [tuple(center + [o, 0.0, 0.0]) for o in offsets]
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        spk = np.asarray(mics[0]) + direction * rng.uniform(0.05, 0.15)
        if np.min([np.linalg.norm(spk - np.asarray(m)) for m in mics]) < 0.05:
            spk = np.asarray(mics[0]) + direction * 0.1

        def far_point():
            for _ in range(100):
                az = rng.uniform(0, 2 * np.pi)
                r = rng.uniform(1.0, 3.0)
                p = center + [r * np.cos(az), r * np.sin(az), rng.uniform(-0.3, 0.5)]
                if all(0.3 < c < d - 0.3 for c, d in zip(p, dims)):
                    return tuple(p)
            return None

        src, itf = far_point(), far_point()
        if src is None or itf is None:
            continue
        try:
            return RoomSpec(tuple(dims), rt60, src, tuple(spk), tuple(mics), itf, fs,
                            echo_rt60=echo_rt60)
        except SceneError:
            continue
    raise SceneError("could not place a device in a random room")


def make_scene(opts: SceneOptions, n_mics: int = 2, fs: int = 16000,
               path_change: bool = False, echo_only: bool = False,
               echo_rt60: float | None = None) -> Scene:
    """Seeded end-to-end scene: synthetic far-end, near-end and interferer
    signals in a random room.  ``rt60 == 0`` keeps the echo path echoic
    (``echo_rt60``, default 0.3 s) while the target stays anechoic."""
    root = np.random.SeedSequence(opts.seed)
    parts = [_make_part(opts, n_mics, fs, echo_only, echo_rt60, child)
             for child in root.spawn(2 if path_change else 1)]
    scene = parts[0] if not path_change else apply_path_change(*parts)
    scene.meta["seed"] = opts.seed
    return scene


def _make_part(opts, n_mics, fs, echo_only, echo_rt60, seq):
    rng = np.random.default_rng(seq)
    n = int(round(opts.duration_s * fs))
    if echo_rt60 is None and opts.rt60 == 0:
        echo_rt60 = 0.3
    room = sample_room(rng, opts.rt60, n_mics, fs, echo_rt60=echo_rt60)
    far = speech_like(n, fs, rng, pause_prob=0.05)
    near = None if echo_only else speech_like(n, fs, rng)
    itf = None if echo_only or opts.sir_db is None else speech_like(n, fs, rng)
    return synthesize_scene(
        near, itf, far, room,
        ser_db=None if echo_only else opts.ser_db,
        sir_db=None if echo_only else opts.sir_db,
        snr_db=opts.snr_db, seed=int(rng.integers(2 ** 31)),
        clip_threshold=opts.clip_threshold)


def save_scene(scene: Scene, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fs = scene.meta.get("sample_rate", 16000)
    write_wav(d / "mixture.wav", scene.mics, fs)
    write_wav(d / "playback.wav", scene.playback[None, :], fs)
    for name, x in scene.stems.items():
        write_wav(d / f"{name}.wav", x, fs)
    (d / "meta.json").write_text(json.dumps(_jsonable(scene.meta), indent=2, sort_keys=True) + "\n")
    return d


def load_scene(directory) -> Scene:
    d = Path(directory)
    if not (d / "meta.json").exists():
        raise SceneError(f"{d} is not a scene directory (meta.json missing)")
    meta = json.loads((d / "meta.json").read_text())
    meta = {k: (math.inf if v == "inf" else -math.inf if v == "-inf" else v) for k, v in meta.items()}
    mics, _ = read_wav(d / "mixture.wav")
    playback, _ = read_wav(d / "playback.wav")
    stems = {}
    for name in STEMS:
        path = d / f"{name}.wav"
        if not path.exists():
            raise SceneError(f"missing stem {name}")
        stems[name] = read_wav(path)[0]
    return Scene(mics, playback[0], stems, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


@dataclass
class OracleScene:
    """STFT-domain scene generated exactly by the multichannel AR + echo model."""

    mics: Spectrogram
    playback: Spectrogram
    target: np.ndarray        # (M, T, F) direct source spectra
    weights: np.ndarray       # (F, M, L) true unified weights (conjugated coefficients)


def ar_oracle_scene(cfg: DraecConfig, n_frames: int, n_bins: int | None = None,
                    stft: StftConfig = StftConfig(), seed: int = 0,
                    ar_gain: float = 0.6, echo_gain: float = 1.0) -> OracleScene:
    """Y_m(t) = S_m(t) + sum_l B_{m,l} X(t-l) + sum_{n,l} C_{m,n,l} Y_n(t-delta-l).

    S and X are white circular Gaussian.  Each mic's AR coefficients have
    absolute sum ``ar_gain`` < 1, which keeps the recursion stable.
    """
    rng = np.random.default_rng(seed)
    F = stft.n_bins if n_bins is None else n_bins
    M, T = cfg.n_mics, n_frames

    def crand(*shape):
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)

    S = crand(F, M, T)
    X = crand(F, 1, T)
    B = echo_gain * crand(F, M, cfg.lx) * np.exp(-0.5 * np.arange(cfg.lx))
    C = crand(F, M, M, cfg.ly)
    if cfg.ly:
        C *= ar_gain / np.abs(C).sum(axis=(2, 3), keepdims=True)
    Y = np.zeros((F, M, T), dtype=np.complex128)
    for t in range(T):
        acc = S[:, :, t].copy()
        for l in range(min(cfg.lx, t + 1)):
            acc += B[:, :, l] * X[:, 0, t - l][:, None]
        for l in range(cfg.ly):
            tt = t - cfg.delta - l
            if tt >= 0:
                acc += np.einsum("fmn,fn->fm", C[:, :, :, l], Y[:, :, tt])
        Y[:, :, t] = acc
    w = np.concatenate([B, C.reshape(F, M, M * cfg.ly)], axis=2).conj()
    return OracleScene(Spectrogram.from_bins(Y, stft), Spectrogram.from_bins(X, stft),
                       S.transpose(1, 2, 0).copy(), w)
