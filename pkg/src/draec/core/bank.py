"""Batched per-(bin, mic) adaptive filtering.

A *bank* is a set of independent filter states organised as ``G`` groups
(frequency bins) of ``M`` states (microphones).  All states of a group
share one regressor, assembled each frame from the group's source rows
``src[g, row, t - lag]`` according to a :class:`TapLayout`.

The compiled kernel is used when the extension is importable, otherwise
the numpy implementation.  ``DRAEC_BACKEND=numpy`` forces the fallback.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..config import DraecConfig
from . import _fallback
from .reference import FilterError

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

KERNELS = {"numpy": _fallback.run_bank}
if _kernels is not None:
    KERNELS["cython"] = _kernels.run_bank

_requested = os.environ.get("DRAEC_BACKEND", "").strip().lower()
if _requested and _requested not in KERNELS:
    raise ImportError(f"DRAEC_BACKEND={_requested!r} is not available; have {sorted(KERNELS)}")
BACKEND = _requested or ("cython" if "cython" in KERNELS else "numpy")


@dataclass(frozen=True)
class TapLayout:
    """Regressor entry ``j`` reads source row ``rows[j]`` at lag ``lags[j]``."""

    rows: np.ndarray
    lags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rows", np.ascontiguousarray(self.rows, dtype=np.intp))
        object.__setattr__(self, "lags", np.ascontiguousarray(self.lags, dtype=np.intp))

    def __len__(self):
        return len(self.rows)

    @classmethod
    def build(cls, lx: int, ly: int, n_mics: int, delta: int,
              playback: bool = True, first_mic_row: int | None = None) -> "TapLayout":
        """Playback taps (row 0, lags 0..lx-1) then, per channel n, taps at
        lags delta..delta+ly-1 from row ``first_mic_row + n``."""
        rows, lags = [], []
        if playback:
            rows += [0] * lx
            lags += list(range(lx))
        if first_mic_row is None:
            first_mic_row = 1 if playback else 0
        for n in range(n_mics):
            rows += [first_mic_row + n] * ly
            lags += list(range(delta, delta + ly))
        return cls(np.array(rows, dtype=np.intp), np.array(lags, dtype=np.intp))

    @classmethod
    def joint(cls, cfg: DraecConfig) -> "TapLayout":
        return cls.build(cfg.lx, cfg.ly, cfg.n_mics, cfg.delta)

    @classmethod
    def aec(cls, cfg: DraecConfig) -> "TapLayout":
        return cls.build(cfg.lx, 0, 0, cfg.delta)

    @classmethod
    def dr(cls, cfg: DraecConfig) -> "TapLayout":
        return cls.build(0, cfg.ly, cfg.n_mics, cfg.delta, playback=False)


@dataclass
class BankState:
    w: np.ndarray        # (G, M, L) w(t|t-1)
    P: np.ndarray        # (G, M, L, L) Phi(t|t-1)
    w_prev: np.ndarray   # (G, M, L)
    phi: np.ndarray      # (G, M) recursive posterior PSD
    phi_s: np.ndarray    # (G, M) source PSD used in the last gain
    phi_u: np.ndarray    # (G, M)

    @classmethod
    def initial(cls, G: int, M: int, L: int, cfg: DraecConfig) -> "BankState":
        if L == 0:
            raise FilterError("filter length is zero")
        P = np.zeros((G, M, L, L), dtype=np.complex128)
        P[..., np.arange(L), np.arange(L)] = cfg.init_cov
        return cls(
            w=np.zeros((G, M, L), dtype=np.complex128),
            P=P,
            w_prev=np.zeros((G, M, L), dtype=np.complex128),
            phi=np.ones((G, M)),
            phi_s=np.ones((G, M)),
            phi_u=np.full((G, M), cfg.eta),
        )

    def take(self, sl) -> "BankState":
        return BankState(*(np.ascontiguousarray(a[sl]) for a in self._arrays()))

    def _arrays(self):
        return (self.w, self.P, self.w_prev, self.phi, self.phi_s, self.phi_u)


@dataclass
class BankResult:
    s_hat: np.ndarray        # (G, M, T) posterior output
    s_prior: np.ndarray      # (G, M, T) prior error
    trace: np.ndarray | None  # (G, M, ceil(T/stride), L) posterior weights
    trace_stride: int
    state: BankState


def build_regressors(src: np.ndarray, taps: TapLayout) -> np.ndarray:
    """All regressors at once: (G, T, L) with zeros before the first frame."""
    G, _, T = src.shape
    Z = np.zeros((G, T, len(taps)), dtype=np.complex128)
    for j, (r, lag) in enumerate(zip(taps.rows, taps.lags)):
        if lag < T:
            Z[:, lag:, j] = src[:, r, :T - lag]
    return Z


def run_bank(src, targets, taps: TapLayout, cfg: DraecConfig, estimator: str = "kalman",
             state: BankState | None = None, trace_stride: int = 0,
             backend: str | None = None, workers: int = 1) -> BankResult:
    """Advance every state over all frames.

    Args:
        src: (G, R, T) complex regressor sources.
        targets: (G, M, T) complex signals to be filtered.
        taps: regressor layout, length L.
        estimator: "kalman" or "rls".
        state: initial state (modified in place); defaults to w=0, Phi=init_cov*I.
        trace_stride: record posterior weights every ``trace_stride`` frames (0: off).
        workers: split groups over this many threads.
    """
    src = np.ascontiguousarray(src, dtype=np.complex128)
    targets = np.ascontiguousarray(targets, dtype=np.complex128)
    if src.ndim != 3 or targets.ndim != 3:
        raise FilterError("src and targets must be 3-D (groups, rows/mics, frames)")
    G, M, T = targets.shape
    if src.shape[0] != G or src.shape[2] != T:
        raise FilterError(f"src shape {src.shape} does not match targets {targets.shape}")
    L = len(taps)
    if L and (taps.rows.max() >= src.shape[1] or taps.lags.min() < 0):
        raise FilterError("tap layout references missing source rows")
    if estimator not in ("kalman", "rls"):
        raise FilterError(f"unknown estimator {estimator!r}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(targets))):
        raise FilterError("non-finite input")
    if state is None:
        state = BankState.initial(G, M, L, cfg)
    kernel = KERNELS[backend or BACKEND]

    s_hat = np.zeros((G, M, T), dtype=np.complex128)
    s_prior = np.zeros((G, M, T), dtype=np.complex128)
    n_trace = -(-T // trace_stride) if trace_stride > 0 else 0
    trace = np.zeros((G, M, n_trace, max(L, 1)), dtype=np.complex128)
    params = np.array([
        cfg.transition, cfg.eta, cfg.alpha, cfg.lam, cfg.psd_floor,
        np.nan if cfg.fixed_phi_s is None else cfg.fixed_phi_s,
        np.nan if cfg.fixed_phi_u is None else cfg.fixed_phi_u,
    ])

    def work(sl):
        kernel(src[sl], targets[sl], taps.rows, taps.lags, params, estimator == "kalman",
               state.w[sl], state.P[sl], state.w_prev[sl], state.phi[sl], state.phi_s[sl],
               state.phi_u[sl], s_hat[sl], s_prior[sl], trace[sl], trace_stride)

    chunks = [slice(int(a[0]), int(a[-1]) + 1) for a in np.array_split(np.arange(G), max(1, min(workers, G)))]
    if len(chunks) == 1:
        work(chunks[0])
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            list(pool.map(work, chunks))
    return BankResult(s_hat, s_prior, trace if trace_stride > 0 else None, trace_stride, state)


def apply_trace(src, targets, taps: TapLayout, trace: np.ndarray) -> np.ndarray:
    """Re-apply a recorded full-stride weight sequence: Y - w_hat(t)^H z(t)."""
    targets = np.asarray(targets, dtype=np.complex128)
    if len(taps) == 0:
        return targets.copy()
    Z = build_regressors(np.asarray(src, dtype=np.complex128), taps)
    return targets - np.einsum("gmtl,gtl->gmt", trace.conj(), Z)
