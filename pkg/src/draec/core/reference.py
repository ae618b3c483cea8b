"""Single-state adaptive filter steps.

These operate on one (microphone, bin) state at a time and spell the
recursions out with full matrices.  They are the readable reference for
the batched kernels in :mod:`draec.core.bank`, which must agree with them.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..config import DraecConfig


class FilterError(ValueError):
    pass


@dataclass(frozen=True)
class FilterState:
    w_pred: np.ndarray      # w(t|t-1)
    Phi_pred: np.ndarray    # Phi(t|t-1)
    w_prev: np.ndarray      # w_hat(t-1)
    phi_s_hat: float
    phi_recursive: float
    phi_u: float


@dataclass(frozen=True)
class StepOutput:
    s_hat: complex
    s_prior: complex
    gain: np.ndarray


def build_regressor(playback_history, mic_history, cfg: DraecConfig) -> np.ndarray:
    """Stack playback taps and delayed microphone taps.

    ``playback_history[l]`` is X(t-l) for l = 0..lx-1 and
    ``mic_history[n][l]`` is Y_n(t-delta-l) for l = 0..ly-1.  Shorter
    histories are zero-filled (time before the first frame).
    """
    z = np.zeros(cfg.length, dtype=np.complex128)
    x = np.asarray(playback_history, dtype=np.complex128).ravel()[:cfg.lx]
    z[:len(x)] = x
    mic_history = np.zeros((cfg.n_mics, 0)) if mic_history is None else mic_history
    for n in range(cfg.n_mics):
        y = np.asarray(mic_history[n], dtype=np.complex128).ravel()[:cfg.ly]
        start = cfg.lx + n * cfg.ly
        z[start:start + len(y)] = y
    return z


def init_state(cfg: DraecConfig) -> FilterState:
    L = cfg.length
    if L == 0:
        raise FilterError("filter length is zero")
    return FilterState(
        w_pred=np.zeros(L, dtype=np.complex128),
        Phi_pred=cfg.init_cov * np.eye(L, dtype=np.complex128),
        w_prev=np.zeros(L, dtype=np.complex128),
        phi_s_hat=1.0,
        phi_recursive=1.0,
        phi_u=cfg.eta,
    )


def estimate_process_noise(w_new, w_old, cfg: DraecConfig) -> float:
    """Coefficient-drift variance: mean squared change of the weights plus eta."""
    w_new = np.asarray(w_new)
    w_old = np.asarray(w_old)
    if w_new.shape != w_old.shape:
        raise FilterError("weight vectors differ in length")
    d = w_new - w_old
    return float(np.real(np.vdot(d, d))) / d.size + cfg.eta


def estimate_psd(phi_prev: float, s_prior: complex, s_post: complex, alpha: float,
                 psd_floor: float = 1e-10) -> tuple[float, float]:
    """Returns (phi_s_hat(t), phi(t)); both smooth the previous phi(t-1)."""
    phi_s_hat = alpha * phi_prev + (1 - alpha) * abs(s_prior) ** 2
    phi_new = alpha * phi_prev + (1 - alpha) * abs(s_post) ** 2
    return max(phi_s_hat, psd_floor), max(phi_new, psd_floor)


def _check_inputs(state: FilterState, z, Y):
    z = np.asarray(z, dtype=np.complex128)
    if z.shape != state.w_pred.shape:
        raise FilterError(f"regressor length {z.size} != filter length {state.w_pred.size}")
    if not (np.all(np.isfinite(z)) and np.isfinite(Y)):
        raise FilterError("non-finite input")
    return z, complex(Y)


def kalman_step(state: FilterState, z, Y, cfg: DraecConfig) -> tuple[StepOutput, FilterState]:
    z, Y = _check_inputs(state, z, Y)
    w, P = state.w_pred, state.Phi_pred
    s_prior = Y - np.vdot(w, z)
    if cfg.fixed_phi_s is not None:
        phi_s = cfg.fixed_phi_s
    else:
        phi_s, _ = estimate_psd(state.phi_recursive, s_prior, 0.0, cfg.alpha, cfg.psd_floor)
    Pz = P @ z
    denom = max(phi_s + np.real(np.vdot(z, Pz)), cfg.psd_floor)
    k = Pz / denom
    w_hat = w + k * np.conj(s_prior)
    Phi = (np.eye(len(z)) - np.outer(k, z.conj())) @ P
    Phi = 0.5 * (Phi + Phi.conj().T)
    s_hat = Y - np.vdot(w_hat, z)
    _, phi_rec = estimate_psd(state.phi_recursive, s_prior, s_hat, cfg.alpha, cfg.psd_floor)
    if cfg.fixed_phi_u is not None:
        phi_u = cfg.fixed_phi_u
    else:
        phi_u = estimate_process_noise(w_hat, state.w_prev, cfg)
    A = cfg.transition
    new = FilterState(
        w_pred=A * w_hat,
        Phi_pred=A * A * Phi + phi_u * np.eye(len(z)),
        w_prev=w_hat,
        phi_s_hat=phi_s,
        phi_recursive=phi_rec,
        phi_u=phi_u,
    )
    return StepOutput(s_hat, s_prior, k), new


def rls_step(state: FilterState, z, Y, cfg: DraecConfig) -> tuple[StepOutput, FilterState]:
    """Exponentially weighted RLS; ``Phi_pred`` holds the inverse correlation."""
    z, Y = _check_inputs(state, z, Y)
    w, P = state.w_pred, state.Phi_pred
    e = Y - np.vdot(w, z)
    Pz = P @ z
    denom = max(cfg.lam + np.real(np.vdot(z, Pz)), cfg.psd_floor)
    k = Pz / denom
    w_hat = w + k * np.conj(e)
    Phi = (P - np.outer(k, z.conj() @ P)) / cfg.lam
    Phi = 0.5 * (Phi + Phi.conj().T)
    s_hat = Y - np.vdot(w_hat, z)
    new = replace(state, w_pred=w_hat, Phi_pred=Phi, w_prev=w_hat)
    return StepOutput(s_hat, e, k), new
