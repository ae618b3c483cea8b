import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from draec.config import DraecConfig
from draec.core.bank import KERNELS
from draec.core import (BankState, FilterError, TapLayout, apply_trace, build_regressor,
                        build_regressors, estimate_process_noise, estimate_psd, init_state,
                        kalman_step, rls_step, run_bank)

from conftest import crandn

BACKENDS = sorted(KERNELS)


def naive_regressor(X, Ys, t, cfg):
    """Index-by-index construction, independent of build_regressor."""
    z = []
    for l in range(cfg.lx):
        z.append(X[t - l] if t - l >= 0 else 0)
    for n in range(cfg.n_mics):
        for l in range(cfg.ly):
            tt = t - cfg.delta - l
            z.append(Ys[n][tt] if tt >= 0 else 0)
    return np.array(z, dtype=complex)


def histories(X, Ys, t, cfg):
    ph = [X[t - l] if t - l >= 0 else 0 for l in range(cfg.lx)]
    mh = [[Y[t - cfg.delta - l] if t - cfg.delta - l >= 0 else 0 for l in range(cfg.ly)] for Y in Ys]
    return ph, mh


def reference_run(X, Ys, targets, cfg, step=kalman_step):
    """Loop the single-state reference over frames for every target channel."""
    out = np.zeros((len(targets), len(X)), dtype=complex)
    for m, Y in enumerate(targets):
        state = init_state(cfg)
        for t in range(len(X)):
            ph, mh = histories(X, Ys, t, cfg)
            o, state = step(state, build_regressor(ph, mh, cfg), Y[t], cfg)
            out[m, t] = o.s_hat
    return out


# -- regressor ----------------------------------------------------------------

def test_regressor_zero_history():
    cfg = DraecConfig()
    z = build_regressor([], np.zeros((2, 0)), cfg)
    assert z.shape == (15,) and not np.any(z)


def test_regressor_small_layout():
    cfg = DraecConfig(lx=2, ly=1, n_mics=2, delta=2)
    X = np.array([10, 11, 12, 13], dtype=complex)
    Y1 = np.array([20, 21, 22, 23], dtype=complex)
    Y2 = np.array([30, 31, 32, 33], dtype=complex)
    ph, mh = histories(X, [Y1, Y2], 3, cfg)
    assert np.array_equal(build_regressor(ph, mh, cfg), [13, 12, 21, 31])


@pytest.mark.parametrize("lx,ly,M,delta", [(5, 5, 2, 2), (0, 3, 3, 1), (4, 0, 2, 2), (3, 2, 1, 4)])
def test_regressor_matches_naive_oracle(rng, lx, ly, M, delta):
    cfg = DraecConfig(lx=lx, ly=ly, n_mics=M, delta=delta)
    T = 30
    X = crandn(rng, T)
    Ys = crandn(rng, M, T)
    src = np.concatenate([X[None], Ys])[None]
    Z = build_regressors(src, TapLayout.joint(cfg))[0]
    for t in range(T):
        ph, mh = histories(X, Ys, t, cfg)
        oracle = naive_regressor(X, Ys, t, cfg)
        assert np.array_equal(build_regressor(ph, mh, cfg), oracle)
        assert np.array_equal(Z[t], oracle)


# -- scalar estimators ---------------------------------------------------------

def test_process_noise_values():
    cfg = DraecConfig()
    w = np.ones(15, dtype=complex)
    assert estimate_process_noise(w, w, cfg) == pytest.approx(1e-4)
    d = np.zeros(15, dtype=complex)
    d[:3] = np.sqrt(0.05)
    assert estimate_process_noise(w + d, w, cfg) == pytest.approx(0.0101, abs=1e-12)
    with pytest.raises(FilterError):
        estimate_process_noise(np.ones(3), np.ones(4), cfg)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 2 ** 31))
def test_process_noise_homogeneity(c, seed):
    cfg = DraecConfig()
    rng = np.random.default_rng(seed)
    w_old, d = crandn(rng, 15), crandn(rng, 15)
    base = estimate_process_noise(w_old + d, w_old, cfg) - cfg.eta
    scaled = estimate_process_noise(w_old + c * d, w_old, cfg) - cfg.eta
    assert scaled == pytest.approx(c * c * base, rel=1e-9)


def test_psd_estimates():
    assert estimate_psd(1.0, np.sqrt(2), 0.0, 0.8)[0] == pytest.approx(1.2)
    assert estimate_psd(0.7, 5 + 1j, 3.0, 1.0) == (0.7, 0.7)
    phi, seq = 1.0, []
    for _ in range(200):
        _, phi = estimate_psd(phi, 0, 0, 0.8, 1e-10)
        seq.append(phi)
    assert seq[0] == pytest.approx(0.8) and seq[10] == pytest.approx(0.8 ** 11)
    assert seq[-1] == 1e-10


def test_init_state():
    s = init_state(DraecConfig())
    assert s.w_pred.shape == (15,) and not np.any(s.w_pred)
    assert np.array_equal(s.Phi_pred, np.eye(15))
    assert init_state(DraecConfig(lx=0, ly=1, n_mics=1)).w_pred.shape == (1,)
    a, b = init_state(DraecConfig()), init_state(DraecConfig())
    assert np.array_equal(a.Phi_pred, b.Phi_pred) and a.phi_u == b.phi_u


# -- single steps -----------------------------------------------------------------

def test_kalman_scalar_hand_example():
    cfg = DraecConfig(lx=1, ly=0, n_mics=1, fixed_phi_s=1.0, fixed_phi_u=0.0)
    out, new = kalman_step(init_state(cfg), [1.0], 1.0, cfg)
    assert out.s_prior == 1
    assert out.gain[0] == pytest.approx(0.5)
    assert new.w_prev[0] == pytest.approx(0.5)
    assert new.Phi_pred[0, 0].real == pytest.approx(0.5)
    assert out.s_hat == pytest.approx(0.5)


def test_zero_regressor_kalman(rng):
    cfg = DraecConfig()
    st0 = init_state(cfg)
    st0 = st0.__class__(crandn(rng, 15), st0.Phi_pred * 2, st0.w_prev, 1, 1, cfg.eta)
    out, new = kalman_step(st0, np.zeros(15), 0.3 - 0.2j, cfg)
    assert not np.any(out.gain)
    assert out.s_hat == 0.3 - 0.2j
    np.testing.assert_array_equal(new.w_prev, st0.w_pred)
    # Phi unchanged by the update, predict adds phi_u I
    np.testing.assert_allclose(new.Phi_pred, st0.Phi_pred + new.phi_u * np.eye(15))


def test_zero_regressor_rls(rng):
    cfg = DraecConfig(lam=1.0)
    st0 = init_state(cfg)
    st0 = st0.__class__(crandn(rng, 15), st0.Phi_pred, st0.w_prev, 1, 1, cfg.eta)
    out, new = rls_step(st0, np.zeros(15), 2j, cfg)
    assert out.s_hat == 2j
    np.testing.assert_array_equal(new.w_pred, st0.w_pred)


def test_rls_scalar_convergence(rng):
    cfg = DraecConfig(lx=1, ly=0, n_mics=1, lam=1.0)
    state = init_state(cfg)
    # the Phi(0) = I prior biases the estimate by 0.5 / (1 + sum|z|^2), so the
    # excitation needs a few units of power to get within 1e-3 in 200 steps
    z = 2 * crandn(rng, 200)
    Y = 0.5 * z          # Y = w^H z with w = 0.5
    for t in range(200):
        _, state = rls_step(state, [z[t]], Y[t], cfg)
    assert abs(state.w_pred[0] - 0.5) <= 1e-3
    # regularised batch least squares gives the same weight
    w_ls = np.sum(np.conj(Y) * z) / (1.0 + np.sum(np.abs(z) ** 2))
    assert state.w_pred[0] == pytest.approx(np.conj(w_ls), abs=1e-10)


def test_kalman_equals_rls_without_process_noise(rng):
    kcfg = DraecConfig(fixed_phi_s=1.0, fixed_phi_u=0.0, transition=1.0)
    rcfg = DraecConfig(lam=1.0)
    ks, rs = init_state(kcfg), init_state(rcfg)
    dev = 0.0
    for _ in range(100):
        z, Y = crandn(rng, 15), crandn(rng)
        ko, ks = kalman_step(ks, z, Y, kcfg)
        ro, rs = rls_step(rs, z, Y, rcfg)
        dev = max(dev, abs(ko.s_hat - ro.s_hat))
    assert dev <= 1e-8


def test_step_rejects_bad_input():
    cfg = DraecConfig()
    s = init_state(cfg)
    with pytest.raises(FilterError):
        kalman_step(s, np.zeros(3), 0, cfg)
    with pytest.raises(FilterError):
        kalman_step(s, np.full(15, np.nan), 0, cfg)
    with pytest.raises(FilterError):
        rls_step(s, np.zeros(15), np.inf, cfg)
    with pytest.raises(FilterError):
        BankState.initial(1, 1, 0, cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-3, 10), st.floats(0.5, 1.0))
def test_kalman_step_properties(seed, scale, A):
    """Hermitian PSD covariance, gain identity k = Phi+ z / phi_S, orthogonality."""
    rng = np.random.default_rng(seed)
    cfg = DraecConfig(transition=A)
    state = init_state(cfg)
    for _ in range(20):
        z, Y = scale * crandn(rng, 15), scale * crandn(rng)
        P_prior = state.Phi_pred
        out, state = kalman_step(state, z, Y, cfg)
        P = state.Phi_pred
        assert np.array_equal(P, P.conj().T)
        assert np.linalg.eigvalsh(P).min() >= -1e-10 * max(1.0, np.abs(P).max())
        # update covariance Phi+ satisfies k = Phi+ z / phi_S
        P_post = (P - state.phi_u * np.eye(15)) / (A * A)
        np.testing.assert_allclose(out.gain, P_post @ z / state.phi_s_hat,
                                   atol=1e-9 * max(1, np.abs(out.gain).max()))
        # posterior error = prior error scaled by phi_S / (phi_S + z^H Phi z)
        r = state.phi_s_hat / (state.phi_s_hat + np.real(np.vdot(z, P_prior @ z)))
        assert out.s_hat == pytest.approx(out.s_prior * r, rel=1e-9, abs=1e-12)


# -- batched kernels --------------------------------------------------------------

def _bank_case(rng, cfg, G=3, T=60):
    X = crandn(rng, G, 1, T)
    Y = crandn(rng, G, cfg.n_mics, T)
    return np.concatenate([X, Y], axis=1), Y


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("estimator,step", [("kalman", kalman_step), ("rls", rls_step)])
def test_bank_matches_reference(rng, backend, estimator, step):
    cfg = DraecConfig(lam=0.99, transition=0.999)
    src, Y = _bank_case(rng, cfg)
    res = run_bank(src, Y, TapLayout.joint(cfg), cfg, estimator, trace_stride=1, backend=backend)
    for g in range(src.shape[0]):
        ref = reference_run(src[g, 0], src[g, 1:], Y[g], cfg, step)
        np.testing.assert_allclose(res.s_hat[g], ref, atol=1e-10)


def test_backends_agree(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernel not built")
    cfg = DraecConfig()
    src, Y = _bank_case(rng, cfg, G=4, T=200)
    a = run_bank(src, Y, TapLayout.joint(cfg), cfg, backend="numpy", trace_stride=7)
    b = run_bank(src, Y, TapLayout.joint(cfg), cfg, backend="cython", trace_stride=7)
    np.testing.assert_allclose(a.s_hat, b.s_hat, atol=1e-11)
    np.testing.assert_allclose(a.trace, b.trace, atol=1e-11)
    np.testing.assert_allclose(a.state.P, b.state.P, atol=1e-11)


@pytest.mark.parametrize("backend", BACKENDS)
def test_bank_threads_and_determinism(rng, backend):
    cfg = DraecConfig()
    src, Y = _bank_case(rng, cfg, G=5)
    a = run_bank(src, Y, TapLayout.joint(cfg), cfg, backend=backend)
    b = run_bank(src, Y, TapLayout.joint(cfg), cfg, backend=backend, workers=3)
    assert np.array_equal(a.s_hat, b.s_hat)


def test_apply_trace_reproduces_output(rng):
    cfg = DraecConfig()
    src, Y = _bank_case(rng, cfg)
    taps = TapLayout.joint(cfg)
    res = run_bank(src, Y, taps, cfg, trace_stride=1)
    np.testing.assert_allclose(apply_trace(src, Y, taps, res.trace), res.s_hat, atol=1e-12)


def test_bank_input_validation(rng):
    cfg = DraecConfig()
    src, Y = _bank_case(rng, cfg)
    taps = TapLayout.joint(cfg)
    with pytest.raises(FilterError):
        run_bank(src[:, :2], Y, taps, cfg)
    with pytest.raises(FilterError):
        run_bank(src, Y, taps, cfg, estimator="lms")
    bad = Y.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(FilterError):
        run_bank(src, bad, taps, cfg)
    with pytest.raises(FilterError):
        run_bank(src, Y[..., :10], taps, cfg)


@pytest.mark.parametrize("choice", BACKENDS)
def test_backend_env_selection(choice):
    import os
    import subprocess
    import sys
    env = dict(os.environ, DRAEC_BACKEND=choice)
    out = subprocess.run([sys.executable, "-c", "import draec; print(draec.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == choice


def test_benchmark_script_runs(capsys):
    import importlib.util
    from pathlib import Path
    path = Path(__file__).parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.main(["--bins", "2", "--seconds", "0.5", "--repeat", "1"])
    assert "us/step" in capsys.readouterr().out
