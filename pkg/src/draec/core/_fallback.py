"""Pure numpy filter-bank kernel, vectorised over all (bin, mic) states.

Only elementwise operations and explicit tap loops are used, so each
state's arithmetic is independent of where it sits in the batch.
"""
import numpy as np


def run_bank(src, targets, rows, lags, params, kalman,
             w, P, w_prev, phi, phi_s, phi_u,
             s_hat_out, s_prior_out, trace_out, trace_stride):
    A, eta, alpha, lam, floor, fixed_phi_s, fixed_phi_u = params
    G, M, T = targets.shape
    L = rows.shape[0]
    diag = np.arange(L)
    A2 = A * A
    z = np.zeros((G, L), dtype=np.complex128)
    for t in range(T):
        for j in range(L):
            tt = t - lags[j]
            z[:, j] = src[:, rows[j], tt] if tt >= 0 else 0.0
        y = targets[:, :, t]
        e = y.copy()
        for j in range(L):
            e -= np.conj(w[..., j]) * z[:, None, j]
        if kalman:
            if not np.isnan(fixed_phi_s):
                phi_s[...] = fixed_phi_s
            else:
                np.maximum(alpha * phi + (1.0 - alpha) * (e.real ** 2 + e.imag ** 2),
                           floor, out=phi_s)
            base = phi_s
        else:
            base = lam
        Pz = P[..., :, 0] * z[:, None, None, 0]
        for j in range(1, L):
            Pz += P[..., :, j] * z[:, None, None, j]
        zPz = np.zeros((G, M))
        for j in range(L):
            zPz += (np.conj(z[:, None, j]) * Pz[..., j]).real
        denom = np.maximum(base + zPz, floor)
        k = Pz / denom[..., None]
        w_hat = w + k * np.conj(e)[..., None]
        P -= k[..., :, None] * np.conj(Pz)[..., None, :]
        if not kalman:
            P /= lam
        P[...] = 0.5 * (P + np.conj(np.swapaxes(P, -1, -2)))
        s = y.copy()
        for j in range(L):
            s -= np.conj(w_hat[..., j]) * z[:, None, j]
        s_hat_out[:, :, t] = s
        s_prior_out[:, :, t] = e
        if trace_stride > 0 and t % trace_stride == 0:
            trace_out[:, :, t // trace_stride, :] = w_hat
        if kalman:
            np.maximum(alpha * phi + (1.0 - alpha) * (s.real ** 2 + s.imag ** 2),
                       floor, out=phi)
            if not np.isnan(fixed_phi_u):
                phi_u[...] = fixed_phi_u
            else:
                acc = np.zeros((G, M))
                for j in range(L):
                    d = w_hat[..., j] - w_prev[..., j]
                    acc += d.real ** 2 + d.imag ** 2
                phi_u[...] = acc / L + eta
            w_prev[...] = w_hat
            w[...] = A * w_hat
            if A2 != 1.0:
                P *= A2
            P[..., diag, diag] += phi_u[..., None]
        else:
            w_prev[...] = w_hat
            w[...] = w_hat
