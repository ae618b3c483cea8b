# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled filter-bank kernel; same contract as ``_fallback.run_bank``.

Complex numbers are handled as interleaved (re, im) doubles to keep the
inner loops free of libgcc complex helpers.
"""
from libc.stdlib cimport malloc, free
from libc.math cimport isnan

ctypedef double complex cplx


cdef void step(double *P, double *w, double *w_prev, double *phi, double *phi_s,
               double *phi_u, const double *z, double yr, double yi, double *out_s,
               double *out_e, double *trace, Py_ssize_t L, bint kalman, double A,
               double eta, double alpha, double lam, double floor, double fixed_phi_s,
               double fixed_phi_u, double *Pz, double *wh) noexcept nogil:
    cdef Py_ssize_t i, j, ij, ji
    cdef double er, ei, sr, si, base, zPz, denom, kr, ki, ar, ai, br, bi, acc, ph, dr, di
    cdef double A2 = A * A

    # prior error e = y - w^H z
    er = yr
    ei = yi
    for j in range(L):
        ar = w[2 * j]
        ai = w[2 * j + 1]
        er -= ar * z[2 * j] + ai * z[2 * j + 1]
        ei -= ar * z[2 * j + 1] - ai * z[2 * j]
    if kalman:
        if not isnan(fixed_phi_s):
            phi_s[0] = fixed_phi_s
        else:
            ph = alpha * phi[0] + (1.0 - alpha) * (er * er + ei * ei)
            phi_s[0] = ph if ph > floor else floor
        base = phi_s[0]
    else:
        base = lam

    # Pz = P z ; zPz = Re(z^H P z)
    zPz = 0.0
    for i in range(L):
        ar = 0.0
        ai = 0.0
        for j in range(L):
            ij = 2 * (i * L + j)
            ar += P[ij] * z[2 * j] - P[ij + 1] * z[2 * j + 1]
            ai += P[ij] * z[2 * j + 1] + P[ij + 1] * z[2 * j]
        Pz[2 * i] = ar
        Pz[2 * i + 1] = ai
        zPz += z[2 * i] * ar + z[2 * i + 1] * ai
    denom = base + zPz
    if denom < floor:
        denom = floor

    # gain, weight update, covariance update P -= k (Pz)^H
    for i in range(L):
        kr = Pz[2 * i] / denom
        ki = Pz[2 * i + 1] / denom
        wh[2 * i] = w[2 * i] + kr * er + ki * ei
        wh[2 * i + 1] = w[2 * i + 1] + ki * er - kr * ei
        for j in range(L):
            ij = 2 * (i * L + j)
            br = Pz[2 * j]
            bi = -Pz[2 * j + 1]
            P[ij] -= kr * br - ki * bi
            P[ij + 1] -= kr * bi + ki * br
    if not kalman:
        for i in range(2 * L * L):
            P[i] /= lam
    # Hermitian symmetrisation
    for i in range(L):
        P[2 * (i * L + i) + 1] = 0.0
        for j in range(i + 1, L):
            ij = 2 * (i * L + j)
            ji = 2 * (j * L + i)
            ar = 0.5 * (P[ij] + P[ji])
            ai = 0.5 * (P[ij + 1] - P[ji + 1])
            P[ij] = ar
            P[ij + 1] = ai
            P[ji] = ar
            P[ji + 1] = -ai

    # posterior output s = y - w_hat^H z
    sr = yr
    si = yi
    for j in range(L):
        ar = wh[2 * j]
        ai = wh[2 * j + 1]
        sr -= ar * z[2 * j] + ai * z[2 * j + 1]
        si -= ar * z[2 * j + 1] - ai * z[2 * j]
    out_s[0] = sr
    out_s[1] = si
    out_e[0] = er
    out_e[1] = ei
    if trace != NULL:
        for j in range(2 * L):
            trace[j] = wh[j]

    if kalman:
        ph = alpha * phi[0] + (1.0 - alpha) * (sr * sr + si * si)
        phi[0] = ph if ph > floor else floor
        if not isnan(fixed_phi_u):
            phi_u[0] = fixed_phi_u
        else:
            acc = 0.0
            for j in range(L):
                dr = wh[2 * j] - w_prev[2 * j]
                di = wh[2 * j + 1] - w_prev[2 * j + 1]
                acc += dr * dr + di * di
            phi_u[0] = acc / L + eta
        for j in range(2 * L):
            w_prev[j] = wh[j]
            w[j] = A * wh[j]
        if A2 != 1.0:
            for i in range(2 * L * L):
                P[i] *= A2
        for i in range(L):
            P[2 * (i * L + i)] += phi_u[0]
    else:
        for j in range(2 * L):
            w_prev[j] = wh[j]
            w[j] = wh[j]


def run_bank(const cplx[:, :, ::1] src, const cplx[:, :, ::1] targets,
             const long[::1] rows, const long[::1] lags, params, bint kalman,
             cplx[:, :, ::1] w, cplx[:, :, :, ::1] P, cplx[:, :, ::1] w_prev,
             double[:, ::1] phi, double[:, ::1] phi_s, double[:, ::1] phi_u,
             cplx[:, :, ::1] s_hat_out, cplx[:, :, ::1] s_prior_out,
             cplx[:, :, :, ::1] trace_out, long trace_stride):
    cdef double A = params[0], eta = params[1], alpha = params[2], lam = params[3]
    cdef double floor = params[4], fixed_phi_s = params[5], fixed_phi_u = params[6]
    cdef Py_ssize_t G = targets.shape[0], M = targets.shape[1], T = targets.shape[2]
    cdef Py_ssize_t L = rows.shape[0]
    cdef Py_ssize_t g, m, t, j, tt
    cdef cplx y
    cdef double *trace_ptr
    cdef double *z = <double *> malloc(2 * L * sizeof(double))
    cdef double *Pz = <double *> malloc(2 * L * sizeof(double))
    cdef double *wh = <double *> malloc(2 * L * sizeof(double))
    if z == NULL or Pz == NULL or wh == NULL:
        free(z); free(Pz); free(wh)
        raise MemoryError()
    try:
        with nogil:
            for g in range(G):
                for t in range(T):
                    for j in range(L):
                        tt = t - lags[j]
                        if tt >= 0:
                            z[2 * j] = src[g, rows[j], tt].real
                            z[2 * j + 1] = src[g, rows[j], tt].imag
                        else:
                            z[2 * j] = 0.0
                            z[2 * j + 1] = 0.0
                    for m in range(M):
                        y = targets[g, m, t]
                        trace_ptr = NULL
                        if trace_stride > 0 and t % trace_stride == 0:
                            trace_ptr = <double *> &trace_out[g, m, t // trace_stride, 0]
                        step(<double *> &P[g, m, 0, 0], <double *> &w[g, m, 0],
                             <double *> &w_prev[g, m, 0], &phi[g, m], &phi_s[g, m],
                             &phi_u[g, m], z, y.real, y.imag,
                             <double *> &s_hat_out[g, m, t], <double *> &s_prior_out[g, m, t],
                             trace_ptr, L, kalman, A, eta, alpha, lam, floor,
                             fixed_phi_s, fixed_phi_u, Pz, wh)
    finally:
        free(z); free(Pz); free(wh)
