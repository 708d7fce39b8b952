# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled selective scan kernels; same contract as ``_scan_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def layer_forward(const double[:, :, :, ::1] a_bar, const double[:, :, ::1] delta, const double[:, :, ::1] bp,
                  const double[:, :, ::1] cp, const double[:, :, ::1] u, const double[:, :, ::1] h0):
    cdef Py_ssize_t nb = delta.shape[0], nt = delta.shape[1]
    cdef Py_ssize_t nd = delta.shape[2], nn = a_bar.shape[3]
    h_arr = np.empty((nb, nt, nd, nn))
    y_arr = np.empty((nb, nt, nd))
    cdef double[:, :, :, ::1] h = h_arr
    cdef double[:, :, ::1] y = y_arr
    cdef Py_ssize_t b, t, i, n
    cdef double dt, ui, prev, cur, acc
    with nogil:
        for b in range(nb):
            for t in range(nt):
                for i in range(nd):
                    dt = delta[b, t, i]
                    ui = u[b, t, i]
                    acc = 0.0
                    for n in range(nn):
                        if t == 0:
                            prev = h0[b, i, n]
                        else:
                            prev = h[b, t - 1, i, n]
                        cur = a_bar[b, t, i, n] * prev + (dt * bp[b, t, n]) * ui
                        h[b, t, i, n] = cur
                        acc = acc + cur * cp[b, t, n]
                    y[b, t, i] = acc
    return h_arr, y_arr


def layer_backward(const double[:, :, ::1] delta, const double[:, ::1] A, const double[:, :, ::1] bp,
                   const double[:, :, ::1] cp, const double[:, :, ::1] u, const double[:, :, :, ::1] a_bar,
                   const double[:, :, :, ::1] h, const double[:, :, ::1] h0, const double[:, :, ::1] grad_y):
    cdef Py_ssize_t nb = delta.shape[0], nt = delta.shape[1]
    cdef Py_ssize_t nd = delta.shape[2], nn = A.shape[1]
    g_delta_arr = np.zeros((nb, nt, nd))
    g_A_arr = np.zeros((nd, nn))
    g_bp_arr = np.zeros((nb, nt, nn))
    g_cp_arr = np.zeros((nb, nt, nn))
    g_u_arr = np.zeros((nb, nt, nd))
    carry_arr = np.zeros((nb, nd, nn))
    cdef double[:, :, ::1] g_delta = g_delta_arr
    cdef double[:, ::1] g_A = g_A_arr
    cdef double[:, :, ::1] g_bp = g_bp_arr
    cdef double[:, :, ::1] g_cp = g_cp_arr
    cdef double[:, :, ::1] g_u = g_u_arr
    cdef double[:, :, ::1] carry = carry_arr
    cdef Py_ssize_t b, t, i, n
    cdef double gy, gh, prev, a, g_pre, dt, ui, du, acc_delta, acc_bp
    with nogil:
        for b in range(nb):
            for t in range(nt - 1, -1, -1):
                for i in range(nd):
                    gy = grad_y[b, t, i]
                    dt = delta[b, t, i]
                    ui = u[b, t, i]
                    du = dt * ui
                    acc_delta = 0.0
                    acc_bp = 0.0
                    for n in range(nn):
                        g_cp[b, t, n] += gy * h[b, t, i, n]
                        gh = carry[b, i, n] + gy * cp[b, t, n]
                        a = a_bar[b, t, i, n]
                        if t == 0:
                            prev = h0[b, i, n]
                        else:
                            prev = h[b, t - 1, i, n]
                        g_pre = gh * prev * a
                        g_A[i, n] += g_pre * dt
                        acc_delta = acc_delta + g_pre * A[i, n]
                        acc_bp = acc_bp + gh * bp[b, t, n]
                        g_bp[b, t, n] += gh * du
                        carry[b, i, n] = gh * a
                    g_delta[b, t, i] = acc_delta + acc_bp * ui
                    g_u[b, t, i] = acc_bp * dt
    return g_delta_arr, g_A_arr, g_bp_arr, g_cp_arr, g_u_arr, carry_arr
