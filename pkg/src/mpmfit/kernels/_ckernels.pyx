# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled transfer, splat and nearest-neighbour kernels.

Loops run particle-major so every scatter accumulates in particle order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, exp, log1p, pow, INFINITY

cnp.import_array()


cdef inline void _stencil1(double X, long *base, double *fx, double w[3], double dw[3]) noexcept nogil:
    cdef long b = <long>floor(X - 0.5)
    cdef double f = X - b
    base[0] = b
    fx[0] = f
    w[0] = 0.5 * (1.5 - f) * (1.5 - f)
    w[1] = 0.75 - (f - 1.0) * (f - 1.0)
    w[2] = 0.5 * (f - 0.5) * (f - 0.5)
    dw[0] = f - 1.5
    dw[1] = -2.0 * (f - 1.0)
    dw[2] = f - 0.5


def p2g(const double[:, ::1] x, const double[:, ::1] mv, const double[:, :, ::1] A, const double[::1] m, double inv_dx, long n):
    cdef Py_ssize_t N = x.shape[0], p
    cdef long bx, by, bz, a, b, c, node
    cdef double fx, fy, fz, wt, gx, gy, gz, dx = 1.0 / inv_dx
    cdef double w0[3]
    cdef double w1[3]
    cdef double w2[3]
    cdef double d0[3]
    cdef double d1[3]
    cdef double d2[3]
    gm_arr = np.zeros(n * n * n)
    gmv_arr = np.zeros((n * n * n, 3))
    cdef double[::1] gm = gm_arr
    cdef double[:, ::1] gmv = gmv_arr
    with nogil:
        for p in range(N):
            _stencil1(x[p, 0] * inv_dx, &bx, &fx, w0, d0)
            _stencil1(x[p, 1] * inv_dx, &by, &fy, w1, d1)
            _stencil1(x[p, 2] * inv_dx, &bz, &fz, w2, d2)
            for a in range(3):
                for b in range(3):
                    for c in range(3):
                        wt = w0[a] * w1[b] * w2[c]
                        node = ((bx + a) * n + (by + b)) * n + (bz + c)
                        gx = (a - fx) * dx
                        gy = (b - fy) * dx
                        gz = (c - fz) * dx
                        gm[node] += wt * m[p]
                        gmv[node, 0] += wt * (mv[p, 0] + (A[p, 0, 0] * gx + A[p, 0, 1] * gy + A[p, 0, 2] * gz))
                        gmv[node, 1] += wt * (mv[p, 1] + (A[p, 1, 0] * gx + A[p, 1, 1] * gy + A[p, 1, 2] * gz))
                        gmv[node, 2] += wt * (mv[p, 2] + (A[p, 2, 0] * gx + A[p, 2, 1] * gy + A[p, 2, 2] * gz))
    return gm_arr.reshape(n, n, n), gmv_arr.reshape(n, n, n, 3)


def g2p(const double[:, ::1] x, grid_v_in, double inv_dx, long n):
    cdef const double[:, ::1] gv = np.ascontiguousarray(grid_v_in).reshape(-1, 3)
    cdef Py_ssize_t N = x.shape[0], p
    cdef long bx, by, bz, a, b, c, node, i, j
    cdef double fx, fy, fz, wt
    cdef double g[3]
    cdef double vg[3]
    cdef double w0[3]
    cdef double w1[3]
    cdef double w2[3]
    cdef double d0[3]
    cdef double d1[3]
    cdef double d2[3]
    v_arr = np.zeros((N, 3))
    C_arr = np.zeros((N, 3, 3))
    cdef double[:, ::1] v = v_arr
    cdef double[:, :, ::1] C = C_arr
    with nogil:
        for p in range(N):
            _stencil1(x[p, 0] * inv_dx, &bx, &fx, w0, d0)
            _stencil1(x[p, 1] * inv_dx, &by, &fy, w1, d1)
            _stencil1(x[p, 2] * inv_dx, &bz, &fz, w2, d2)
            for a in range(3):
                for b in range(3):
                    for c in range(3):
                        wt = w0[a] * w1[b] * w2[c]
                        node = ((bx + a) * n + (by + b)) * n + (bz + c)
                        g[0] = a - fx
                        g[1] = b - fy
                        g[2] = c - fz
                        for i in range(3):
                            vg[i] = gv[node, i]
                            v[p, i] += wt * vg[i]
                            for j in range(3):
                                C[p, i, j] += wt * vg[i] * g[j]
            for i in range(3):
                for j in range(3):
                    C[p, i, j] *= 4.0 * inv_dx
    return v_arr, C_arr


def g2p_backward(const double[:, ::1] x, grid_v_in, const double[:, ::1] v_bar, const double[:, :, ::1] C_bar,
                 double inv_dx, long n):
    cdef const double[:, ::1] gv = np.ascontiguousarray(grid_v_in).reshape(-1, 3)
    cdef Py_ssize_t N = x.shape[0], p
    cdef long bx, by, bz, a, b, c, node, i, j
    cdef double fx, fy, fz, wt, s
    cdef double g[3]
    cdef double up[3]
    cdef double vn[3]
    cdef double dwt[3]
    cdef double w0[3]
    cdef double w1[3]
    cdef double w2[3]
    cdef double d0[3]
    cdef double d1[3]
    cdef double d2[3]
    gvb_arr = np.zeros((n * n * n, 3))
    xb_arr = np.zeros((N, 3))
    cdef double[:, ::1] gvb = gvb_arr
    cdef double[:, ::1] xb = xb_arr
    with nogil:
        for p in range(N):
            _stencil1(x[p, 0] * inv_dx, &bx, &fx, w0, d0)
            _stencil1(x[p, 1] * inv_dx, &by, &fy, w1, d1)
            _stencil1(x[p, 2] * inv_dx, &bz, &fz, w2, d2)
            vn[0] = 0.0
            vn[1] = 0.0
            vn[2] = 0.0
            for a in range(3):
                for b in range(3):
                    for c in range(3):
                        wt = w0[a] * w1[b] * w2[c]
                        dwt[0] = d0[a] * w1[b] * w2[c]
                        dwt[1] = w0[a] * d1[b] * w2[c]
                        dwt[2] = w0[a] * w1[b] * d2[c]
                        node = ((bx + a) * n + (by + b)) * n + (bz + c)
                        g[0] = a - fx
                        g[1] = b - fy
                        g[2] = c - fz
                        s = 0.0
                        for i in range(3):
                            up[i] = v_bar[p, i] + 4.0 * inv_dx * (C_bar[p, i, 0] * g[0] + C_bar[p, i, 1] * g[1] + C_bar[p, i, 2] * g[2])
                            gvb[node, i] += wt * up[i]
                            s = s + gv[node, i] * up[i]
                            vn[i] += wt * gv[node, i]
                        for j in range(3):
                            xb[p, j] += dwt[j] * s
            for j in range(3):
                s = 0.0
                for i in range(3):
                    s = s + C_bar[p, i, j] * vn[i]
                xb[p, j] = inv_dx * (xb[p, j] - 4.0 * inv_dx * s)
    return gvb_arr.reshape(n, n, n, 3), xb_arr


def p2g_backward(const double[:, ::1] x, const double[:, ::1] mv, const double[:, :, ::1] A, const double[::1] m,
                 gmv_bar_in, gm_bar_in, double inv_dx, long n):
    cdef const double[:, ::1] ub = np.ascontiguousarray(gmv_bar_in).reshape(-1, 3)
    cdef const double[::1] mb = np.ascontiguousarray(gm_bar_in).reshape(-1)
    cdef Py_ssize_t N = x.shape[0], p
    cdef long bx, by, bz, a, b, c, node, i, j
    cdef double fx, fy, fz, wt, s, dx = 1.0 / inv_dx, contrib
    cdef double g[3]
    cdef double dwt[3]
    cdef double w0[3]
    cdef double w1[3]
    cdef double w2[3]
    cdef double d0[3]
    cdef double d1[3]
    cdef double d2[3]
    mvb_arr = np.zeros((N, 3))
    Ab_arr = np.zeros((N, 3, 3))
    xb_arr = np.zeros((N, 3))
    cdef double[:, ::1] mvb = mvb_arr
    cdef double[:, :, ::1] Ab = Ab_arr
    cdef double[:, ::1] xb = xb_arr
    with nogil:
        for p in range(N):
            _stencil1(x[p, 0] * inv_dx, &bx, &fx, w0, d0)
            _stencil1(x[p, 1] * inv_dx, &by, &fy, w1, d1)
            _stencil1(x[p, 2] * inv_dx, &bz, &fz, w2, d2)
            for a in range(3):
                for b in range(3):
                    for c in range(3):
                        wt = w0[a] * w1[b] * w2[c]
                        dwt[0] = d0[a] * w1[b] * w2[c]
                        dwt[1] = w0[a] * d1[b] * w2[c]
                        dwt[2] = w0[a] * w1[b] * d2[c]
                        node = ((bx + a) * n + (by + b)) * n + (bz + c)
                        g[0] = (a - fx) * dx
                        g[1] = (b - fy) * dx
                        g[2] = (c - fz) * dx
                        s = mb[node] * m[p]
                        for i in range(3):
                            mvb[p, i] += wt * ub[node, i]
                            contrib = mv[p, i] + (A[p, i, 0] * g[0] + A[p, i, 1] * g[1] + A[p, i, 2] * g[2])
                            s = s + ub[node, i] * contrib
                            for j in range(3):
                                Ab[p, i, j] += wt * ub[node, i] * g[j]
                        for j in range(3):
                            xb[p, j] += dwt[j] * s
            for j in range(3):
                s = 0.0
                for i in range(3):
                    s = s + A[p, i, j] * mvb[p, i]
                xb[p, j] = inv_dx * xb[p, j] - s
    return mvb_arr, Ab_arr, xb_arr


def render_forward(const double[::1] u, const double[::1] v, const double[::1] r, const double[::1] opac,
                   long width, long height, double cutoff, double amax):
    cdef Py_ssize_t N = u.shape[0], p
    cdef long px, py, x0, x1, y0, y1
    cdef double tail = exp(-0.5 * cutoff * cutoff), cr, ddx, ddy, d2, g, a
    out_arr = np.zeros((height, width))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for p in range(N):
            cr = cutoff * r[p]
            x0 = <long>floor(u[p] - cr)
            y0 = <long>floor(v[p] - cr)
            x1 = <long>ceil(u[p] + cr) + 1
            y1 = <long>ceil(v[p] + cr) + 1
            if x0 < 0:
                x0 = 0
            if y0 < 0:
                y0 = 0
            if x1 > width:
                x1 = width
            if y1 > height:
                y1 = height
            for py in range(y0, y1):
                ddy = py + 0.5 - v[p]
                for px in range(x0, x1):
                    ddx = px + 0.5 - u[p]
                    d2 = ddx * ddx + ddy * ddy
                    if d2 < cr * cr:
                        g = (exp(-0.5 * d2 / (r[p] * r[p])) - tail) / (1.0 - tail)
                        a = opac[p] * g
                        if a > amax:
                            a = amax
                        out[py, px] += log1p(-a)
    return out_arr


def render_backward(const double[::1] u, const double[::1] v, const double[::1] r, const double[::1] opac,
                    long width, long height, double cutoff, double amax, T_in, T_bar_in):
    cdef const double[:, ::1] T = np.ascontiguousarray(T_in)
    cdef const double[:, ::1] Tb = np.ascontiguousarray(T_bar_in)
    cdef Py_ssize_t N = u.shape[0], p
    cdef long px, py, x0, x1, y0, y1
    cdef double tail = exp(-0.5 * cutoff * cutoff), cr, ddx, ddy, d2, e, g, a, ab, k
    ub_arr = np.zeros(N)
    vb_arr = np.zeros(N)
    rb_arr = np.zeros(N)
    ob_arr = np.zeros(N)
    cdef double[::1] ubar = ub_arr, vbar = vb_arr, rbar = rb_arr, obar = ob_arr
    with nogil:
        for p in range(N):
            cr = cutoff * r[p]
            x0 = <long>floor(u[p] - cr)
            y0 = <long>floor(v[p] - cr)
            x1 = <long>ceil(u[p] + cr) + 1
            y1 = <long>ceil(v[p] + cr) + 1
            if x0 < 0:
                x0 = 0
            if y0 < 0:
                y0 = 0
            if x1 > width:
                x1 = width
            if y1 > height:
                y1 = height
            for py in range(y0, y1):
                ddy = py + 0.5 - v[p]
                for px in range(x0, x1):
                    ddx = px + 0.5 - u[p]
                    d2 = ddx * ddx + ddy * ddy
                    if d2 < cr * cr:
                        e = exp(-0.5 * d2 / (r[p] * r[p]))
                        g = (e - tail) / (1.0 - tail)
                        a = opac[p] * g
                        if a >= amax:
                            continue
                        ab = -(T[py, px] * Tb[py, px]) / (1.0 - a)
                        k = ab * opac[p] * e / (1.0 - tail) / (r[p] * r[p])
                        ubar[p] += k * ddx
                        vbar[p] += k * ddy
                        rbar[p] += k * d2 / r[p]
                        obar[p] += ab * g
    return ub_arr, vb_arr, rb_arr, ob_arr


def nearest(const double[:, ::1] query, const double[:, ::1] ref):
    """Nearest ``ref`` point per query through a uniform hash grid; ties go to the lowest index."""
    cdef Py_ssize_t Nq = query.shape[0], Nr = ref.shape[0], q, j, t
    cdef double cell, best, d, dd
    cdef double lo[3]
    cdef double hi[3]
    cdef long ring, a, b, c, key, bi, maxring, k
    cdef long res[3]
    cdef long ci[3]
    for k in range(3):
        lo[k] = INFINITY
        hi[k] = -INFINITY
    for j in range(Nr):
        for k in range(3):
            if ref[j, k] < lo[k]:
                lo[k] = ref[j, k]
            if ref[j, k] > hi[k]:
                hi[k] = ref[j, k]
    cdef double ext = 0.0
    for k in range(3):
        if hi[k] - lo[k] > ext:
            ext = hi[k] - lo[k]
    # about two reference points per cell on average
    cell = ext / max(1.0, pow(Nr / 2.0, 1.0 / 3.0))
    if cell <= 0.0:
        cell = 1.0
    for k in range(3):
        res[k] = <long>floor((hi[k] - lo[k]) / cell) + 1
    cdef long ncell = res[0] * res[1] * res[2]
    keys_arr = np.empty(Nr, dtype=np.int64)
    cdef long[::1] keys = keys_arr
    for j in range(Nr):
        for k in range(3):
            ci[k] = <long>floor((ref[j, k] - lo[k]) / cell)
            if ci[k] >= res[k]:
                ci[k] = res[k] - 1
        keys[j] = (ci[0] * res[1] + ci[1]) * res[2] + ci[2]
    order_arr = np.argsort(keys_arr, kind="stable").astype(np.int64)
    cdef long[::1] order = order_arr
    start_arr = np.searchsorted(keys_arr[order_arr], np.arange(ncell + 1)).astype(np.int64)
    cdef long[::1] start = start_arr
    out_i_arr = np.empty(Nq, dtype=np.int64)
    out_d_arr = np.empty(Nq)
    cdef long[::1] out_i = out_i_arr
    cdef double[::1] out_d = out_d_arr
    with nogil:
        for q in range(Nq):
            for k in range(3):
                ci[k] = <long>floor((query[q, k] - lo[k]) / cell)
            best = INFINITY
            bi = -1
            ring = 0
            maxring = 0
            for k in range(3):
                if ci[k] > maxring:
                    maxring = ci[k]
                if res[k] - 1 - ci[k] > maxring:
                    maxring = res[k] - 1 - ci[k]
                if -ci[k] > maxring:
                    maxring = -ci[k]
            while ring <= maxring:
                for a in range(ci[0] - ring, ci[0] + ring + 1):
                    if a < 0 or a >= res[0]:
                        continue
                    for b in range(ci[1] - ring, ci[1] + ring + 1):
                        if b < 0 or b >= res[1]:
                            continue
                        for c in range(ci[2] - ring, ci[2] + ring + 1):
                            if c < 0 or c >= res[2]:
                                continue
                            if (a - ci[0] != ring and ci[0] - a != ring and b - ci[1] != ring
                                    and ci[1] - b != ring and c - ci[2] != ring and ci[2] - c != ring):
                                continue
                            key = (a * res[1] + b) * res[2] + c
                            for t in range(start[key], start[key + 1]):
                                j = order[t]
                                d = 0.0
                                for k in range(3):
                                    dd = query[q, k] - ref[j, k]
                                    d = d + dd * dd
                                if d < best or (d == best and j < bi):
                                    best = d
                                    bi = j
                # anything beyond this ring is at least ring*cell away
                if bi >= 0 and best < (ring * cell) * (ring * cell):
                    break
                ring += 1
            out_i[q] = bi
            out_d[q] = best
    return out_i_arr, out_d_arr
