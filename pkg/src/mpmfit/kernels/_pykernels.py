"""Vectorised numpy kernels; the reference implementation the compiled module mirrors.

All scatters go through ``np.bincount`` on particle-major index arrays, so the
per-node summation order is particle order, as in the compiled loops.
"""
import numpy as np

_OFFSETS = np.array([(a, b, c) for a in range(3) for b in range(3) for c in range(3)])


def _stencil(x, inv_dx):
    X = x * inv_dx
    base = np.floor(X - 0.5).astype(np.int64)
    fx = X - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=1)  # (N, 3k, 3d)
    dw = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5], axis=1)
    return base, fx, w, dw


def _weights(w, dw, with_grad):
    a, b, c = _OFFSETS[:, 0], _OFFSETS[:, 1], _OFFSETS[:, 2]
    wa, wb, wc = w[:, a, 0], w[:, b, 1], w[:, c, 2]
    weight = wa * wb * wc
    if not with_grad:
        return weight, None
    dweight = np.stack([dw[:, a, 0] * wb * wc, wa * dw[:, b, 1] * wc, wa * wb * dw[:, c, 2]], axis=-1)
    return weight, dweight


def _nodes(base, n):
    idx = base[:, None, :] + _OFFSETS[None]
    return (idx[..., 0] * n + idx[..., 1]) * n + idx[..., 2]


def _scatter(idx, vals, size):
    return np.bincount(idx.ravel(), weights=vals.ravel(), minlength=size)


def p2g(x, mv, A, m, inv_dx, n):
    base, fx, w, dw = _stencil(x, inv_dx)
    weight, _ = _weights(w, dw, False)
    idx = _nodes(base, n)
    g = (_OFFSETS[None] - fx[:, None, :]) / inv_dx  # (N, 27, 3) world-unit offsets
    contrib = mv[:, None, :] + np.einsum("pij,pkj->pki", A, g)
    size = n ** 3
    gm = _scatter(idx, weight * m[:, None], size)
    gmv = np.stack([_scatter(idx, weight * contrib[..., d], size) for d in range(3)], axis=-1)
    return gm.reshape(n, n, n), gmv.reshape(n, n, n, 3)


def g2p(x, grid_v, inv_dx, n):
    base, fx, w, dw = _stencil(x, inv_dx)
    weight, _ = _weights(w, dw, False)
    idx = _nodes(base, n)
    vg = grid_v.reshape(-1, 3)[idx]  # (N, 27, 3)
    g = _OFFSETS[None] - fx[:, None, :]
    v = np.einsum("pk,pki->pi", weight, vg)
    C = 4.0 * inv_dx * np.einsum("pk,pki,pkj->pij", weight, vg, g)
    return v, C


def g2p_backward(x, grid_v, v_bar, C_bar, inv_dx, n):
    base, fx, w, dw = _stencil(x, inv_dx)
    weight, dweight = _weights(w, dw, True)
    idx = _nodes(base, n)
    vg = grid_v.reshape(-1, 3)[idx]
    g = _OFFSETS[None] - fx[:, None, :]
    Cg = np.einsum("pij,pkj->pki", C_bar, g)  # C_bar @ g_k
    up = v_bar[:, None, :] + 4.0 * inv_dx * Cg
    size = n ** 3
    gv_bar = np.stack([_scatter(idx, weight * up[..., d], size) for d in range(3)], axis=-1)
    s = np.einsum("pki,pki->pk", vg, up)
    v_new = np.einsum("pk,pki->pi", weight, vg)
    fx_bar = np.einsum("pkd,pk->pd", dweight, s) - 4.0 * inv_dx * np.einsum("pij,pi->pj", C_bar, v_new)
    return gv_bar.reshape(n, n, n, 3), inv_dx * fx_bar


def p2g_backward(x, mv, A, m, gmv_bar, gm_bar, inv_dx, n):
    base, fx, w, dw = _stencil(x, inv_dx)
    weight, dweight = _weights(w, dw, True)
    idx = _nodes(base, n)
    g = (_OFFSETS[None] - fx[:, None, :]) / inv_dx
    ub = gmv_bar.reshape(-1, 3)[idx]  # (N, 27, 3)
    mb = gm_bar.reshape(-1)[idx]
    mv_bar = np.einsum("pk,pki->pi", weight, ub)
    A_bar = np.einsum("pk,pki,pkj->pij", weight, ub, g)
    contrib = mv[:, None, :] + np.einsum("pij,pkj->pki", A, g)
    s = np.einsum("pki,pki->pk", ub, contrib) + mb * m[:, None]
    x_bar = inv_dx * np.einsum("pkd,pk->pd", dweight, s) - np.einsum("pij,pi->pj", A, mv_bar)
    return mv_bar, A_bar, x_bar


def _sprite_pairs(u, v, r, cutoff, width, height):
    half = np.ceil(cutoff * r).astype(np.int64)
    x0 = np.floor(u - cutoff * r).astype(np.int64)
    y0 = np.floor(v - cutoff * r).astype(np.int64)
    span = 2 * half + 2
    counts = span * span
    pid = np.repeat(np.arange(len(u)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - start
    sp = span[pid]
    px = x0[pid] + local % sp
    py = y0[pid] + local // sp
    keep = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    pid, px, py = pid[keep], px[keep], py[keep]
    dx = px + 0.5 - u[pid]
    dy = py + 0.5 - v[pid]
    rr = r[pid]
    d2 = dx * dx + dy * dy
    inside = d2 < (cutoff * rr) ** 2
    return pid[inside], px[inside], py[inside], dx[inside], dy[inside], d2[inside], rr[inside]


def render_forward(u, v, r, opac, width, height, cutoff, amax):
    tail = np.exp(-0.5 * cutoff * cutoff)
    pid, px, py, dx, dy, d2, rr = _sprite_pairs(u, v, r, cutoff, width, height)
    g = (np.exp(-0.5 * d2 / (rr * rr)) - tail) / (1.0 - tail)
    a = np.minimum(opac[pid] * g, amax)
    logT = np.bincount(py * width + px, weights=np.log1p(-a), minlength=width * height)
    return logT.reshape(height, width)


def render_backward(u, v, r, opac, width, height, cutoff, amax, T, T_bar):
    """Adjoint of ``T = exp(sum log(1 - a))`` wrt sprite centres, radii and opacities."""
    tail = np.exp(-0.5 * cutoff * cutoff)
    pid, px, py, dx, dy, d2, rr = _sprite_pairs(u, v, r, cutoff, width, height)
    e = np.exp(-0.5 * d2 / (rr * rr))
    g = (e - tail) / (1.0 - tail)
    a_raw = opac[pid] * g
    live = a_raw < amax
    a = np.minimum(a_raw, amax)
    flat = py * width + px
    a_bar = -(T.ravel()[flat] * T_bar.ravel()[flat]) / (1.0 - a)
    a_bar = np.where(live, a_bar, 0.0)
    g_bar = a_bar * opac[pid]
    k = g_bar * e / (1.0 - tail) / (rr * rr)
    nparts = len(u)
    u_bar = np.bincount(pid, weights=k * dx, minlength=nparts)
    v_bar = np.bincount(pid, weights=k * dy, minlength=nparts)
    r_bar = np.bincount(pid, weights=k * d2 / rr, minlength=nparts)
    o_bar = np.bincount(pid, weights=a_bar * g, minlength=nparts)
    return u_bar, v_bar, r_bar, o_bar


def nearest(query, ref):
    """Index and squared distance of the nearest ``ref`` point; ties go to the lowest index."""
    out_i = np.empty(len(query), dtype=np.int64)
    out_d = np.empty(len(query))
    step = max(1, 2_000_000 // max(len(ref), 1))
    for s in range(0, len(query), step):
        q = query[s:s + step]
        d = (q[:, None, :] - ref[None, :, :])
        d2 = np.einsum("ijk,ijk->ij", d, d)
        j = np.argmin(d2, axis=1)
        out_i[s:s + step] = j
        out_d[s:s + step] = d2[np.arange(len(q)), j]
    return out_i, out_d
