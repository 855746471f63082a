"""Compiled inner loops for rendering a dense logit grid.

Grid layout: ``params[ix, iy, iz, ch]`` (C-contiguous), channels
``[density, r, g, b, rel_0, ..., rel_{C-1}]``. All loops are serial with a
fixed summation order, so results are bit-reproducible.
"""
import math

import numpy as np
from numba import njit

N_GEO = 4  # density + rgb


@njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _softplus(x):
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


@njit(cache=True)
def _clip_to_box(o, d, lo, hi, t0, t1):
    for a in range(3):
        if abs(d[a]) < 1e-15:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, 0.0
        else:
            inv = 1.0 / d[a]
            ta = (lo[a] - o[a]) * inv
            tb = (hi[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True)
def _locate(x0, x1, x2, lo, scale, res):
    """Lower-corner voxel (flat node index) and fractional offsets of a point.

    Returns ``(-1, 0, 0, 0)`` outside the box.
    """
    f0 = (x0 - lo[0]) * scale[0]
    f1 = (x1 - lo[1]) * scale[1]
    f2 = (x2 - lo[2]) * scale[2]
    n0, n1, n2 = res[0], res[1], res[2]
    if f0 < 0.0 or f1 < 0.0 or f2 < 0.0 or f0 > n0 - 1 or f1 > n1 - 1 or f2 > n2 - 1:
        return -1, 0.0, 0.0, 0.0
    i0 = min(int(f0), n0 - 2)
    i1 = min(int(f1), n1 - 2)
    i2 = min(int(f2), n2 - 2)
    return (i0 * n1 + i1) * n2 + i2, f0 - i0, f1 - i1, f2 - i2


@njit(cache=True)
def _corner_offsets(res):
    """Flat node offsets of the 8 cell corners, in (c0, c1, c2) binary order."""
    off = np.empty(8, np.int64)
    k = 0
    for c0 in range(2):
        for c1 in range(2):
            for c2 in range(2):
                off[k] = (c0 * res[1] + c1) * res[2] + c2
                k += 1
    return off


@njit(cache=True)
def _weights(a0, a1, a2, wts):
    b0 = 1.0 - a0
    b1 = 1.0 - a1
    b2 = 1.0 - a2
    wts[0] = b0 * b1 * b2
    wts[1] = b0 * b1 * a2
    wts[2] = b0 * a1 * b2
    wts[3] = b0 * a1 * a2
    wts[4] = a0 * b1 * b2
    wts[5] = a0 * b1 * a2
    wts[6] = a0 * a1 * b2
    wts[7] = a0 * a1 * a2


@njit(cache=True, nogil=True)
def interpolate_logits(params, lo, scale, res, points, out, inside):
    K = params.shape[3]
    flat = params.reshape(-1)
    off = _corner_offsets(res)
    wts = np.empty(8)
    for p in range(points.shape[0]):
        base, a0, a1, a2 = _locate(points[p, 0], points[p, 1], points[p, 2], lo, scale, res)
        inside[p] = base >= 0
        for ch in range(K):
            out[p, ch] = 0.0
        if base >= 0:
            _weights(a0, a1, a2, wts)
            for k in range(8):
                b = (base + off[k]) * K
                for ch in range(K):
                    out[p, ch] += wts[k] * flat[b + ch]


@njit(cache=True, nogil=True)
def render_forward(params, lo, hi, scale, res, origins, dirs, t_near, t_far, n_samples,
                   jitter, min_transmittance, out_rgb, out_depth, out_alpha, out_rel, with_rel,
                   out_median, skip_tau=0.0):
    """Composite each ray. ``out_median`` gets the distance at which accumulated
    opacity reaches 0.5 (NaN if it never does), solved exactly inside the
    crossing interval under its piecewise-constant density."""
    K = params.shape[3]
    C = K - 4
    flat = params.reshape(-1)
    off = _corner_offsets(res)
    wts = np.empty(8)
    use_jitter = jitter.shape[0] > 0
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        for ch in range(3):
            out_rgb[r, ch] = 0.0
        for k in range(C):
            out_rel[r, k] = 0.0
        out_depth[r] = 0.0
        out_alpha[r] = 0.0
        out_median[r] = np.nan
        t0, t1 = _clip_to_box(o, d, lo, hi, t_near[r], t_far[r])
        if t1 <= t0:
            continue
        delta = (t1 - t0) / n_samples
        T = 1.0
        for i in range(n_samples):
            u = jitter[r, i] if use_jitter else 0.5
            t = t0 + (i + u) * delta
            base, a0, a1, a2 = _locate(o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2], lo, scale, res)
            if base < 0:
                continue
            _weights(a0, a1, a2, wts)
            ls = 0.0
            for k in range(8):
                ls += wts[k] * flat[(base + off[k]) * K]
            tau = _softplus(ls) * delta
            if tau < skip_tau:
                continue
            alpha = -math.expm1(-tau)
            w = T * alpha
            for ch in range(3):
                lc = 0.0
                for k in range(8):
                    lc += wts[k] * flat[(base + off[k]) * K + 1 + ch]
                out_rgb[r, ch] += w * _sigmoid(lc)
            if with_rel:
                for c in range(C):
                    lr = 0.0
                    for k in range(8):
                        lr += wts[k] * flat[(base + off[k]) * K + 4 + c]
                    out_rel[r, c] += w * _sigmoid(lr)
            out_depth[r] += w * t
            if out_alpha[r] < 0.5 <= out_alpha[r] + w:
                frac = (0.5 - out_alpha[r]) / T
                out_median[r] = t - 0.5 * delta - math.log1p(-frac) / (tau / delta)
            out_alpha[r] += w
            T *= math.exp(-tau)
            if T < min_transmittance:
                break


@njit(cache=True, nogil=True)
def loss_and_grad(params, lo, hi, scale, res, origins, dirs, t_near, t_far, n_samples, jitter,
                  min_transmittance, gt_rgb, gt_rel, rel_weight, rgb_weight,
                  grad_geometry, grad_relevancy, detach_geometry, grad, skip_tau=0.0,
                  ray_weights=np.empty(0)):
    """Fused forward + backward over a ray batch.

    Objective: mean over rays of ``rgb_weight * |C - C_gt|^2 + rel_weight * sum_k (M_k - M_gt_k)^2``.
    Gradients are *accumulated* into ``grad`` (same layout as ``params``).
    With ``detach_geometry`` the relevancy term does not reach density.
    Samples with optical thickness below ``skip_tau`` are dropped entirely;
    they move the composite by at most ``skip_tau``. Zero keeps every sample.
    Nonempty ``ray_weights`` scale each ray's term (importance-sampled batches).
    Returns (mean rgb loss, mean relevancy loss), both unweighted.
    """
    K = params.shape[3]
    C = K - 4
    B = origins.shape[0]
    flat = params.reshape(-1)
    gflat = grad.reshape(-1)
    off = _corner_offsets(res)
    use_jitter = jitter.shape[0] > 0
    need_rel = rel_weight != 0.0 or grad_relevancy
    inv_b = 1.0 / B
    weighted = ray_weights.shape[0] > 0

    s_base = np.empty(n_samples, np.int64)
    s_a = np.empty((n_samples, 3))
    s_dsig = np.empty(n_samples)   # d tau / d density-logit
    s_T = np.empty(n_samples)
    s_alpha = np.empty(n_samples)
    s_c = np.empty((n_samples, 3))
    s_s = np.empty((n_samples, max(C, 1)))
    wts = np.empty(8)
    rgb = np.empty(3)
    rel = np.empty(max(C, 1))
    gC = np.empty(3)
    gM = np.empty(max(C, 1))

    loss_rgb = 0.0
    loss_rel = 0.0
    for r in range(B):
        o = origins[r]
        d = dirs[r]
        rgb[:] = 0.0
        rel[:] = 0.0
        n_used = 0
        t0, t1 = _clip_to_box(o, d, lo, hi, t_near[r], t_far[r])
        if t1 > t0:
            delta = (t1 - t0) / n_samples
            T = 1.0
            for i in range(n_samples):
                u = jitter[r, i] if use_jitter else 0.5
                t = t0 + (i + u) * delta
                base, a0, a1, a2 = _locate(o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2],
                                           lo, scale, res)
                if base < 0:
                    continue
                _weights(a0, a1, a2, wts)
                ls = 0.0
                for k in range(8):
                    ls += wts[k] * flat[(base + off[k]) * K]
                tau = _softplus(ls) * delta
                if tau < skip_tau:
                    continue
                j = n_used
                s_base[j] = base
                s_a[j, 0] = a0
                s_a[j, 1] = a1
                s_a[j, 2] = a2
                alpha = -math.expm1(-tau)
                w = T * alpha
                s_dsig[j] = _sigmoid(ls) * delta
                s_T[j] = T
                s_alpha[j] = alpha
                for ch in range(3):
                    lc = 0.0
                    for k in range(8):
                        lc += wts[k] * flat[(base + off[k]) * K + 1 + ch]
                    c = _sigmoid(lc)
                    s_c[j, ch] = c
                    rgb[ch] += w * c
                if need_rel:
                    for c in range(C):
                        lr = 0.0
                        for k in range(8):
                            lr += wts[k] * flat[(base + off[k]) * K + 4 + c]
                        sv = _sigmoid(lr)
                        s_s[j, c] = sv
                        rel[c] += w * sv
                n_used += 1
                T *= 1.0 - alpha
                if T < min_transmittance:
                    break

        wr = ray_weights[r] if weighted else 1.0
        for ch in range(3):
            e = rgb[ch] - gt_rgb[r, ch]
            loss_rgb += wr * e * e
            gC[ch] = 2.0 * rgb_weight * e * inv_b * wr
        if need_rel:
            for c in range(C):
                e = rel[c] - gt_rel[r, c]
                loss_rel += wr * e * e
                gM[c] = 2.0 * rel_weight * e * inv_b * wr

        # suffix sums: dL/dtau_j = T_{j+1} g_j - sum_{i>j} w_i g_i
        suffix = 0.0
        for j in range(n_used - 1, -1, -1):
            w = s_T[j] * s_alpha[j]
            g = 0.0
            for ch in range(3):
                g += gC[ch] * s_c[j, ch]
            if need_rel and not detach_geometry:
                for c in range(C):
                    g += gM[c] * s_s[j, c]
            dtau = s_T[j] * (1.0 - s_alpha[j]) * g - suffix
            suffix += w * g
            _weights(s_a[j, 0], s_a[j, 1], s_a[j, 2], wts)
            base = s_base[j]
            if grad_geometry:
                gl = dtau * s_dsig[j]
                g0 = w * gC[0] * s_c[j, 0] * (1.0 - s_c[j, 0])
                g1 = w * gC[1] * s_c[j, 1] * (1.0 - s_c[j, 1])
                g2 = w * gC[2] * s_c[j, 2] * (1.0 - s_c[j, 2])
                for k in range(8):
                    b = (base + off[k]) * K
                    wk = wts[k]
                    gflat[b] += wk * gl
                    gflat[b + 1] += wk * g0
                    gflat[b + 2] += wk * g1
                    gflat[b + 3] += wk * g2
            if grad_relevancy:
                for c in range(C):
                    sv = s_s[j, c]
                    gM_s = w * gM[c] * sv * (1.0 - sv)
                    s_s[j, c] = gM_s
                for k in range(8):
                    b = (base + off[k]) * K + 4
                    wk = wts[k]
                    for c in range(C):
                        gflat[b + c] += wk * s_s[j, c]
    return loss_rgb * inv_b, loss_rel * inv_b


@njit(cache=True, nogil=True)
def tv_loss_and_grad(params, ch_lo, ch_hi, weight, grad):
    """``weight * mean over neighbor pairs of (p_a - p_b)^2`` over channels [ch_lo, ch_hi).

    Pairs are axis-aligned grid neighbors. Gradient is accumulated into ``grad``.
    """
    nx, ny, nz, K = params.shape
    n_pairs = ((nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)) * (ch_hi - ch_lo)
    if n_pairs == 0 or weight == 0.0:
        return 0.0
    scale = weight / n_pairs
    total = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                for c in range(ch_lo, ch_hi):
                    a = params[i, j, k, c]
                    if i + 1 < nx:
                        d = a - params[i + 1, j, k, c]
                        total += d * d
                        grad[i, j, k, c] += 2.0 * scale * d
                        grad[i + 1, j, k, c] -= 2.0 * scale * d
                    if j + 1 < ny:
                        d = a - params[i, j + 1, k, c]
                        total += d * d
                        grad[i, j, k, c] += 2.0 * scale * d
                        grad[i, j + 1, k, c] -= 2.0 * scale * d
                    if k + 1 < nz:
                        d = a - params[i, j, k + 1, c]
                        total += d * d
                        grad[i, j, k, c] += 2.0 * scale * d
                        grad[i, j, k + 1, c] -= 2.0 * scale * d
    return total * scale


@njit(cache=True, nogil=True)
def adam_step(params, grad, m, v, lr, channel_on, steps, beta1, beta2, eps):
    """In-place Adam over enabled channels; ``steps[ch]`` is that channel's step count.

    Consumed gradient entries are reset to zero so the buffer is ready for
    the next accumulation.
    """
    K = params.shape[3]
    n_vox = params.size // K
    p = params.reshape(n_vox, K)
    g = grad.reshape(n_vox, K)
    mf = m.reshape(n_vox, K)
    vf = v.reshape(n_vox, K)
    step_size = np.empty(K)
    bc2 = np.empty(K)
    for ch in range(K):
        step_size[ch] = lr[ch] / (1.0 - beta1 ** steps[ch]) if channel_on[ch] else 0.0
        bc2[ch] = 1.0 / (1.0 - beta2 ** steps[ch]) if channel_on[ch] else 0.0
    lo_ch = 0
    hi_ch = K
    while lo_ch < K and not channel_on[lo_ch]:
        lo_ch += 1
    while hi_ch > lo_ch and not channel_on[hi_ch - 1]:
        hi_ch -= 1
    for i in range(n_vox):
        for ch in range(lo_ch, hi_ch):
            if not channel_on[ch]:
                continue
            gi = g[i, ch]
            g[i, ch] = 0.0
            mi = beta1 * mf[i, ch] + (1.0 - beta1) * gi
            vi = beta2 * vf[i, ch] + (1.0 - beta2) * gi * gi
            mf[i, ch] = mi
            vf[i, ch] = vi
            p[i, ch] -= step_size[ch] * mi / (math.sqrt(vi * bc2[ch]) + eps)
