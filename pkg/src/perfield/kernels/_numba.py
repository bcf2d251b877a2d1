"""Numba JIT kernels for ray marching, loss gradients, and TV regularizers.

Layout conventions (shared with the numpy twin in _numpy.py):
    occ        int32 (Nx, Ny, Nz), slot index or -1 for empty
    density    float64 (S,) raw values (ReLU applied after interpolation)
    sh         float64 (S, 27), 9 coefficients per channel, R then G then B
    bg_texels  float64 (L, H, 2H, 4), RGB logits + raw density per texel

Per marched sample i with spacing delta: alpha_i = 1 - exp(-sigma_i * delta),
weight_i = T_i * alpha_i, T_{i+1} = T_i * (1 - alpha_i). Transmittance that
survives the last background layer is filled with brightness * (1, 1, 1).
"""

import math

import numpy as np
from numba import njit, prange

_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C20 = 1.0925484305920792
_SH_C22 = 0.31539156525252005
_SH_C24 = 0.5462742152960396


@njit(cache=True)
def _sh9(dx, dy, dz, b):
    b[0] = _SH_C0
    b[1] = -_SH_C1 * dy
    b[2] = _SH_C1 * dz
    b[3] = -_SH_C1 * dx
    b[4] = _SH_C20 * dx * dy
    b[5] = -_SH_C20 * dy * dz
    b[6] = _SH_C22 * (3.0 * dz * dz - 1.0)
    b[7] = -_SH_C20 * dx * dz
    b[8] = _SH_C24 * (dx * dx - dy * dy)


@njit(cache=True)
def _clip_ray(o, d, bmin, bmax, tn, tf):
    t0 = tn
    t1 = tf
    if t0 < 0.0:
        t0 = 0.0
    for a in range(3):
        da = d[a]
        if abs(da) < 1e-15:
            if o[a] < bmin[a] or o[a] > bmax[a]:
                return 1.0, 0.0
        else:
            inv = 1.0 / da
            ta = (bmin[a] - o[a]) * inv
            tb = (bmax[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True)
def _gather_corners(occ, gx, gy, gz, slots, wts):
    """Fill the 8 corner slots/weights around continuous lattice coords."""
    i0 = int(math.floor(gx))
    j0 = int(math.floor(gy))
    k0 = int(math.floor(gz))
    wx = gx - i0
    wy = gy - j0
    wz = gz - k0
    n0, n1, n2 = occ.shape
    idx = 0
    for di in range(2):
        ii = i0 + di
        wi = wx if di == 1 else 1.0 - wx
        for dj in range(2):
            jj = j0 + dj
            wj = wy if dj == 1 else 1.0 - wy
            for dk in range(2):
                kk = k0 + dk
                wk = wz if dk == 1 else 1.0 - wz
                if 0 <= ii < n0 and 0 <= jj < n1 and 0 <= kk < n2:
                    slots[idx] = occ[ii, jj, kk]
                else:
                    slots[idx] = -1
                wts[idx] = wi * wj * wk
                idx += 1


@njit(cache=True)
def _bg_layer_lookup(tex, radii, center, o, d, layer):
    """Intersect one background sphere and sample its texture bilinearly.

    Returns (hit, sigma_raw, lr, lg, lb, yi0, xi0, yi1, xi1, w00, w01, w10, w11).
    """
    r = radii[layer]
    ocx = o[0] - center[0]
    ocy = o[1] - center[1]
    ocz = o[2] - center[2]
    b = ocx * d[0] + ocy * d[1] + ocz * d[2]
    c = ocx * ocx + ocy * ocy + ocz * ocz - r * r
    disc = b * b - c
    if disc <= 0.0:
        return False, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, 0, 0.0, 0.0, 0.0, 0.0
    t = -b + math.sqrt(disc)
    if t <= 0.0:
        return False, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, 0, 0.0, 0.0, 0.0, 0.0
    px = ocx + t * d[0]
    py = ocy + t * d[1]
    pz = ocz + t * d[2]
    nrm = math.sqrt(px * px + py * py + pz * pz)
    ux = px / nrm
    uy = py / nrm
    uz = pz / nrm
    if uz > 1.0:
        uz = 1.0
    elif uz < -1.0:
        uz = -1.0
    H = tex.shape[1]
    W = tex.shape[2]
    x = (math.atan2(uy, ux) + math.pi) / (2.0 * math.pi) * W - 0.5
    y = math.acos(uz) / math.pi * H - 0.5
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    fx = x - x0
    fy = y - y0
    xi0 = x0 % W
    xi1 = (x0 + 1) % W
    yi0 = y0
    if yi0 < 0:
        yi0 = 0
    elif yi0 > H - 1:
        yi0 = H - 1
    yi1 = y0 + 1
    if yi1 < 0:
        yi1 = 0
    elif yi1 > H - 1:
        yi1 = H - 1
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    sr = (w00 * tex[layer, yi0, xi0, 3] + w01 * tex[layer, yi0, xi1, 3]
          + w10 * tex[layer, yi1, xi0, 3] + w11 * tex[layer, yi1, xi1, 3])
    lr = (w00 * tex[layer, yi0, xi0, 0] + w01 * tex[layer, yi0, xi1, 0]
          + w10 * tex[layer, yi1, xi0, 0] + w11 * tex[layer, yi1, xi1, 0])
    lg = (w00 * tex[layer, yi0, xi0, 1] + w01 * tex[layer, yi0, xi1, 1]
          + w10 * tex[layer, yi1, xi0, 1] + w11 * tex[layer, yi1, xi1, 1])
    lb = (w00 * tex[layer, yi0, xi0, 2] + w01 * tex[layer, yi0, xi1, 2]
          + w10 * tex[layer, yi1, xi0, 2] + w11 * tex[layer, yi1, xi1, 2])
    return True, sr, lr, lg, lb, yi0, xi0, yi1, xi1, w00, w01, w10, w11


@njit(cache=True)
def _bg_radiance(tex, radii, center, brightness, o, d):
    L = radii.shape[0]
    tb = 1.0
    ar = 0.0
    ag = 0.0
    ab = 0.0
    for layer in range(L):
        hit, sr, lr, lg, lb, _, _, _, _, _, _, _, _ = _bg_layer_lookup(
            tex, radii, center, o, d, layer)
        if not hit:
            continue
        sig = sr if sr > 0.0 else 0.0
        alpha = 1.0 - math.exp(-sig)
        if alpha > 0.0:
            cr = 1.0 / (1.0 + math.exp(-lr))
            cg = 1.0 / (1.0 + math.exp(-lg))
            cb = 1.0 / (1.0 + math.exp(-lb))
            ar += tb * alpha * cr
            ag += tb * alpha * cg
            ab += tb * alpha * cb
            tb *= 1.0 - alpha
    ar += tb * brightness
    ag += tb * brightness
    ab += tb * brightness
    return ar, ag, ab


@njit(cache=True)
def _march_ray(occ, density, sh, bmin, bmax, vsx, vsy, vsz, o, d, tn, tf,
               step, sigma_thr, stop_thr, basis, slots, wts, out3):
    """Foreground march for one ray; fills out3 with RGB, returns T_final."""
    out3[0] = 0.0
    out3[1] = 0.0
    out3[2] = 0.0
    T = 1.0
    t0, t1 = _clip_ray(o, d, bmin, bmax, tn, tf)
    if t1 <= t0:
        return T
    _sh9(d[0], d[1], d[2], basis)
    n = int(math.ceil((t1 - t0) / step))
    for i in range(n):
        t = t0 + i * step
        if t >= t1:
            break
        px = o[0] + t * d[0]
        py = o[1] + t * d[1]
        pz = o[2] + t * d[2]
        if (px < bmin[0] or px > bmax[0] or py < bmin[1] or py > bmax[1]
                or pz < bmin[2] or pz > bmax[2]):
            continue
        gx = (px - bmin[0]) / vsx - 0.5
        gy = (py - bmin[1]) / vsy - 0.5
        gz = (pz - bmin[2]) / vsz - 0.5
        _gather_corners(occ, gx, gy, gz, slots, wts)
        sig = 0.0
        for c8 in range(8):
            s = slots[c8]
            if s >= 0:
                sig += wts[c8] * density[s]
        if sig < 0.0:
            sig = 0.0
        if sig < sigma_thr:
            continue
        alpha = 1.0 - math.exp(-sig * step)
        lr = 0.0
        lg = 0.0
        lb = 0.0
        for c8 in range(8):
            s = slots[c8]
            if s >= 0:
                w = wts[c8]
                for k in range(9):
                    bk = basis[k] * w
                    lr += sh[s, k] * bk
                    lg += sh[s, 9 + k] * bk
                    lb += sh[s, 18 + k] * bk
        wgt = T * alpha
        out3[0] += wgt * (1.0 / (1.0 + math.exp(-lr)))
        out3[1] += wgt * (1.0 / (1.0 + math.exp(-lg)))
        out3[2] += wgt * (1.0 / (1.0 + math.exp(-lb)))
        T *= 1.0 - alpha
        if T < stop_thr:
            break
    return T


@njit(cache=True)
def render_forward(occ, density, sh, bmin, bmax, vsize, origins, dirs,
                   tnear, tfar, step, sigma_thr, stop_thr, skip_fg,
                   use_bg_model, bg_texels, bg_radii, bg_center, brightness,
                   out_rgb, out_T):
    B = origins.shape[0]
    basis = np.empty(9)
    slots = np.empty(8, np.int64)
    wts = np.empty(8)
    o = np.empty(3)
    d = np.empty(3)
    out3 = np.empty(3)
    for r in range(B):
        for a in range(3):
            o[a] = origins[r, a]
            d[a] = dirs[r, a]
        if skip_fg:
            out3[0] = 0.0
            out3[1] = 0.0
            out3[2] = 0.0
            T = 1.0
        else:
            T = _march_ray(occ, density, sh, bmin, bmax,
                           vsize[0], vsize[1], vsize[2], o, d,
                           tnear[r], tfar[r], step, sigma_thr, stop_thr,
                           basis, slots, wts, out3)
        if use_bg_model:
            br, bgc, bb = _bg_radiance(bg_texels, bg_radii, bg_center, brightness, o, d)
            out3[0] += T * br
            out3[1] += T * bgc
            out3[2] += T * bb
        else:
            out3[0] += T * brightness
            out3[1] += T * brightness
            out3[2] += T * brightness
        out_rgb[r, 0] = out3[0]
        out_rgb[r, 1] = out3[1]
        out_rgb[r, 2] = out3[2]
        out_T[r] = T


@njit(cache=True, parallel=True)
def render_forward_parallel(occ, density, sh, bmin, bmax, vsize, origins, dirs,
                            tnear, tfar, step, sigma_thr, stop_thr, skip_fg,
                            use_bg_model, bg_texels, bg_radii, bg_center,
                            brightness, out_rgb, out_T):
    # writes are disjoint per ray, so results are identical to the serial kernel
    B = origins.shape[0]
    for r in prange(B):
        basis = np.empty(9)
        slots = np.empty(8, np.int64)
        wts = np.empty(8)
        o = np.empty(3)
        d = np.empty(3)
        out3 = np.empty(3)
        for a in range(3):
            o[a] = origins[r, a]
            d[a] = dirs[r, a]
        if skip_fg:
            out3[0] = 0.0
            out3[1] = 0.0
            out3[2] = 0.0
            T = 1.0
        else:
            T = _march_ray(occ, density, sh, bmin, bmax,
                           vsize[0], vsize[1], vsize[2], o, d,
                           tnear[r], tfar[r], step, sigma_thr, stop_thr,
                           basis, slots, wts, out3)
        if use_bg_model:
            br, bgc, bb = _bg_radiance(bg_texels, bg_radii, bg_center, brightness, o, d)
            out3[0] += T * br
            out3[1] += T * bgc
            out3[2] += T * bb
        else:
            out3[0] += T * brightness
            out3[1] += T * brightness
            out3[2] += T * brightness
        out_rgb[r, 0] = out3[0]
        out_rgb[r, 1] = out3[1]
        out_rgb[r, 2] = out3[2]
        out_T[r] = T


@njit(cache=True)
def render_backward(occ, density, sh, bmin, bmax, vsize, origins, dirs,
                    tnear, tfar, step, sigma_thr, stop_thr, skip_fg,
                    use_bg_model, bg_texels, bg_radii, bg_center, brightness,
                    targets, g_scale, beta_scale,
                    d_density, d_sh, d_bg, out_rgb, out_T, loss_out):
    """Fused forward + analytic backward for the rendering loss.

    g_scale multiplies residuals into dL/dC (2 / (3 * batch) for channel-mean
    MSE); beta_scale = lambda_beta / batch. Gradients are accumulated into
    d_density, d_sh and d_bg. loss_out receives [sum of squared residuals,
    sum of log T + log(1 - T)].
    """
    B = origins.shape[0]
    diag = math.sqrt((bmax[0] - bmin[0]) ** 2 + (bmax[1] - bmin[1]) ** 2
                     + (bmax[2] - bmin[2]) ** 2)
    n_max = int(diag / step) + 3
    L = bg_radii.shape[0]

    basis = np.empty(9)
    slots = np.empty(8, np.int64)
    wts = np.empty(8)
    o = np.empty(3)
    d = np.empty(3)
    # per-sample records for the backward walk
    s_tbef = np.empty(n_max)
    s_alpha = np.empty(n_max)
    s_sigraw = np.empty(n_max)
    s_col = np.empty((n_max, 3))
    s_slots = np.empty((n_max, 8), np.int64)
    s_wts = np.empty((n_max, 8))
    # per-layer records for the background backward walk
    l_hit = np.empty(L, np.int64)
    l_tbef = np.empty(L)
    l_alpha = np.empty(L)
    l_sigraw = np.empty(L)
    l_col = np.empty((L, 3))
    l_idx = np.empty((L, 4), np.int64)
    l_w = np.empty((L, 4))

    sse = 0.0
    beta_sum = 0.0
    for r in range(B):
        for a in range(3):
            o[a] = origins[r, a]
            d[a] = dirs[r, a]
        # forward march, recording per-sample state
        m = 0
        T = 1.0
        cfr = 0.0
        cfg = 0.0
        cfb = 0.0
        if not skip_fg:
            t0, t1 = _clip_ray(o, d, bmin, bmax, tnear[r], tfar[r])
            if t1 > t0:
                _sh9(d[0], d[1], d[2], basis)
                n = int(math.ceil((t1 - t0) / step))
                for i in range(n):
                    t = t0 + i * step
                    if t >= t1:
                        break
                    px = o[0] + t * d[0]
                    py = o[1] + t * d[1]
                    pz = o[2] + t * d[2]
                    if (px < bmin[0] or px > bmax[0] or py < bmin[1]
                            or py > bmax[1] or pz < bmin[2] or pz > bmax[2]):
                        continue
                    gx = (px - bmin[0]) / vsize[0] - 0.5
                    gy = (py - bmin[1]) / vsize[1] - 0.5
                    gz = (pz - bmin[2]) / vsize[2] - 0.5
                    _gather_corners(occ, gx, gy, gz, slots, wts)
                    sigraw = 0.0
                    for c8 in range(8):
                        s = slots[c8]
                        if s >= 0:
                            sigraw += wts[c8] * density[s]
                    sig = sigraw if sigraw > 0.0 else 0.0
                    if sig < sigma_thr:
                        continue
                    alpha = 1.0 - math.exp(-sig * step)
                    lr = 0.0
                    lg = 0.0
                    lb = 0.0
                    for c8 in range(8):
                        s = slots[c8]
                        if s >= 0:
                            w = wts[c8]
                            for k in range(9):
                                bk = basis[k] * w
                                lr += sh[s, k] * bk
                                lg += sh[s, 9 + k] * bk
                                lb += sh[s, 18 + k] * bk
                    cr = 1.0 / (1.0 + math.exp(-lr))
                    cg = 1.0 / (1.0 + math.exp(-lg))
                    cb = 1.0 / (1.0 + math.exp(-lb))
                    s_tbef[m] = T
                    s_alpha[m] = alpha
                    s_sigraw[m] = sigraw
                    s_col[m, 0] = cr
                    s_col[m, 1] = cg
                    s_col[m, 2] = cb
                    for c8 in range(8):
                        s_slots[m, c8] = slots[c8]
                        s_wts[m, c8] = wts[c8]
                    wgt = T * alpha
                    cfr += wgt * cr
                    cfg += wgt * cg
                    cfb += wgt * cb
                    m += 1
                    T *= 1.0 - alpha
                    if T < stop_thr:
                        break
        # background forward, recording per-layer state
        btr = brightness
        btg = brightness
        btb = brightness
        if use_bg_model:
            tb = 1.0
            ar = 0.0
            ag = 0.0
            ab = 0.0
            for layer in range(L):
                hit, sr, lr, lg, lb, yi0, xi0, yi1, xi1, w00, w01, w10, w11 = \
                    _bg_layer_lookup(bg_texels, bg_radii, bg_center, o, d, layer)
                if hit:
                    l_hit[layer] = 1
                    sig = sr if sr > 0.0 else 0.0
                    alpha = 1.0 - math.exp(-sig)
                    cr = 1.0 / (1.0 + math.exp(-lr))
                    cg = 1.0 / (1.0 + math.exp(-lg))
                    cb = 1.0 / (1.0 + math.exp(-lb))
                    l_tbef[layer] = tb
                    l_alpha[layer] = alpha
                    l_sigraw[layer] = sr
                    l_col[layer, 0] = cr
                    l_col[layer, 1] = cg
                    l_col[layer, 2] = cb
                    l_idx[layer, 0] = yi0
                    l_idx[layer, 1] = xi0
                    l_idx[layer, 2] = yi1
                    l_idx[layer, 3] = xi1
                    l_w[layer, 0] = w00
                    l_w[layer, 1] = w01
                    l_w[layer, 2] = w10
                    l_w[layer, 3] = w11
                    ar += tb * alpha * cr
                    ag += tb * alpha * cg
                    ab += tb * alpha * cb
                    tb *= 1.0 - alpha
                else:
                    l_hit[layer] = 0
            btr = ar + tb * brightness
            btg = ag + tb * brightness
            btb = ab + tb * brightness
        chat_r = cfr + T * btr
        chat_g = cfg + T * btg
        chat_b = cfb + T * btb
        out_rgb[r, 0] = chat_r
        out_rgb[r, 1] = chat_g
        out_rgb[r, 2] = chat_b
        out_T[r] = T

        er = chat_r - targets[r, 0]
        eg = chat_g - targets[r, 1]
        eb = chat_b - targets[r, 2]
        sse += er * er + eg * eg + eb * eb
        gr = g_scale * er
        gg = g_scale * eg
        gb = g_scale * eb

        tclamp = T
        if tclamp < 1e-6:
            tclamp = 1e-6
        elif tclamp > 1.0 - 1e-6:
            tclamp = 1.0 - 1e-6
        beta_sum += math.log(tclamp) + math.log(1.0 - tclamp)
        g_t = 0.0
        if beta_scale != 0.0 and 1e-6 < T < 1.0 - 1e-6:
            g_t = beta_scale * (1.0 / T - 1.0 / (1.0 - T))

        # background texel gradients (scaled by final foreground transmittance)
        if use_bg_model:
            gbr = gr * T
            gbg = gg * T
            gbb = gb * T
            suf_r = 0.0
            suf_g = 0.0
            suf_b = 0.0
            # suffix initialized with the brightness tail
            tb_end = 1.0
            for layer in range(L):
                if l_hit[layer] == 1:
                    tb_end *= 1.0 - l_alpha[layer]
            suf_r = tb_end * brightness
            suf_g = tb_end * brightness
            suf_b = tb_end * brightness
            for layer in range(L - 1, -1, -1):
                if l_hit[layer] == 0:
                    continue
                tb = l_tbef[layer]
                alpha = l_alpha[layer]
                cr = l_col[layer, 0]
                cg = l_col[layer, 1]
                cb = l_col[layer, 2]
                wl = tb * alpha
                if l_sigraw[layer] > 0.0:
                    gsig = (gbr * (tb * cr * (1.0 - alpha) - suf_r)
                            + gbg * (tb * cg * (1.0 - alpha) - suf_g)
                            + gbb * (tb * cb * (1.0 - alpha) - suf_b))
                    for q in range(4):
                        yq = l_idx[layer, 2 * (q // 2)]
                        xq = l_idx[layer, 1 + 2 * (q % 2)]
                        d_bg[layer, yq, xq, 3] += gsig * l_w[layer, q]
                glr = gbr * wl * cr * (1.0 - cr)
                glg = gbg * wl * cg * (1.0 - cg)
                glb = gbb * wl * cb * (1.0 - cb)
                for q in range(4):
                    yq = l_idx[layer, 2 * (q // 2)]
                    xq = l_idx[layer, 1 + 2 * (q % 2)]
                    wq = l_w[layer, q]
                    d_bg[layer, yq, xq, 0] += glr * wq
                    d_bg[layer, yq, xq, 1] += glg * wq
                    d_bg[layer, yq, xq, 2] += glb * wq
                suf_r += wl * cr
                suf_g += wl * cg
                suf_b += wl * cb

        # foreground gradients, walking samples back to front
        if m > 0:
            suf_r = T * btr
            suf_g = T * btg
            suf_b = T * btb
            for i in range(m - 1, -1, -1):
                tb = s_tbef[i]
                alpha = s_alpha[i]
                cr = s_col[i, 0]
                cg = s_col[i, 1]
                cb = s_col[i, 2]
                wgt = tb * alpha
                if s_sigraw[i] > 0.0:
                    gsig = step * (gr * (tb * cr * (1.0 - alpha) - suf_r)
                                   + gg * (tb * cg * (1.0 - alpha) - suf_g)
                                   + gb * (tb * cb * (1.0 - alpha) - suf_b))
                    gsig -= g_t * step * T
                    for c8 in range(8):
                        s = s_slots[i, c8]
                        if s >= 0:
                            d_density[s] += gsig * s_wts[i, c8]
                glr = gr * wgt * cr * (1.0 - cr)
                glg = gg * wgt * cg * (1.0 - cg)
                glb = gb * wgt * cb * (1.0 - cb)
                for c8 in range(8):
                    s = s_slots[i, c8]
                    if s >= 0:
                        wq = s_wts[i, c8]
                        for k in range(9):
                            bk = basis[k] * wq
                            d_sh[s, k] += glr * bk
                            d_sh[s, 9 + k] += glg * bk
                            d_sh[s, 18 + k] += glb * bk
                suf_r += wgt * cr
                suf_g += wgt * cg
                suf_b += wgt * cb
    loss_out[0] = sse
    loss_out[1] = beta_sum


@njit(cache=True)
def tv_grad(values, nbx, nby, nbz, lam, grad):
    """Total variation over slots: sum of sqrt(dx^2 + dy^2 + dz^2 + 1e-12).

    Differences toward +x/+y/+z neighbors; terms with empty neighbors are
    skipped. Returns the unweighted sum; gradients are scaled by lam and
    accumulated into grad.
    """
    S, C = values.shape
    eps = 1e-12
    total = 0.0
    for s in range(S):
        ix = nbx[s]
        iy = nby[s]
        iz = nbz[s]
        for c in range(C):
            v = values[s, c]
            dx = 0.0
            dy = 0.0
            dz = 0.0
            if ix >= 0:
                dx = values[ix, c] - v
            if iy >= 0:
                dy = values[iy, c] - v
            if iz >= 0:
                dz = values[iz, c] - v
            r = math.sqrt(dx * dx + dy * dy + dz * dz + eps)
            total += r
            inv = lam / r
            if ix >= 0:
                g = dx * inv
                grad[ix, c] += g
                grad[s, c] -= g
            if iy >= 0:
                g = dy * inv
                grad[iy, c] += g
                grad[s, c] -= g
            if iz >= 0:
                g = dz * inv
                grad[iz, c] += g
                grad[s, c] -= g
    return total


@njit(cache=True)
def bg_tv_grad(texels, lam_color, lam_density, d_bg, out2):
    """2D total variation per background layer (wrapping in x, clamped in y).

    out2 receives the unweighted sums [color, density]; gradients are scaled
    by the respective lambda and accumulated into d_bg.
    """
    L, H, W, _ = texels.shape
    eps = 1e-12
    tot_c = 0.0
    tot_d = 0.0
    for layer in range(L):
        for y in range(H):
            yn = y + 1
            for x in range(W):
                xn = (x + 1) % W
                for c in range(4):
                    v = texels[layer, y, x, c]
                    dx = texels[layer, y, xn, c] - v
                    dy = 0.0
                    if yn < H:
                        dy = texels[layer, yn, x, c] - v
                    r = math.sqrt(dx * dx + dy * dy + eps)
                    lam = lam_density if c == 3 else lam_color
                    if c == 3:
                        tot_d += r
                    else:
                        tot_c += r
                    inv = lam / r
                    g = dx * inv
                    d_bg[layer, y, xn, c] += g
                    d_bg[layer, y, x, c] -= g
                    if yn < H:
                        g = dy * inv
                        d_bg[layer, yn, x, c] += g
                        d_bg[layer, y, x, c] -= g
    out2[0] = tot_c
    out2[1] = tot_d
