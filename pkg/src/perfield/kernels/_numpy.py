"""Pure-numpy twin of the JIT kernels, selected via PERFIELD_BACKEND=numpy.

Vectorizes over rays in fixed-size chunks with samples padded to the longest
ray in the chunk. Semantics match _numba.py exactly (same sample positions,
same skip/early-stop rules); only the order of a few floating-point
reductions differs.
"""

import numpy as np

from ..grid import sh_basis

_CHUNK = 512


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _clip_rays(o, d, bmin, bmax, tn, tf):
    t0 = np.maximum(tn, 0.0)
    t1 = tf.astype(np.float64).copy()
    for a in range(3):
        da = d[:, a]
        small = np.abs(da) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / da
        ta = (bmin[a] - o[:, a]) * inv
        tb = (bmax[a] - o[:, a]) * inv
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        outside = (o[:, a] < bmin[a]) | (o[:, a] > bmax[a])
        t0 = np.where(small, np.where(outside, 1.0, t0), np.maximum(t0, lo))
        t1 = np.where(small, np.where(outside, 0.0, t1), np.minimum(t1, hi))
    return t0, t1


def _gather_corners(occ, density, sh, bmin, vsize, pos):
    """Trilinear gather at world positions (B, n, 3).

    Returns raw sigma (B, n), interpolated sh (B, n, 27), and the corner
    slots (8, B, n) and weights (8, B, n) for gradient scatter.
    """
    g = (pos - bmin) / vsize - 0.5
    i0 = np.floor(g).astype(np.int64)
    frac = g - i0
    shp = pos.shape[:2]
    sig = np.zeros(shp)
    shv = np.zeros(shp + (27,))
    res = np.asarray(occ.shape)
    slots = np.empty((8,) + shp, np.int64)
    weights = np.empty((8,) + shp)
    idx = 0
    for di in (0, 1):
        wx = frac[..., 0] if di else 1.0 - frac[..., 0]
        for dj in (0, 1):
            wy = frac[..., 1] if dj else 1.0 - frac[..., 1]
            for dk in (0, 1):
                wz = frac[..., 2] if dk else 1.0 - frac[..., 2]
                ci = i0 + np.array([di, dj, dk])
                ok = ((ci >= 0) & (ci < res)).all(axis=-1)
                slot = np.full(shp, -1, np.int64)
                cio = ci[ok]
                slot[ok] = occ[cio[:, 0], cio[:, 1], cio[:, 2]]
                w = wx * wy * wz
                hit = slot >= 0
                sig[hit] += w[hit] * density[slot[hit]]
                shv[hit] += w[hit, None] * sh[slot[hit]]
                slots[idx] = slot
                weights[idx] = w
                idx += 1
    return sig, shv, slots, weights


def _bg_layer_lookup(tex, radii, center, o, d, layer):
    """Batched sphere intersection + bilinear texture fetch for one layer."""
    r = radii[layer]
    oc = o - center
    b = (oc * d).sum(axis=1)
    c = (oc * oc).sum(axis=1) - r * r
    disc = b * b - c
    hit = disc > 0.0
    t = -b + np.sqrt(np.maximum(disc, 0.0))
    hit &= t > 0.0
    p = oc + t[:, None] * d
    nrm = np.maximum(np.linalg.norm(p, axis=1), 1e-300)
    u = p / nrm[:, None]
    H = tex.shape[1]
    W = tex.shape[2]
    x = (np.arctan2(u[:, 1], u[:, 0]) + np.pi) / (2.0 * np.pi) * W - 0.5
    y = np.arccos(np.clip(u[:, 2], -1.0, 1.0)) / np.pi * H - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    xi0 = np.mod(x0, W)
    xi1 = np.mod(x0 + 1, W)
    yi0 = np.clip(y0, 0, H - 1)
    yi1 = np.clip(y0 + 1, 0, H - 1)
    w4 = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx,
                   fy * (1 - fx), fy * fx], axis=1)
    corners = ((yi0, xi0), (yi0, xi1), (yi1, xi0), (yi1, xi1))
    vals = np.zeros((o.shape[0], 4))
    for q, (yy, xx) in enumerate(corners):
        vals += w4[:, q, None] * tex[layer, yy, xx]
    return hit, vals, corners, w4


def _bg_forward(tex, radii, center, brightness, o, d, record=False):
    B = o.shape[0]
    acc = np.zeros((B, 3))
    tb = np.ones(B)
    rec = [] if record else None
    for layer in range(radii.shape[0]):
        hit, vals, corners, w4 = _bg_layer_lookup(tex, radii, center, o, d, layer)
        sig = np.where(hit, np.maximum(vals[:, 3], 0.0), 0.0)
        alpha = 1.0 - np.exp(-sig)
        rgb = _sigmoid(vals[:, :3])
        if record:
            rec.append((layer, hit, tb.copy(), alpha, vals[:, 3], rgb, corners, w4))
        acc += (tb * alpha)[:, None] * rgb
        tb = tb * (1.0 - alpha)
    acc += tb[:, None] * brightness
    return acc, rec


def _march_chunk(occ, density, sh, bmin, bmax, vsize, o, d, tn, tf,
                 step, sigma_thr, stop_thr):
    """Padded forward march for a chunk. Returns everything backward needs."""
    B = o.shape[0]
    t0, t1 = _clip_rays(o, d, bmin, bmax, tn, tf)
    span = np.maximum(t1 - t0, 0.0)
    n = np.where(t1 > t0, np.ceil(span / step), 0.0).astype(np.int64)
    nmax = int(n.max()) if B else 0
    if nmax == 0:
        z = np.zeros((B, 0))
        return (np.zeros((B, 3)), np.ones(B), z, z, z, z,
                np.zeros((B, 0, 3)), np.zeros((8, B, 0), np.int64),
                np.zeros((8, B, 0)), z.astype(bool))
    k = np.arange(nmax)
    tk = t0[:, None] + k[None, :] * step
    valid = (k[None, :] < n[:, None]) & (tk < t1[:, None])
    pos = o[:, None, :] + tk[..., None] * d[:, None, :]
    valid &= ((pos >= bmin) & (pos <= bmax)).all(axis=-1)
    sig_raw, shv, slots, cw = _gather_corners(occ, density, sh, bmin, vsize, pos)
    sig = np.maximum(sig_raw, 0.0)
    sig = np.where(valid, sig, 0.0)
    process = valid & (sig >= sigma_thr)
    alpha = np.where(process, 1.0 - np.exp(-sig * step), 0.0)
    t_incl = np.cumprod(1.0 - alpha, axis=1)
    t_excl = np.concatenate([np.ones((B, 1)), t_incl[:, :-1]], axis=1)
    below = t_incl < stop_thr
    any_stop = below.any(axis=1)
    first_stop = np.where(any_stop, below.argmax(axis=1), nmax - 1)
    include = k[None, :] <= first_stop[:, None]
    t_final = t_incl[np.arange(B), first_stop]
    basis = sh_basis(d)
    logits = np.einsum("bnck,bk->bnc", shv.reshape(B, nmax, 3, 9), basis)
    colors = _sigmoid(logits)
    w = t_excl * alpha * include
    c_fg = (w[..., None] * colors).sum(axis=1)
    return (c_fg, t_final, sig_raw, alpha, w, t_excl, colors, slots, cw,
            process & include)


def render_forward(occ, density, sh, bmin, bmax, vsize, origins, dirs,
                   tnear, tfar, step, sigma_thr, stop_thr, skip_fg,
                   use_bg_model, bg_texels, bg_radii, bg_center, brightness,
                   out_rgb, out_T):
    B = origins.shape[0]
    for lo in range(0, B, _CHUNK):
        hi = min(lo + _CHUNK, B)
        o = origins[lo:hi]
        d = dirs[lo:hi]
        if skip_fg:
            c_fg = np.zeros((hi - lo, 3))
            t_final = np.ones(hi - lo)
        else:
            c_fg, t_final = _march_chunk(occ, density, sh, bmin, bmax, vsize,
                                         o, d, tnear[lo:hi], tfar[lo:hi],
                                         step, sigma_thr, stop_thr)[:2]
        if use_bg_model:
            bg, _ = _bg_forward(bg_texels, bg_radii, bg_center, brightness, o, d)
        else:
            bg = np.full((hi - lo, 3), brightness)
        out_rgb[lo:hi] = c_fg + t_final[:, None] * bg
        out_T[lo:hi] = t_final


def render_backward(occ, density, sh, bmin, bmax, vsize, origins, dirs,
                    tnear, tfar, step, sigma_thr, stop_thr, skip_fg,
                    use_bg_model, bg_texels, bg_radii, bg_center, brightness,
                    targets, g_scale, beta_scale,
                    d_density, d_sh, d_bg, out_rgb, out_T, loss_out):
    B = origins.shape[0]
    sse = 0.0
    beta_sum = 0.0
    for lo in range(0, B, _CHUNK):
        hi = min(lo + _CHUNK, B)
        nb = hi - lo
        o = origins[lo:hi]
        d = dirs[lo:hi]
        if skip_fg:
            c_fg = np.zeros((nb, 3))
            t_final = np.ones(nb)
            nmax = 0
        else:
            (c_fg, t_final, sig_raw, alpha, w, t_excl, colors, slots, cw,
             contrib) = _march_chunk(occ, density, sh, bmin, bmax, vsize,
                                     o, d, tnear[lo:hi], tfar[lo:hi],
                                     step, sigma_thr, stop_thr)
            nmax = w.shape[1]
        if use_bg_model:
            bg, rec = _bg_forward(bg_texels, bg_radii, bg_center, brightness,
                                  o, d, record=True)
        else:
            bg = np.full((nb, 3), brightness)
            rec = None
        chat = c_fg + t_final[:, None] * bg
        out_rgb[lo:hi] = chat
        out_T[lo:hi] = t_final

        resid = chat - targets[lo:hi]
        sse += float((resid * resid).sum())
        g = g_scale * resid
        t_clamp = np.clip(t_final, 1e-6, 1.0 - 1e-6)
        beta_sum += float((np.log(t_clamp) + np.log(1.0 - t_clamp)).sum())
        g_t = np.zeros(nb)
        if beta_scale != 0.0:
            interior = (t_final > 1e-6) & (t_final < 1.0 - 1e-6)
            g_t[interior] = beta_scale * (1.0 / t_final[interior]
                                          - 1.0 / (1.0 - t_final[interior]))

        if use_bg_model:
            gb = g * t_final[:, None]
            tb_end = np.ones(nb)
            for _, hit, _, la, _, _, _, _ in rec:
                tb_end = tb_end * np.where(hit, 1.0 - la, 1.0)
            suf = np.repeat((tb_end * brightness)[:, None], 3, axis=1)
            for layer, hit, tb, la, sraw, rgb, corners, w4 in reversed(rec):
                wl = tb * la
                gsig = (gb * (tb[:, None] * rgb * (1.0 - la[:, None]) - suf)).sum(axis=1)
                gsig = np.where(hit & (sraw > 0.0), gsig, 0.0)
                glog = gb * wl[:, None] * rgb * (1.0 - rgb)
                glog = np.where(hit[:, None], glog, 0.0)
                for q, (yy, xx) in enumerate(corners):
                    wq = w4[:, q]
                    np.add.at(d_bg[layer, ..., 3], (yy, xx), gsig * wq)
                    for ch in range(3):
                        np.add.at(d_bg[layer, ..., ch], (yy, xx), glog[:, ch] * wq)
                suf = suf + np.where(hit[:, None], wl[:, None] * rgb, 0.0)

        if nmax > 0:
            c_tot = c_fg + t_final[:, None] * bg
            prefix = np.cumsum(w[..., None] * colors, axis=1)
            suffix = c_tot[:, None, :] - prefix
            gsig = step * np.einsum(
                "bc,bnc->bn", g,
                t_excl[..., None] * colors * (1.0 - alpha[..., None]) - suffix)
            gsig = gsig - (g_t * t_final)[:, None] * step
            mask_sig = contrib & (sig_raw > 0.0)
            gsig = np.where(mask_sig, gsig, 0.0)
            glogit = g[:, None, :] * w[..., None] * colors * (1.0 - colors)
            basis = sh_basis(d)
            coeff = np.einsum("bnc,bk->bnck", glogit, basis).reshape(nb, nmax, 27)
            for q in range(8):
                sl = slots[q]
                sel = sl >= 0
                if sel.any():
                    np.add.at(d_density, sl[sel], (gsig * cw[q])[sel])
                    np.add.at(d_sh, sl[sel], coeff[sel] * cw[q][sel, None])
    loss_out[0] = sse
    loss_out[1] = beta_sum


def tv_grad(values, nbx, nby, nbz, lam, grad):
    """Vectorized twin of the JIT total-variation kernel."""
    eps = 1e-12
    hx = nbx >= 0
    hy = nby >= 0
    hz = nbz >= 0
    dx = np.zeros_like(values)
    dy = np.zeros_like(values)
    dz = np.zeros_like(values)
    dx[hx] = values[nbx[hx]] - values[hx]
    dy[hy] = values[nby[hy]] - values[hy]
    dz[hz] = values[nbz[hz]] - values[hz]
    r = np.sqrt(dx * dx + dy * dy + dz * dz + eps)
    inv = lam / r
    gx = dx * inv
    gy = dy * inv
    gz = dz * inv
    np.add.at(grad, nbx[hx], gx[hx])
    grad[hx] -= gx[hx]
    np.add.at(grad, nby[hy], gy[hy])
    grad[hy] -= gy[hy]
    np.add.at(grad, nbz[hz], gz[hz])
    grad[hz] -= gz[hz]
    return float(r.sum())


def bg_tv_grad(texels, lam_color, lam_density, d_bg, out2):
    eps = 1e-12
    dx = np.roll(texels, -1, axis=2) - texels
    dy = np.zeros_like(texels)
    dy[:, :-1] = texels[:, 1:] - texels[:, :-1]
    r = np.sqrt(dx * dx + dy * dy + eps)
    out2[0] = float(r[..., :3].sum())
    out2[1] = float(r[..., 3].sum())
    lam = np.array([lam_color, lam_color, lam_color, lam_density])
    gx = dx / r * lam
    gy = dy / r * lam
    d_bg += np.roll(gx, 1, axis=2) - gx
    d_bg[:, 1:] += gy[:, :-1]
    d_bg[:, :-1] -= gy[:, :-1]
