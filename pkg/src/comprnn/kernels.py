"""Numba kernels for the LSTM forward pass, BPTT, generation, and optimizers.

Everything is float64 and single-threaded; a training run is a strictly
sequential chain of per-episode updates, so determinism holds bit-for-bit
for a fixed seed regardless of how many runs execute in parallel.

Layout conventions (fixed across the package):
  * gate weights `Wg` are stacked rows [input, forget, cell, output], each
    block H rows, over columns [x ; h_prev] (input dim first);
  * the per-step input vector is 20-dim; column 15 is the space character
    and columns 16..18 hold the previous output character one-hot.
"""
from __future__ import annotations

import numpy as np
from numba import njit

SPACE_COL = 15
PREV_OFFSET = 16


@njit(cache=True)
def forward_hidden(Wg, bg, X):
    """Unroll the LSTM over X (T, Din); returns hidden states (T, H)."""
    T, Din = X.shape
    H = Wg.shape[0] // 4
    D = Din + H
    hs = np.zeros((T, H))
    h = np.zeros(H)
    c = np.zeros(H)
    xh = np.zeros(D)
    for t in range(T):
        for j in range(Din):
            xh[j] = X[t, j]
        for j in range(H):
            xh[Din + j] = h[j]
        for r in range(H):
            zi = bg[r]
            zf = bg[H + r]
            zg = bg[2 * H + r]
            zo = bg[3 * H + r]
            for col in range(D):
                v = xh[col]
                zi += Wg[r, col] * v
                zf += Wg[H + r, col] * v
                zg += Wg[2 * H + r, col] * v
                zo += Wg[3 * H + r, col] * v
            i_ = 1.0 / (1.0 + np.exp(-zi))
            f_ = 1.0 / (1.0 + np.exp(-zf))
            g_ = np.tanh(zg)
            o_ = 1.0 / (1.0 + np.exp(-zo))
            cn = f_ * c[r] + i_ * g_
            c[r] = cn
            hs[t, r] = o_ * np.tanh(cn)
        for j in range(H):
            h[j] = hs[t, j]
    return hs


@njit(cache=True)
def head_forward(Ws, bs, Wy, by, hs):
    """Sigmoid layer then softmax output distribution for every step."""
    T, H = hs.shape
    S = Ws.shape[0]
    O = Wy.shape[0]
    sig = np.zeros((T, S))
    probs = np.zeros((T, O))
    for t in range(T):
        for u in range(S):
            a = bs[u]
            for j in range(H):
                a += Ws[u, j] * hs[t, j]
            sig[t, u] = 1.0 / (1.0 + np.exp(-a))
        mx = -1.0e300
        for k in range(O):
            a = by[k]
            for u in range(S):
                a += Wy[k, u] * sig[t, u]
            probs[t, k] = a
            if a > mx:
                mx = a
        se = 0.0
        for k in range(O):
            probs[t, k] = np.exp(probs[t, k] - mx)
            se += probs[t, k]
        for k in range(O):
            probs[t, k] /= se
    return sig, probs


@njit(cache=True)
def bptt_ce(Wg, bg, Ws, bs, Wy, by, X, tgt,
            gWg, gbg, gWs, gbs, gWy, gby, update_lstm, update_head):
    """Cross-entropy on masked output steps; fills grads, returns (loss, all_correct).

    `tgt[t]` is the target symbol index or -1 on unmasked (reading) steps.
    Gradient arrays are zeroed on entry.  The loss is the mean over masked
    steps.
    """
    T, Din = X.shape
    H = Wg.shape[0] // 4
    S = Ws.shape[0]
    O = Wy.shape[0]
    D = Din + H

    gWg[:, :] = 0.0
    gbg[:] = 0.0
    gWs[:, :] = 0.0
    gbs[:] = 0.0
    gWy[:, :] = 0.0
    gby[:] = 0.0

    hs = np.zeros((T + 1, H))
    cs = np.zeros((T + 1, H))
    ig = np.zeros((T, H))
    fg = np.zeros((T, H))
    gg = np.zeros((T, H))
    og = np.zeros((T, H))
    tc = np.zeros((T, H))
    xh = np.zeros((T, D))
    sig = np.zeros((T, S))
    dlogits = np.zeros((T, O))

    n_mask = 0
    for t in range(T):
        if tgt[t] >= 0:
            n_mask += 1

    loss = 0.0
    correct = True
    for t in range(T):
        for j in range(Din):
            xh[t, j] = X[t, j]
        for j in range(H):
            xh[t, Din + j] = hs[t, j]
        for r in range(H):
            zi = bg[r]
            zf = bg[H + r]
            zg = bg[2 * H + r]
            zo = bg[3 * H + r]
            for col in range(D):
                v = xh[t, col]
                zi += Wg[r, col] * v
                zf += Wg[H + r, col] * v
                zg += Wg[2 * H + r, col] * v
                zo += Wg[3 * H + r, col] * v
            i_ = 1.0 / (1.0 + np.exp(-zi))
            f_ = 1.0 / (1.0 + np.exp(-zf))
            g_ = np.tanh(zg)
            o_ = 1.0 / (1.0 + np.exp(-zo))
            cn = f_ * cs[t, r] + i_ * g_
            th = np.tanh(cn)
            ig[t, r] = i_
            fg[t, r] = f_
            gg[t, r] = g_
            og[t, r] = o_
            cs[t + 1, r] = cn
            tc[t, r] = th
            hs[t + 1, r] = o_ * th
        if tgt[t] >= 0:
            for u in range(S):
                a = bs[u]
                for j in range(H):
                    a += Ws[u, j] * hs[t + 1, j]
                sig[t, u] = 1.0 / (1.0 + np.exp(-a))
            mx = -1.0e300
            for k in range(O):
                a = by[k]
                for u in range(S):
                    a += Wy[k, u] * sig[t, u]
                dlogits[t, k] = a
                if a > mx:
                    mx = a
            se = 0.0
            for k in range(O):
                dlogits[t, k] = np.exp(dlogits[t, k] - mx)
                se += dlogits[t, k]
            am = 0
            for k in range(O):
                dlogits[t, k] /= se
                if dlogits[t, k] > dlogits[t, am]:
                    am = k
            if am != tgt[t]:
                correct = False
            loss += -np.log(dlogits[t, tgt[t]])
            for k in range(O):
                d = dlogits[t, k]
                if k == tgt[t]:
                    d -= 1.0
                dlogits[t, k] = d / n_mask
    loss /= n_mask

    dh = np.zeros(H)
    dc = np.zeros(H)
    ds = np.zeros(S)
    dxh = np.zeros(D)
    for t in range(T - 1, -1, -1):
        if tgt[t] >= 0:
            for u in range(S):
                ds[u] = 0.0
            for k in range(O):
                d = dlogits[t, k]
                if update_head:
                    gby[k] += d
                for u in range(S):
                    if update_head:
                        gWy[k, u] += d * sig[t, u]
                    ds[u] += Wy[k, u] * d
            for u in range(S):
                dsp = ds[u] * sig[t, u] * (1.0 - sig[t, u])
                if update_head:
                    gbs[u] += dsp
                for j in range(H):
                    if update_head:
                        gWs[u, j] += dsp * hs[t + 1, j]
                    dh[j] += Ws[u, j] * dsp
        if update_lstm:
            for col in range(D):
                dxh[col] = 0.0
            for r in range(H):
                do = dh[r] * tc[t, r]
                dct = dc[r] + dh[r] * og[t, r] * (1.0 - tc[t, r] * tc[t, r])
                dzo = do * og[t, r] * (1.0 - og[t, r])
                dzf = dct * cs[t, r] * fg[t, r] * (1.0 - fg[t, r])
                dzi = dct * gg[t, r] * ig[t, r] * (1.0 - ig[t, r])
                dzg = dct * ig[t, r] * (1.0 - gg[t, r] * gg[t, r])
                dc[r] = dct * fg[t, r]
                gbg[r] += dzi
                gbg[H + r] += dzf
                gbg[2 * H + r] += dzg
                gbg[3 * H + r] += dzo
                for col in range(D):
                    v = xh[t, col]
                    gWg[r, col] += dzi * v
                    gWg[H + r, col] += dzf * v
                    gWg[2 * H + r, col] += dzg * v
                    gWg[3 * H + r, col] += dzo * v
                    dxh[col] += (Wg[r, col] * dzi + Wg[H + r, col] * dzf
                                 + Wg[2 * H + r, col] * dzg + Wg[3 * H + r, col] * dzo)
            for j in range(H):
                dh[j] = dxh[Din + j]
        else:
            for j in range(H):
                dh[j] = 0.0
    return loss, correct


@njit(cache=True)
def bptt_mse(Wg, bg, X, trace, gWg, gbg):
    """Mean-squared error between hidden states and the 29-dim trace targets.

    Returns the loss (mean over steps and units); fills LSTM grads only.
    """
    T, Din = X.shape
    H = Wg.shape[0] // 4
    D = Din + H

    gWg[:, :] = 0.0
    gbg[:] = 0.0

    hs = np.zeros((T + 1, H))
    cs = np.zeros((T + 1, H))
    ig = np.zeros((T, H))
    fg = np.zeros((T, H))
    gg = np.zeros((T, H))
    og = np.zeros((T, H))
    tc = np.zeros((T, H))
    xh = np.zeros((T, D))

    for t in range(T):
        for j in range(Din):
            xh[t, j] = X[t, j]
        for j in range(H):
            xh[t, Din + j] = hs[t, j]
        for r in range(H):
            zi = bg[r]
            zf = bg[H + r]
            zg = bg[2 * H + r]
            zo = bg[3 * H + r]
            for col in range(D):
                v = xh[t, col]
                zi += Wg[r, col] * v
                zf += Wg[H + r, col] * v
                zg += Wg[2 * H + r, col] * v
                zo += Wg[3 * H + r, col] * v
            i_ = 1.0 / (1.0 + np.exp(-zi))
            f_ = 1.0 / (1.0 + np.exp(-zf))
            g_ = np.tanh(zg)
            o_ = 1.0 / (1.0 + np.exp(-zo))
            cn = f_ * cs[t, r] + i_ * g_
            th = np.tanh(cn)
            ig[t, r] = i_
            fg[t, r] = f_
            gg[t, r] = g_
            og[t, r] = o_
            cs[t + 1, r] = cn
            tc[t, r] = th
            hs[t + 1, r] = o_ * th

    denom = float(T * H)
    loss = 0.0
    for t in range(T):
        for j in range(H):
            d = hs[t + 1, j] - trace[t, j]
            loss += d * d
    loss /= denom

    dh = np.zeros(H)
    dc = np.zeros(H)
    dxh = np.zeros(D)
    for t in range(T - 1, -1, -1):
        for j in range(H):
            dh[j] += 2.0 * (hs[t + 1, j] - trace[t, j]) / denom
        for col in range(D):
            dxh[col] = 0.0
        for r in range(H):
            do = dh[r] * tc[t, r]
            dct = dc[r] + dh[r] * og[t, r] * (1.0 - tc[t, r] * tc[t, r])
            dzo = do * og[t, r] * (1.0 - og[t, r])
            dzf = dct * cs[t, r] * fg[t, r] * (1.0 - fg[t, r])
            dzi = dct * gg[t, r] * ig[t, r] * (1.0 - ig[t, r])
            dzg = dct * ig[t, r] * (1.0 - gg[t, r] * gg[t, r])
            dc[r] = dct * fg[t, r]
            gbg[r] += dzi
            gbg[H + r] += dzf
            gbg[2 * H + r] += dzg
            gbg[3 * H + r] += dzo
            for col in range(D):
                v = xh[t, col]
                gWg[r, col] += dzi * v
                gWg[H + r, col] += dzf * v
                gWg[2 * H + r, col] += dzg * v
                gWg[3 * H + r, col] += dzo * v
                dxh[col] += (Wg[r, col] * dzi + Wg[H + r, col] * dzf
                             + Wg[2 * H + r, col] * dzg + Wg[3 * H + r, col] * dzo)
        for j in range(H):
            dh[j] = dxh[Din + j]
    return loss


@njit(cache=True)
def generate_free(Wg, bg, Ws, bs, Wy, by, X_read, cap):
    """Free-running generation: read the prompt, then feed back own argmaxes.

    Generation stops at the first emitted '.' or after `cap` output steps.
    Returns (hidden (R+cap, H), probs (R+cap, 3), emitted (cap,), n_emitted);
    only the first R + n_emitted rows of the step arrays are meaningful.
    """
    R, Din = X_read.shape
    H = Wg.shape[0] // 4
    S = Ws.shape[0]
    O = Wy.shape[0]
    D = Din + H

    hs = np.zeros((R + cap, H))
    probs = np.zeros((R + cap, O))
    emitted = np.full(cap, -1, dtype=np.int64)
    h = np.zeros(H)
    c = np.zeros(H)
    xh = np.zeros(D)
    x = np.zeros(Din)
    sig = np.zeros(S)

    n_emit = 0
    prev = -1
    for t in range(R + cap):
        if t < R:
            for j in range(Din):
                x[j] = X_read[t, j]
        else:
            for j in range(Din):
                x[j] = 0.0
            x[SPACE_COL] = 1.0
            if prev >= 0:
                x[PREV_OFFSET + prev] = 1.0
        for j in range(Din):
            xh[j] = x[j]
        for j in range(H):
            xh[Din + j] = h[j]
        for r in range(H):
            zi = bg[r]
            zf = bg[H + r]
            zg = bg[2 * H + r]
            zo = bg[3 * H + r]
            for col in range(D):
                v = xh[col]
                zi += Wg[r, col] * v
                zf += Wg[H + r, col] * v
                zg += Wg[2 * H + r, col] * v
                zo += Wg[3 * H + r, col] * v
            i_ = 1.0 / (1.0 + np.exp(-zi))
            f_ = 1.0 / (1.0 + np.exp(-zf))
            g_ = np.tanh(zg)
            o_ = 1.0 / (1.0 + np.exp(-zo))
            cn = f_ * c[r] + i_ * g_
            c[r] = cn
            h[r] = o_ * np.tanh(cn)
        for j in range(H):
            hs[t, j] = h[j]
        for u in range(S):
            a = bs[u]
            for j in range(H):
                a += Ws[u, j] * h[j]
            sig[u] = 1.0 / (1.0 + np.exp(-a))
        mx = -1.0e300
        for k in range(O):
            a = by[k]
            for u in range(S):
                a += Wy[k, u] * sig[u]
            probs[t, k] = a
            if a > mx:
                mx = a
        se = 0.0
        for k in range(O):
            probs[t, k] = np.exp(probs[t, k] - mx)
            se += probs[t, k]
        am = 0
        for k in range(O):
            probs[t, k] /= se
            if probs[t, k] > probs[t, am]:
                am = k
        if t >= R:
            emitted[n_emit] = am
            n_emit += 1
            prev = am
            if am == O - 1:  # '.' terminates the episode
                break
    return hs, probs, emitted, n_emit


@njit(cache=True)
def adam_step(p, g, m, v, t, lr, b1, b2, eps):
    """One bias-corrected Adam step in place; returns 0 on non-finite gradient."""
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    ok = 1
    for i in range(pf.size):
        gi = gf[i]
        if not np.isfinite(gi):
            ok = 0
            continue
        mf[i] = b1 * mf[i] + (1.0 - b1) * gi
        vf[i] = b2 * vf[i] + (1.0 - b2) * gi * gi
        pf[i] -= lr * (mf[i] / c1) / (np.sqrt(vf[i] / c2) + eps)
    return ok


@njit(cache=True)
def sgd_step(p, g, lr):
    """Plain SGD step in place; returns 0 on non-finite gradient."""
    pf = p.ravel()
    gf = g.ravel()
    ok = 1
    for i in range(pf.size):
        gi = gf[i]
        if not np.isfinite(gi):
            ok = 0
            continue
        pf[i] -= lr * gi
    return ok


def warmup() -> None:
    """Compile every kernel once (tiny shapes) so forked workers reuse the cache."""
    H, Din, S, O = 3, 20, 2, 3
    Wg = np.zeros((4 * H, Din + H))
    bg = np.zeros(4 * H)
    Ws = np.zeros((S, H))
    bs = np.zeros(S)
    Wy = np.zeros((O, S))
    by = np.zeros(O)
    X = np.zeros((4, Din))
    tgt = np.array([-1, -1, 0, 2], dtype=np.int64)
    trace = np.zeros((4, H))
    gWg = np.zeros_like(Wg)
    gbg = np.zeros_like(bg)
    gWs = np.zeros_like(Ws)
    gbs = np.zeros_like(bs)
    gWy = np.zeros_like(Wy)
    gby = np.zeros_like(by)
    forward_hidden(Wg, bg, X)
    head_forward(Ws, bs, Wy, by, np.zeros((4, H)))
    bptt_ce(Wg, bg, Ws, bs, Wy, by, X, tgt, gWg, gbg, gWs, gbs, gWy, gby, True, True)
    bptt_mse(Wg, bg, X, trace, gWg, gbg)
    generate_free(Wg, bg, Ws, bs, Wy, by, X, 4)
    adam_step(Wg, gWg, np.zeros_like(Wg), np.zeros_like(Wg), 1, 1e-3, 0.9, 0.999, 1e-8)
    sgd_step(Wg, gWg, 1e-3)
