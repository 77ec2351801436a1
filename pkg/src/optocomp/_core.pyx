# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-sample inference loop and gain smoother.

Mirrors ``optocomp.model.model_step`` operation by operation. Parameters are
bound once from a WeightStore; state arrays are bound by name on every call so
the numpy arrays inside a StreamState stay the single source of truth.
"""

import numpy as np

from libc.math cimport exp, tanh, log1p, fabs, hypot, cos, sin, M_PI
from libc.string cimport memmove

cdef enum:
    MAXF = 256

cdef enum:
    ACT_LINEAR = 0
    ACT_GELU = 1
    ACT_SWISH = 2
    ACT_SOFTSIGN = 3

cdef enum:
    V_S6 = 0
    V_S4D = 1
    V_LSTM = 2
    V_ED = 3

cdef double GELU_C = 0.7978845608028654
cdef double GELU_K = 0.044715


cdef inline double c_sigmoid(double x) noexcept nogil:
    return 0.5 * (1.0 + tanh(0.5 * x))


cdef inline double c_softplus(double x) noexcept nogil:
    cdef double m = x if x > 0.0 else 0.0
    return m + log1p(exp(-fabs(x)))


cdef inline double c_gelu(double x) noexcept nogil:
    return 0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_K * x * x * x)))


cdef inline double c_softsign(double x) noexcept nogil:
    return x / (1.0 + fabs(x))


cdef inline double c_act(double x, int act) noexcept nogil:
    if act == ACT_GELU:
        return c_gelu(x)
    if act == ACT_SWISH:
        return x * c_sigmoid(x)
    if act == ACT_SOFTSIGN:
        return c_softsign(x)
    return x


cdef struct Dense:
    const double* W
    const double* b
    int n_in
    int n_out
    int act


cdef inline void dense(const Dense* d, const double* x, double* y) noexcept nogil:
    cdef int o, i
    cdef double acc
    for o in range(d.n_out):
        acc = 0.0
        for i in range(d.n_in):
            acc += x[i] * d.W[o * d.n_in + i]
        y[o] = c_act(acc + d.b[o], d.act)


cdef struct Block:
    int variant
    Dense in_proj
    Dense out_proj
    int H
    int N
    int k
    # s6
    const double* conv_k
    const double* conv_b
    double beta_conv
    double beta_gate
    const double* A
    const double* D
    const double* W_B
    const double* b_B
    const double* W_C
    const double* b_C
    const double* W_dt
    const double* b_dt
    # s4d (discretized)
    const double* a_re
    const double* a_im
    const double* bb_re
    const double* bb_im
    const double* C_re
    const double* C_im
    # lstm / ed
    const double* lW
    const double* lU
    const double* lb
    int n_in
    int has_encoder
    const double* enc_k
    const double* enc_b
    # state
    double* fifo
    double* h
    double* h_im
    double* c


cdef struct Cond:
    const double* spec_k
    const double* spec_b
    int n_bins
    int k_left
    int k_len
    Dense film
    Dense glu1
    Dense glu2
    const double* gW
    const double* gU
    const double* gb
    int g_in
    int H
    double* h


cdef void causal_conv(Block* b, const double* x, double* y) noexcept nogil:
    cdef int c, t, k = b.k, H = b.H
    cdef double acc
    for c in range(H):
        acc = 0.0
        for t in range(k - 1):
            acc += b.fifo[t * H + c] * b.conv_k[c * k + t]
        acc += x[c] * b.conv_k[c * k + k - 1]
        y[c] = acc + b.conv_b[c]
    if k > 1:
        memmove(b.fifo, b.fifo + H, (k - 2) * H * sizeof(double))
        for c in range(H):
            b.fifo[(k - 2) * H + c] = x[c]


cdef void s6(Block* b, const double* j, double* out) noexcept nogil:
    cdef int H = b.H, N = b.N, c, n, i
    cdef double Bn[MAXF]
    cdef double Cn[MAXF]
    cdef double dt[MAXF]
    cdef double acc, a, o
    for n in range(N):
        acc = 0.0
        for i in range(H):
            acc += j[i] * b.W_B[n * H + i]
        Bn[n] = acc + b.b_B[n]
        acc = 0.0
        for i in range(H):
            acc += j[i] * b.W_C[n * H + i]
        Cn[n] = acc + b.b_C[n]
    for c in range(H):
        acc = 0.0
        for i in range(H):
            acc += j[i] * b.W_dt[c * H + i]
        dt[c] = c_softplus(acc + b.b_dt[c])
    for c in range(H):
        o = 0.0
        for n in range(N):
            a = exp(b.A[c * N + n] * dt[c])
            b.h[c * N + n] = a * b.h[c * N + n] + (dt[c] * Bn[n]) * j[c]
            o += Cn[n] * b.h[c * N + n]
        out[c] = o + b.D[c] * j[c]


cdef void s4d(Block* b, const double* j, double* out) noexcept nogil:
    cdef int H = b.H, N = b.N, c, n, idx
    cdef double hr, hi, o
    for c in range(H):
        o = 0.0
        for n in range(N):
            idx = c * N + n
            hr = b.a_re[idx] * b.h[idx] - b.a_im[idx] * b.h_im[idx] + b.bb_re[idx] * j[c]
            hi = b.a_re[idx] * b.h_im[idx] + b.a_im[idx] * b.h[idx] + b.bb_im[idx] * j[c]
            b.h[idx] = hr
            b.h_im[idx] = hi
            o += b.C_re[idx] * hr - b.C_im[idx] * hi
        out[c] = o + b.D[c] * j[c]


cdef void lstm(const double* W, const double* U, const double* bias, int n_in, int H,
               const double* x, double* h, double* c) noexcept nogil:
    cdef double z[4 * MAXF]
    cdef double hp[MAXF]
    cdef int r, i
    cdef double acc, acc2, ig, fg, gg, og
    for i in range(H):
        hp[i] = h[i]
    for r in range(4 * H):
        acc = 0.0
        for i in range(n_in):
            acc += x[i] * W[r * n_in + i]
        acc2 = 0.0
        for i in range(H):
            acc2 += hp[i] * U[r * H + i]
        z[r] = (acc + acc2) + bias[r]
    for i in range(H):
        ig = c_sigmoid(z[i])
        fg = c_sigmoid(z[H + i])
        gg = tanh(z[2 * H + i])
        og = c_sigmoid(z[3 * H + i])
        c[i] = fg * c[i] + ig * gg
        h[i] = og * tanh(c[i])


cdef void gru(const double* W, const double* U, const double* bias, int n_in, int H,
              const double* x, double* h) noexcept nogil:
    cdef double zr[2 * MAXF]
    cdef double rh[MAXF]
    cdef double z, n, acc, acc2
    cdef int r, i
    for r in range(2 * H):
        acc = 0.0
        for i in range(n_in):
            acc += x[i] * W[r * n_in + i]
        acc2 = 0.0
        for i in range(H):
            acc2 += h[i] * U[r * H + i]
        zr[r] = (acc + acc2) + bias[r]
    for i in range(H):
        rh[i] = c_sigmoid(zr[H + i]) * h[i]
    for r in range(H):
        acc = 0.0
        for i in range(n_in):
            acc += x[i] * W[(2 * H + r) * n_in + i]
        acc2 = 0.0
        for i in range(H):
            acc2 += rh[i] * U[(2 * H + r) * H + i]
        n = tanh((acc + acc2) + bias[2 * H + r])
        z = c_sigmoid(zr[r])
        zr[r] = n + z * (h[r] - n)
    for i in range(H):
        h[i] = zr[i]


cdef void block_step(Block* b, const double* u, double* out) noexcept nogil:
    cdef double z[2 * MAXF]
    cdef double sc[MAXF]
    cdef double sw[MAXF]
    cdef double y[MAXF]
    cdef double e[2 * MAXF]
    cdef double hh[MAXF]
    cdef double cc[MAXF]
    cdef int i, t, H = b.H, k = b.k, o, n_w
    cdef double acc
    if b.variant == V_S6:
        dense(&b.in_proj, u, z)
        causal_conv(b, z, sc)
        for i in range(H):
            sw[i] = sc[i] * c_sigmoid(b.beta_conv * sc[i])
        s6(b, sw, y)
        for i in range(H):
            y[i] = y[i] * (z[H + i] * c_sigmoid(b.beta_gate * z[H + i]))
        dense(&b.out_proj, y, out)
    elif b.variant == V_S4D:
        dense(&b.in_proj, u, z)
        s4d(b, z, y)
        dense(&b.out_proj, y, out)
    elif b.variant == V_LSTM or (b.variant == V_ED and not b.has_encoder):
        lstm(b.lW, b.lU, b.lb, b.n_in, H, u, b.h, b.c)
        dense(&b.out_proj, b.h, out)
    else:
        # encoder: window is [fifo (k-1 frames), u], flattened time-major
        n_w = k * b.n_in
        for o in range(2 * H):
            acc = 0.0
            for t in range((k - 1) * b.n_in):
                acc += b.fifo[t] * b.enc_k[o * n_w + t]
            for i in range(b.n_in):
                acc += u[i] * b.enc_k[o * n_w + (k - 1) * b.n_in + i]
            e[o] = acc + b.enc_b[o]
        if k > 1:
            memmove(b.fifo, b.fifo + b.n_in, (k - 2) * b.n_in * sizeof(double))
            for i in range(b.n_in):
                b.fifo[(k - 2) * b.n_in + i] = u[i]
        for i in range(H):
            hh[i] = tanh(e[i])
            cc[i] = e[H + i]
        lstm(b.lW, b.lU, b.lb, b.n_in, H, u, hh, cc)
        dense(&b.out_proj, hh, out)


cdef void condition(Cond* p, const double* g_m, const double* co, int n_co,
                    const double* ti, int n_ti, const double* f, double* out) noexcept nogil:
    cdef double v[MAXF]
    cdef double ab[MAXF]
    cdef double kf[2]
    cdef double kg[2]
    cdef int i
    for i in range(n_co):
        v[i] = co[i]
    v[n_co] = f[0]
    v[n_co + 1] = f[1]
    dense(&p.film, v, ab)
    kf[0] = ab[0] * g_m[0] + ab[2]
    kf[1] = ab[1] * g_m[1] + ab[3]
    dense(&p.glu1, kf, ab)
    kg[0] = ab[0] * c_softsign(ab[2])
    kg[1] = ab[1] * c_softsign(ab[3])
    for i in range(n_ti):
        v[i] = ti[i]
    v[n_ti] = f[0]
    v[n_ti + 1] = f[1]
    gru(p.gW, p.gU, p.gb, p.g_in, p.H, v, p.h)
    kf[0] = p.h[0] * kg[0] + p.h[2]
    kf[1] = p.h[1] * kg[1] + p.h[3]
    dense(&p.glu2, kf, ab)
    out[0] = ab[0] * c_softsign(ab[2])
    out[1] = ab[1] * c_softsign(ab[3])


cdef class FFTMag:
    """Radix-2 FFT magnitude of a real buffer zero-padded to n points."""

    cdef int n, logn
    cdef double[::1] tw_re
    cdef double[::1] tw_im
    cdef int[::1] rev
    cdef double[::1] re
    cdef double[::1] im

    def __init__(self, int n):
        cdef int i, b, r
        self.n = n
        self.logn = 0
        while (1 << self.logn) < n:
            self.logn += 1
        self.tw_re = np.cos(-2.0 * np.pi * np.arange(n // 2) / n)
        self.tw_im = np.sin(-2.0 * np.pi * np.arange(n // 2) / n)
        self.rev = np.zeros(n, dtype=np.intc)
        for i in range(n):
            r = 0
            for b in range(self.logn):
                if i & (1 << b):
                    r |= 1 << (self.logn - 1 - b)
            self.rev[i] = r
        self.re = np.zeros(n)
        self.im = np.zeros(n)

    cdef void run(self, const double* x, int m, double* mag) noexcept nogil:
        cdef int n = self.n, i, s, half, step, start, kk
        cdef double wr, wi, tr, ti, ur, ui
        cdef double* re = &self.re[0]
        cdef double* im = &self.im[0]
        for i in range(n):
            re[i] = 0.0
            im[i] = 0.0
        for i in range(m):
            re[self.rev[i]] = x[i]
        half = 1
        while half < n:
            step = n // (2 * half)
            start = 0
            while start < n:
                for kk in range(half):
                    wr = self.tw_re[kk * step]
                    wi = self.tw_im[kk * step]
                    tr = wr * re[start + kk + half] - wi * im[start + kk + half]
                    ti = wr * im[start + kk + half] + wi * re[start + kk + half]
                    ur = re[start + kk]
                    ui = im[start + kk]
                    re[start + kk] = ur + tr
                    im[start + kk] = ui + ti
                    re[start + kk + half] = ur - tr
                    im[start + kk + half] = ui - ti
                start += 2 * half
            half *= 2
        for i in range(n // 2 + 1):
            mag[i] = hypot(re[i], im[i])


def fft_magnitude(x, int n):
    """Compiled FFT magnitude, exposed for testing against a DFT oracle."""
    cdef FFTMag f = FFTMag(n)
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    out = np.zeros(n // 2 + 1)
    cdef double[::1] ov = out
    f.run(&xv[0], xv.shape[0], &ov[0])
    return out


_ACTS = {"linear": ACT_LINEAR, "gelu": ACT_GELU, "swish": ACT_SWISH, "softsign": ACT_SOFTSIGN}
_VARIANTS = {"s6": V_S6, "s4d": V_S4D, "lstm": V_LSTM, "ed": V_ED}


cdef class CompiledModel:
    cdef list keep
    cdef Dense in_fc
    cdef Dense out_fc
    cdef Block b1
    cdef Block b2
    cdef Cond cond
    cdef FFTMag fft
    cdef int L
    cdef int n_bins
    cdef double[::1] mag
    cdef double[::1] dummy

    def __init__(self, dict tensors, dict spec, dict discs):
        """``spec`` carries static layout (variant, dims, activations); ``discs``
        holds precomputed S4D discretizations per block prefix."""
        self.keep = []
        self.L = spec["buffer_len"]
        self.fft = FFTMag(spec["fft_size"])
        self.n_bins = spec["fft_size"] // 2 + 1
        self.mag = np.zeros(self.n_bins)
        self.dummy = np.zeros(1)
        self._dense(&self.in_fc, tensors, "in_fc", "linear")
        self._dense(&self.out_fc, tensors, "out_fc", "linear")
        self._block(&self.b1, tensors, spec, discs, "block1")
        self._block(&self.b2, tensors, spec, discs, "block2")
        self._cond(tensors, spec)

    cdef const double* _ptr(self, arr) except NULL:
        cdef const double[::1] mv = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1)
        self.keep.append(mv)
        if mv.shape[0] == 0:
            return &self.dummy[0]
        return &mv[0]

    cdef int _dense(self, Dense* d, dict t, str name, str act) except -1:
        W = t[name + ".W"]
        d.W = self._ptr(W)
        d.b = self._ptr(t[name + ".b"])
        d.n_out = W.shape[0]
        d.n_in = W.shape[1]
        d.act = _ACTS[act]
        return 0

    cdef int _block(self, Block* b, dict t, dict spec, dict discs, str p) except -1:
        variant = spec[p]
        b.variant = _VARIANTS[variant]
        b.has_encoder = 0
        if variant == "s6":
            self._dense(&b.in_proj, t, p + ".in_proj", "linear")
            self._dense(&b.out_proj, t, p + ".out_proj", "gelu")
            b.H, b.k = t[p + ".conv.kernel"].shape
            b.N = t[p + ".s6.a_log"].shape[1]
            b.conv_k = self._ptr(t[p + ".conv.kernel"])
            b.conv_b = self._ptr(t[p + ".conv.bias"])
            b.beta_conv = float(t[p + ".beta_conv"][0])
            b.beta_gate = float(t[p + ".beta_gate"][0])
            b.A = self._ptr(-np.exp(t[p + ".s6.a_log"]))
            b.D = self._ptr(t[p + ".s6.D"])
            b.W_B = self._ptr(t[p + ".s6.W_B"])
            b.b_B = self._ptr(t[p + ".s6.b_B"])
            b.W_C = self._ptr(t[p + ".s6.W_C"])
            b.b_C = self._ptr(t[p + ".s6.b_C"])
            b.W_dt = self._ptr(t[p + ".s6.W_dt"])
            b.b_dt = self._ptr(t[p + ".s6.b_dt"])
        elif variant == "s4d":
            self._dense(&b.in_proj, t, p + ".in_proj", "linear")
            self._dense(&b.out_proj, t, p + ".out_proj", "gelu")
            b.H, b.N = t[p + ".s4d.C_re"].shape
            a_re, a_im, bb_re, bb_im = discs[p]
            b.a_re = self._ptr(a_re)
            b.a_im = self._ptr(a_im)
            b.bb_re = self._ptr(bb_re)
            b.bb_im = self._ptr(bb_im)
            b.C_re = self._ptr(t[p + ".s4d.C_re"])
            b.C_im = self._ptr(t[p + ".s4d.C_im"])
            b.D = self._ptr(t[p + ".s4d.D"])
        else:
            self._dense(&b.out_proj, t, p + ".out_proj", "linear")
            U = t[p + ".lstm.U"]
            W = t[p + ".lstm.W"]
            b.H = U.shape[1]
            b.n_in = W.shape[1]
            b.lW = self._ptr(W)
            b.lU = self._ptr(U)
            b.lb = self._ptr(t[p + ".lstm.b"])
            if (p + ".encoder.kernel") in t:
                b.has_encoder = 1
                b.enc_k = self._ptr(t[p + ".encoder.kernel"])
                b.enc_b = self._ptr(t[p + ".encoder.bias"])
                b.k = t[p + ".encoder.kernel"].shape[1] // b.n_in
        if b.H > MAXF or b.N > MAXF:
            raise ValueError("layer too wide for the compiled core")
        return 0

    cdef int _cond(self, dict t, dict spec) except -1:
        cdef Cond* c = &self.cond
        K = t["cond.spec_kernel"]
        c.spec_k = self._ptr(K)
        c.spec_b = self._ptr(t["cond.spec_bias"])
        c.k_len = K.shape[1]
        c.n_bins = self.n_bins
        c.k_left = (c.k_len - self.n_bins) // 2
        self._dense(&c.film, t, "cond.film", "linear")
        self._dense(&c.glu1, t, "cond.glu1", "linear")
        self._dense(&c.glu2, t, "cond.glu2", "linear")
        c.gW = self._ptr(t["cond.gru.W"])
        c.gU = self._ptr(t["cond.gru.U"])
        c.gb = self._ptr(t["cond.gru.b"])
        c.g_in = t["cond.gru.W"].shape[1]
        c.H = t["cond.gru.U"].shape[1]
        return 0

    cdef int _bind_block(self, Block* b, dict s, str p) except -1:
        cdef double[::1] mv
        b.fifo = NULL
        b.h = NULL
        b.h_im = NULL
        b.c = NULL
        key = "core." + p
        if (key + ".conv.fifo") in s:
            mv = s[key + ".conv.fifo"].reshape(-1)
            b.fifo = &mv[0] if mv.shape[0] > 0 else NULL
        if (key + ".s6.h") in s:
            mv = s[key + ".s6.h"].reshape(-1)
            b.h = &mv[0]
        if (key + ".s4d.h_re") in s:
            mv = s[key + ".s4d.h_re"].reshape(-1)
            b.h = &mv[0]
            mv = s[key + ".s4d.h_im"].reshape(-1)
            b.h_im = &mv[0]
        if (key + ".lstm.h") in s:
            mv = s[key + ".lstm.h"].reshape(-1)
            b.h = &mv[0]
            mv = s[key + ".lstm.c"].reshape(-1)
            b.c = &mv[0]
        return 0

    def run(self, dict state, const double[::1] x, double[::1] y, const double[::1] co, const double[::1] ti):
        """Process ``x`` into ``y`` in place, advancing the bound state arrays."""
        cdef double[::1] buf = state["buffer"]
        cdef double[::1] gmv = state["g"]
        cdef double[::1] gh = state["core.gru.h"].reshape(-1)
        cdef int n, i, kk, L = self.L, T = x.shape[0]
        cdef int n_co = co.shape[0], n_ti = ti.shape[0]
        cdef const double* cop = &co[0] if n_co > 0 else &self.dummy[0]
        cdef const double* tip = &ti[0] if n_ti > 0 else &self.dummy[0]
        cdef double u[2]
        cdef double v[2]
        cdef double f[2]
        cdef double g = gmv[0], acc
        cdef double* mag = &self.mag[0]
        cdef Cond* c = &self.cond
        self._bind_block(&self.b1, state, "block1")
        self._bind_block(&self.b2, state, "block2")
        c.h = &gh[0]
        with nogil:
            for n in range(T):
                memmove(&buf[0], &buf[1], (L - 1) * sizeof(double))
                buf[L - 1] = x[n]
                dense(&self.in_fc, &buf[0], u)
                block_step(&self.b1, u, v)
                self.fft.run(&buf[0], L, mag)
                for i in range(2):
                    acc = 0.0
                    for kk in range(c.n_bins):
                        acc += mag[kk] * c.spec_k[i * c.k_len + c.k_left + kk]
                    f[i] = acc + c.spec_b[i]
                condition(c, v, cop, n_co, tip, n_ti, f, u)
                block_step(&self.b2, u, v)
                dense(&self.out_fc, v, &g)
                y[n] = g * x[n]
        gmv[0] = g
        return 0


def smooth_gain(const double[::1] target, double a_att, double a_rel, double g0=1.0):
    """One-pole attack/release smoothing of a linear gain curve.

    Attack coefficient applies while the target is below the current gain
    (more reduction), release otherwise.
    """
    cdef int n, T = target.shape[0]
    out = np.empty(T)
    cdef double[::1] o = out
    cdef double g = g0, a
    with nogil:
        for n in range(T):
            a = a_att if target[n] < g else a_rel
            g = target[n] + a * (g - target[n])
            o[n] = g
    return out
