# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the toy policy.

Operation order matches ``_pykernels`` exactly; do not build with
-ffast-math or the two backends drift apart.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()

DEF DIGIT = 0
DEF OP = 1
DEF QMARK = 2
DEF TERM = 3
DEF ANSWER = 4
DEF EOS = 5
DEF VMARK = 6
DEF WAIT = 7

DEF MOD = 10
DEF NOPS = 3
DEF REM_BUCKETS = 6
DEF POS_BUCKETS = 4
DEF MAX_OPS = 16
DEF MAX_V = 256
DEF MAX_FEATS = 8


cdef struct State:
    int k
    int ops[MAX_OPS]
    int operands[MAX_OPS]
    int c
    int last_value
    int last_token
    int pos
    int answered
    int after_q


cdef struct Layout:
    int last
    int rem
    int arith
    int ans
    int wait
    int pos
    int dim


cdef Layout make_layout(int V) nogil:
    cdef Layout lay
    lay.last = 1
    lay.rem = lay.last + V
    lay.arith = lay.rem + REM_BUCKETS * V
    lay.ans = lay.arith + MOD * NOPS * MOD
    lay.wait = lay.ans + MOD
    lay.pos = lay.wait + MOD
    lay.dim = lay.pos + POS_BUCKETS
    return lay


def feature_dim(int V):
    return make_layout(V).dim


cdef inline int pos_bucket(int pos) nogil:
    if pos < 4:
        return 0
    if pos < 8:
        return 1
    if pos < 16:
        return 2
    return 3


cdef void state_init(State* st, const long[:] ctx, const long[:] cls, const long[:] dval,
                     const long[:] opc) nogil:
    cdef int n = ctx.shape[0]
    cdef int i = 1
    cdef int operand
    st.k = 0
    st.c = 0
    st.last_value = <int>dval[ctx[0]] if (n > 0 and cls[ctx[0]] == DIGIT) else 0
    while i < n and cls[ctx[i]] != QMARK:
        if cls[ctx[i]] == OP and st.k < MAX_OPS:
            operand = <int>ctx[i + 1] if i + 1 < n else -1
            st.ops[st.k] = <int>opc[ctx[i]]
            if operand >= 0 and cls[operand] == DIGIT:
                st.operands[st.k] = <int>dval[operand]
            else:
                st.operands[st.k] = 0
            st.k += 1
            i += 2
        else:
            i += 1
    if n > 0:
        st.last_token = <int>ctx[i if i < n - 1 else n - 1]
    else:
        st.last_token = 0
    st.pos = 0
    st.answered = 0
    st.after_q = i + 1


cdef inline void state_step(State* st, int tok, const long[:] cls, const long[:] dval) nogil:
    cdef long tc = cls[tok]
    if tc == DIGIT:
        if cls[st.last_token] == VMARK:
            st.c += 1
        st.last_value = <int>dval[tok]
    elif tc == ANSWER:
        st.answered = 1
    st.last_token = tok
    st.pos += 1


cdef int state_features(State* st, int* feats, const long[:] cls, Layout* lay, int V) nogil:
    cdef int lt = st.last_token
    cdef long ltc = cls[lt]
    cdef int r = st.k - st.c
    cdef int rb
    cdef int nf = 0
    if st.answered:
        rb = 5
    elif r < 0:
        rb = 0
    elif r > 4:
        rb = 4
    else:
        rb = r
    feats[0] = 0
    feats[1] = lay.last + lt
    feats[2] = lay.rem + rb * V + lt
    nf = 3
    if ltc == VMARK and r > 0:
        feats[nf] = lay.arith + (st.last_value * NOPS + st.ops[st.c]) * MOD + st.operands[st.c]
        nf += 1
    elif ltc == ANSWER:
        feats[nf] = lay.ans + st.last_value
        nf += 1
    elif ltc == WAIT:
        feats[nf] = lay.wait + st.last_value
        nf += 1
    feats[nf] = lay.pos + pos_bucket(st.pos)
    nf += 1
    return nf


cdef double forward(const double[:, :] theta, int* feats, int nf, double temperature, int V,
                    double* p, double* logp) nogil:
    """Fill p and logp; return the entropy."""
    cdef double z[MAX_V]
    cdef double e[MAX_V]
    cdef int v, j, f
    cdef double m, Z, logZ, H
    f = feats[0]
    for v in range(V):
        z[v] = theta[f, v]
    for j in range(1, nf):
        f = feats[j]
        for v in range(V):
            z[v] = z[v] + theta[f, v]
    for v in range(V):
        z[v] = z[v] / temperature
    m = z[0]
    for v in range(1, V):
        if z[v] > m:
            m = z[v]
    for v in range(V):
        e[v] = exp(z[v] - m)
    Z = 0.0
    for v in range(V):
        Z += e[v]
    logZ = log(Z)
    for v in range(V):
        p[v] = e[v] / Z
    for v in range(V):
        logp[v] = z[v] - m - logZ
    H = 0.0
    for v in range(V):
        if e[v] > 0.0:
            H -= p[v] * logp[v]
    if H < 0.0:
        H = 0.0
    return H


cdef int nucleus(double* p, int V, double top_p, int* order, double* mass) nogil:
    """Sort indices by probability (ties: lower index first); return nucleus size."""
    cdef int i, j, a, b
    for i in range(V):
        order[i] = i
    for i in range(1, V):
        a = order[i]
        j = i - 1
        while j >= 0:
            b = order[j]
            if p[a] > p[b] or (p[a] == p[b] and a < b):
                order[j + 1] = b
                j -= 1
            else:
                break
        order[j + 1] = a
    if top_p >= 1.0:
        mass[0] = 1.0
        return V
    cdef double acc = 0.0
    cdef int count = 0
    for i in range(V):
        acc += p[order[i]]
        count += 1
        if acc >= top_p:
            break
    mass[0] = acc
    return count


def sample_tokens(const double[:, :] theta, const long[:] ctx, const long[:] cls, const long[:] dval,
                  const long[:] opc, double temperature, double top_p, const double[:] uniforms, long eos_id):
    cdef int V = cls.shape[0]
    cdef Layout lay = make_layout(V)
    cdef State st
    cdef int feats[MAX_FEATS]
    cdef int order[MAX_V]
    cdef double p[MAX_V]
    cdef double logp[MAX_V]
    cdef double H, mass, target, acc, lp
    cdef int nf, t, i, nmem, choice, n_out = 0
    cdef int max_len = uniforms.shape[0]
    if V > MAX_V:
        raise ValueError("vocabulary too large for compiled kernel")
    toks = np.empty(max_len, dtype=np.int64)
    logps = np.empty(max_len, dtype=np.float64)
    ents = np.empty(max_len, dtype=np.float64)
    cdef long[:] tv = toks
    cdef double[:] lv = logps
    cdef double[:] ev = ents
    with nogil:
        state_init(&st, ctx, cls, dval, opc)
        for i in range(st.after_q, ctx.shape[0]):
            state_step(&st, <int>ctx[i], cls, dval)
        for t in range(max_len):
            nf = state_features(&st, feats, cls, &lay, V)
            H = forward(theta, feats, nf, temperature, V, p, logp)
            nmem = nucleus(p, V, top_p, order, &mass)
            target = uniforms[t] * mass
            acc = 0.0
            choice = order[nmem - 1]
            for i in range(nmem):
                acc += p[order[i]]
                if target < acc:
                    choice = order[i]
                    break
            if top_p >= 1.0:
                lp = logp[choice]
            else:
                lp = logp[choice] - log(mass)
            tv[t] = choice
            lv[t] = lp
            ev[t] = H
            n_out = t + 1
            state_step(&st, choice, cls, dval)
            if choice == eos_id:
                break
    return toks[:n_out].copy(), logps[:n_out].copy(), ents[:n_out].copy()


def score_tokens(const double[:, :] theta, const long[:] ctx, long start, const long[:] cls,
                 const long[:] dval, const long[:] opc, double temperature, double top_p):
    cdef int V = cls.shape[0]
    cdef Layout lay = make_layout(V)
    cdef State st
    cdef int feats[MAX_FEATS]
    cdef int order[MAX_V]
    cdef double p[MAX_V]
    cdef double logp[MAX_V]
    cdef double H, mass
    cdef int nf, t, i, j, nmem, tok, inside
    cdef int n_ctx = ctx.shape[0]
    if V > MAX_V:
        raise ValueError("vocabulary too large for compiled kernel")
    state_init(&st, ctx, cls, dval, opc)
    if start < st.after_q:
        raise ValueError("scoring must start after the question terminator")
    n = n_ctx - start
    lpn = np.empty(n, dtype=np.float64)
    lpf = np.empty(n, dtype=np.float64)
    ent = np.empty(n, dtype=np.float64)
    cdef double[:] nv = lpn
    cdef double[:] fv = lpf
    cdef double[:] ev = ent
    with nogil:
        for t in range(st.after_q, n_ctx):
            tok = <int>ctx[t]
            if t >= start:
                nf = state_features(&st, feats, cls, &lay, V)
                H = forward(theta, feats, nf, temperature, V, p, logp)
                j = t - <int>start
                fv[j] = logp[tok]
                ev[j] = H
                if top_p >= 1.0:
                    nv[j] = logp[tok]
                else:
                    nmem = nucleus(p, V, top_p, order, &mass)
                    inside = 0
                    for i in range(nmem):
                        if order[i] == tok:
                            inside = 1
                            break
                    nv[j] = logp[tok] - log(mass) if inside else -INFINITY
            state_step(&st, tok, cls, dval)
    return lpn, lpf, ent


def next_distribution(const double[:, :] theta, const long[:] ctx, const long[:] cls, const long[:] dval,
                      const long[:] opc, double temperature):
    cdef int V = cls.shape[0]
    cdef Layout lay = make_layout(V)
    cdef State st
    cdef int feats[MAX_FEATS]
    cdef double p[MAX_V]
    cdef double logp[MAX_V]
    cdef int i, nf
    cdef double H
    if V > MAX_V:
        raise ValueError("vocabulary too large for compiled kernel")
    state_init(&st, ctx, cls, dval, opc)
    for i in range(st.after_q, ctx.shape[0]):
        state_step(&st, <int>ctx[i], cls, dval)
    nf = state_features(&st, feats, cls, &lay, V)
    H = forward(theta, feats, nf, temperature, V, p, logp)
    out = np.empty(V, dtype=np.float64)
    cdef double[:] ov = out
    for i in range(V):
        ov[i] = p[i]
    return out, H


def accumulate_grad(const double[:, :] theta, const long[:] ctx, long start, const long[:] cls,
                    const long[:] dval, const long[:] opc, double temperature, double top_p,
                    const double[:] coef_nuc, const double[:] coef_full, double[:, :] grad):
    cdef int V = cls.shape[0]
    cdef Layout lay = make_layout(V)
    cdef State st
    cdef int feats[MAX_FEATS]
    cdef int order[MAX_V]
    cdef double p[MAX_V]
    cdef double logp[MAX_V]
    cdef double pn[MAX_V]
    cdef double g[MAX_V]
    cdef double mass, cn, cf, gn, gf, hot
    cdef int nf, t, i, j, v, nmem, tok
    cdef int n_ctx = ctx.shape[0]
    if V > MAX_V:
        raise ValueError("vocabulary too large for compiled kernel")
    state_init(&st, ctx, cls, dval, opc)
    if start < st.after_q:
        raise ValueError("gradient must start after the question terminator")
    with nogil:
        for t in range(st.after_q, n_ctx):
            tok = <int>ctx[t]
            if t >= start:
                j = t - <int>start
                cn = coef_nuc[j]
                cf = coef_full[j]
                if cn != 0.0 or cf != 0.0:
                    nf = state_features(&st, feats, cls, &lay, V)
                    forward(theta, feats, nf, temperature, V, p, logp)
                    gn = cn / temperature
                    gf = cf / temperature
                    for v in range(V):
                        pn[v] = 0.0
                    if cn != 0.0:
                        nmem = nucleus(p, V, top_p, order, &mass)
                        for i in range(nmem):
                            pn[order[i]] = p[order[i]] / mass
                    for v in range(V):
                        hot = 1.0 if v == tok else 0.0
                        g[v] = gn * (hot - pn[v]) + gf * (hot - p[v])
                    for i in range(nf):
                        for v in range(V):
                            grad[feats[i], v] = grad[feats[i], v] + g[v]
            state_step(&st, tok, cls, dval)
