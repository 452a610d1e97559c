"""Pure-Python reference kernels for the toy policy.

Mirrors ``_ckernels.pyx`` operation for operation (same summation order,
libm exp/log via :mod:`math`) so both backends agree bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

DIGIT, OP, QMARK, TERM, ANSWER, EOS, VMARK, WAIT, OTHER = range(9)

MOD = 10
NOPS = 3
REM_BUCKETS = 6
POS_BUCKETS = 4
MAX_OPS = 16


def layout(V: int) -> dict[str, int]:
    f_last = 1
    f_rem = f_last + V
    f_arith = f_rem + REM_BUCKETS * V
    f_ans = f_arith + MOD * NOPS * MOD
    f_wait = f_ans + MOD
    f_pos = f_wait + MOD
    return {"last": f_last, "rem": f_rem, "arith": f_arith, "ans": f_ans, "wait": f_wait, "pos": f_pos,
            "dim": f_pos + POS_BUCKETS}


def _pos_bucket(pos: int) -> int:
    if pos < 4:
        return 0
    if pos < 8:
        return 1
    if pos < 16:
        return 2
    return 3


class _State:
    __slots__ = ("k", "ops", "operands", "c", "last_value", "last_token", "pos", "answered", "after_q", "dval")

    def __init__(self, ctx, cls, dval, opc):
        n = len(ctx)
        self.dval = [int(x) for x in dval]
        self.k = 0
        self.ops = []
        self.operands = []
        d0 = int(dval[ctx[0]]) if n and cls[ctx[0]] == DIGIT else 0
        i = 1
        while i < n and cls[ctx[i]] != QMARK:
            if cls[ctx[i]] == OP and self.k < MAX_OPS:
                operand = ctx[i + 1] if i + 1 < n else -1
                self.ops.append(int(opc[ctx[i]]))
                self.operands.append(int(dval[operand]) if operand >= 0 and cls[operand] == DIGIT else 0)
                self.k += 1
                i += 2
            else:
                i += 1
        self.c = 0
        self.last_value = d0
        self.last_token = int(ctx[min(i, n - 1)]) if n else 0
        self.pos = 0
        self.answered = False
        self.after_q = i + 1  # first context index fed through step()

    def step(self, tok, cls):
        tc = cls[tok]
        if tc == DIGIT:
            if cls[self.last_token] == VMARK:
                self.c += 1
            self.last_value = self.dval[tok]
        elif tc == ANSWER:
            self.answered = True
        self.last_token = tok
        self.pos += 1

    def features(self, cls, lay, V):
        lt = self.last_token
        ltc = cls[lt]
        r = self.k - self.c
        rb = 5 if self.answered else (0 if r < 0 else (4 if r > 4 else r))
        feats = [0, lay["last"] + lt, lay["rem"] + rb * V + lt]
        if ltc == VMARK and r > 0:
            feats.append(lay["arith"] + (self.last_value * NOPS + self.ops[self.c]) * MOD + self.operands[self.c])
        elif ltc == ANSWER:
            feats.append(lay["ans"] + self.last_value)
        elif ltc == WAIT:
            feats.append(lay["wait"] + self.last_value)
        feats.append(lay["pos"] + _pos_bucket(self.pos))
        return feats


def _forward(theta, feats, temperature):
    """Return (p, logp_full, entropy) as Python lists/floats."""
    z = theta[feats[0]].copy()
    for f in feats[1:]:
        z += theta[f]
    s = (z / temperature).tolist()
    m = max(s)
    e = [math.exp(x - m) for x in s]
    Z = 0.0
    for x in e:
        Z += x
    logZ = math.log(Z)
    p = [x / Z for x in e]
    logp = [x - m - logZ for x in s]
    H = 0.0
    for v in range(len(p)):
        if e[v] > 0.0:
            H -= p[v] * logp[v]
    if H < 0.0:
        H = 0.0
    return p, logp, H


def _nucleus(p, top_p):
    """Return (ordered member list, mass); top_p >= 1 keeps everything with mass 1."""
    V = len(p)
    order = sorted(range(V), key=lambda v: (-p[v], v))
    if top_p >= 1.0:
        return order, 1.0
    acc = 0.0
    members = []
    for v in order:
        acc += p[v]
        members.append(v)
        if acc >= top_p:
            break
    return members, acc


def _init(ctx, cls, dval, opc):
    return _State(ctx, cls, dval, opc)


def sample_tokens(theta, ctx, cls, dval, opc, temperature, top_p, uniforms, eos_id):
    ctx = [int(x) for x in ctx]
    cls = [int(x) for x in cls]
    V = len(cls)
    lay = layout(V)
    st = _init(ctx, cls, dval, opc)
    for tok in ctx[st.after_q:]:
        st.step(tok, cls)
    toks, logps, ents = [], [], []
    for u in uniforms:
        p, logp, H = _forward(theta, st.features(cls, lay, V), temperature)
        members, mass = _nucleus(p, top_p)
        target = float(u) * mass
        acc = 0.0
        choice = members[-1]
        for v in members:
            acc += p[v]
            if target < acc:
                choice = v
                break
        lp = logp[choice] if top_p >= 1.0 else logp[choice] - math.log(mass)
        toks.append(choice)
        logps.append(lp)
        ents.append(H)
        st.step(choice, cls)
        if choice == eos_id:
            break
    return (np.asarray(toks, dtype=np.int64), np.asarray(logps, dtype=np.float64),
            np.asarray(ents, dtype=np.float64))


def score_tokens(theta, ctx, start, cls, dval, opc, temperature, top_p):
    ctx = [int(x) for x in ctx]
    cls = [int(x) for x in cls]
    V = len(cls)
    lay = layout(V)
    st = _init(ctx, cls, dval, opc)
    if start < st.after_q:
        raise ValueError("scoring must start after the question terminator")
    n = len(ctx) - start
    lpn = np.empty(n)
    lpf = np.empty(n)
    ent = np.empty(n)
    for t in range(st.after_q, len(ctx)):
        tok = ctx[t]
        if t >= start:
            p, logp, H = _forward(theta, st.features(cls, lay, V), temperature)
            j = t - start
            lpf[j] = logp[tok]
            ent[j] = H
            if top_p >= 1.0:
                lpn[j] = logp[tok]
            else:
                members, mass = _nucleus(p, top_p)
                lpn[j] = logp[tok] - math.log(mass) if tok in members else -math.inf
        st.step(tok, cls)
    return lpn, lpf, ent


def next_distribution(theta, ctx, cls, dval, opc, temperature):
    ctx = [int(x) for x in ctx]
    cls = [int(x) for x in cls]
    V = len(cls)
    lay = layout(V)
    st = _init(ctx, cls, dval, opc)
    for tok in ctx[st.after_q:]:
        st.step(tok, cls)
    p, _, H = _forward(theta, st.features(cls, lay, V), temperature)
    return np.asarray(p), H


def accumulate_grad(theta, ctx, start, cls, dval, opc, temperature, top_p, coef_nuc, coef_full, grad):
    """grad += sum_t coef_nuc[t] * dlogp_nucleus(t) + coef_full[t] * dlogp_full(t)."""
    ctx = [int(x) for x in ctx]
    cls = [int(x) for x in cls]
    V = len(cls)
    lay = layout(V)
    st = _init(ctx, cls, dval, opc)
    if start < st.after_q:
        raise ValueError("gradient must start after the question terminator")
    for t in range(st.after_q, len(ctx)):
        tok = ctx[t]
        if t >= start:
            j = t - start
            cn = float(coef_nuc[j])
            cf = float(coef_full[j])
            if cn != 0.0 or cf != 0.0:
                feats = st.features(cls, lay, V)
                p, _, _ = _forward(theta, feats, temperature)
                gn = cn / temperature
                gf = cf / temperature
                if cn != 0.0:
                    members, mass = _nucleus(p, top_p)
                    pn = [0.0] * V
                    for v in members:
                        pn[v] = p[v] / mass
                else:
                    pn = [0.0] * V
                g = [0.0] * V
                for v in range(V):
                    hot = 1.0 if v == tok else 0.0
                    g[v] = gn * (hot - pn[v]) + gf * (hot - p[v])
                garr = np.asarray(g)
                for f in feats:
                    grad[f] += garr
        st.step(tok, cls)
