"""Pure-Python tape replay, used when the compiled kernel is unavailable.

Value replay runs on a plain Python list (ndarray item access is slower);
tangent replay keeps rows as numpy vectors so wide seeds stay tolerable.
Operand registers are read before the output register is written, matching
the in-place reuse the builder's liveness pass allows.
"""

import math

from .tape import (OP_ADD, OP_ADDC, OP_COS, OP_DIV, OP_DIVC, OP_EXP, OP_LOG,
                   OP_MUL, OP_MULC, OP_NEG, OP_SIN, OP_SQRT, OP_SUB, OP_SUBC)


def replay_values(ops, aa, ab, cc, oo, regs):
    buf = regs.tolist()
    for i in range(len(ops)):
        k = ops[i]
        va = buf[aa[i]]
        if k == OP_ADD:
            r = va + buf[ab[i]]
        elif k == OP_SUB:
            r = va - buf[ab[i]]
        elif k == OP_MUL:
            r = va * buf[ab[i]]
        elif k == OP_DIV:
            r = va / buf[ab[i]]
        elif k == OP_NEG:
            r = -va
        elif k == OP_SQRT:
            r = math.sqrt(va) if va >= 0.0 else math.nan
        elif k == OP_EXP:
            try:
                r = math.exp(va)
            except OverflowError:
                r = math.inf
        elif k == OP_LOG:
            r = math.log(va) if va > 0.0 else math.nan
        elif k == OP_SIN:
            r = math.sin(va)
        elif k == OP_COS:
            r = math.cos(va)
        elif k == OP_ADDC:
            r = va + cc[i]
        elif k == OP_SUBC:
            r = cc[i] - va
        elif k == OP_MULC:
            r = va * cc[i]
        else:
            r = cc[i] / va
        buf[oo[i]] = r
    regs[:] = buf


def replay_adjoint(ops, aa, ab, cc, oo, regs, va, vb, vo, adj):
    """Forward value pass with operand spills, then one reverse sweep.

    Mirrors the compiled kernel: ``adj`` arrives seeded with output weights
    on the output registers and leaves with the weighted gradient in the
    input registers. Spilled operand values keep the reverse sweep correct
    under in-place register reuse; reading and zeroing the output adjoint
    before accumulating into operands handles output/operand aliasing.
    """
    buf = regs.tolist()
    m = len(ops)
    for i in range(m):
        k = ops[i]
        x = buf[aa[i]]
        va[i] = x
        if k == OP_ADD:
            y = buf[ab[i]]
            vb[i] = y
            r = x + y
        elif k == OP_SUB:
            y = buf[ab[i]]
            vb[i] = y
            r = x - y
        elif k == OP_MUL:
            y = buf[ab[i]]
            vb[i] = y
            r = x * y
        elif k == OP_DIV:
            y = buf[ab[i]]
            vb[i] = y
            r = x / y
        elif k == OP_NEG:
            r = -x
        elif k == OP_SQRT:
            r = math.sqrt(x) if x >= 0.0 else math.nan
        elif k == OP_EXP:
            try:
                r = math.exp(x)
            except OverflowError:
                r = math.inf
        elif k == OP_LOG:
            r = math.log(x) if x > 0.0 else math.nan
        elif k == OP_SIN:
            r = math.sin(x)
        elif k == OP_COS:
            r = math.cos(x)
        elif k == OP_ADDC:
            r = x + cc[i]
        elif k == OP_SUBC:
            r = cc[i] - x
        elif k == OP_MULC:
            r = x * cc[i]
        else:
            r = cc[i] / x
        vo[i] = r
        buf[oo[i]] = r
    regs[:] = buf

    acc = adj.tolist()
    for i in range(m - 1, -1, -1):
        o = oo[i]
        g = acc[o]
        if g == 0.0:
            continue
        acc[o] = 0.0
        k = ops[i]
        a = aa[i]
        if k == OP_ADD:
            acc[a] += g
            acc[ab[i]] += g
        elif k == OP_SUB:
            acc[a] += g
            acc[ab[i]] -= g
        elif k == OP_MUL:
            acc[a] += g * vb[i]
            acc[ab[i]] += g * va[i]
        elif k == OP_DIV:
            y = vb[i]
            acc[a] += g / y
            acc[ab[i]] -= g * vo[i] / y
        elif k == OP_NEG:
            acc[a] -= g
        elif k == OP_SQRT:
            acc[a] += 0.5 * g / vo[i] if vo[i] > 0.0 else math.nan
        elif k == OP_EXP:
            acc[a] += g * vo[i]
        elif k == OP_LOG:
            acc[a] += g / va[i]
        elif k == OP_SIN:
            acc[a] += g * math.cos(va[i])
        elif k == OP_COS:
            acc[a] -= g * math.sin(va[i])
        elif k == OP_ADDC:
            acc[a] += g
        elif k == OP_SUBC:
            acc[a] -= g
        elif k == OP_MULC:
            acc[a] += g * cc[i]
        else:
            acc[a] -= g * vo[i] / va[i]
    adj[:] = acc


def replay_tangents(ops, aa, ab, cc, oo, regs, tang):
    buf = regs.tolist()
    for i in range(len(ops)):
        k = ops[i]
        a = aa[i]
        o = oo[i]
        va = buf[a]
        if k == OP_ADD:
            b = ab[i]
            buf[o] = va + buf[b]
            tang[o] = tang[a] + tang[b]
            continue
        if k == OP_SUB:
            b = ab[i]
            buf[o] = va - buf[b]
            tang[o] = tang[a] - tang[b]
            continue
        if k == OP_MUL:
            b = ab[i]
            vb = buf[b]
            buf[o] = va * vb
            tang[o] = tang[a] * vb + va * tang[b]
            continue
        if k == OP_DIV:
            b = ab[i]
            vb = buf[b]
            q = va / vb
            buf[o] = q
            tang[o] = (tang[a] - q * tang[b]) / vb
            continue
        # remaining ops scale the single parent tangent by g
        if k == OP_NEG:
            buf[o] = -va
            g = -1.0
        elif k == OP_SQRT:
            s = math.sqrt(va) if va >= 0.0 else math.nan
            buf[o] = s
            g = 0.5 / s if s > 0.0 else math.nan
        elif k == OP_EXP:
            try:
                e = math.exp(va)
            except OverflowError:
                e = math.inf
            buf[o] = e
            g = e
        elif k == OP_LOG:
            buf[o] = math.log(va) if va > 0.0 else math.nan
            g = 1.0 / va
        elif k == OP_SIN:
            buf[o] = math.sin(va)
            g = math.cos(va)
        elif k == OP_COS:
            buf[o] = math.cos(va)
            g = -math.sin(va)
        elif k == OP_ADDC:
            buf[o] = va + cc[i]
            g = 1.0
        elif k == OP_SUBC:
            buf[o] = cc[i] - va
            g = -1.0
        elif k == OP_MULC:
            g = cc[i]
            buf[o] = va * g
        else:
            q = cc[i] / va
            buf[o] = q
            g = -q / va
        tang[o] = g * tang[a]
    regs[:] = buf
