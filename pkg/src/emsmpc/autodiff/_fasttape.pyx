# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled tape replay. Opcode values mirror emsmpc.autodiff.tape.

Entries read operand registers before writing their output register, so the
in-place register reuse produced by the builder's liveness pass is safe.
"""

from libc.math cimport sqrt, exp, log, sin, cos, NAN

DEF OP_ADD = 0
DEF OP_SUB = 1
DEF OP_MUL = 2
DEF OP_DIV = 3
DEF OP_NEG = 4
DEF OP_SQRT = 5
DEF OP_EXP = 6
DEF OP_LOG = 7
DEF OP_SIN = 8
DEF OP_COS = 9
DEF OP_ADDC = 10
DEF OP_SUBC = 11
DEF OP_MULC = 12
DEF OP_DIVC = 13


def replay_values(const int[:] ops, const int[:] aa, const int[:] ab,
                  const double[:] cc, const int[:] oo, double[:] regs):
    cdef Py_ssize_t i, m = ops.shape[0]
    cdef int k
    cdef double va, r
    for i in range(m):
        k = ops[i]
        va = regs[aa[i]]
        if k == OP_ADD:
            r = va + regs[ab[i]]
        elif k == OP_SUB:
            r = va - regs[ab[i]]
        elif k == OP_MUL:
            r = va * regs[ab[i]]
        elif k == OP_DIV:
            r = va / regs[ab[i]]
        elif k == OP_NEG:
            r = -va
        elif k == OP_SQRT:
            r = sqrt(va) if va >= 0.0 else NAN
        elif k == OP_EXP:
            r = exp(va)
        elif k == OP_LOG:
            r = log(va) if va > 0.0 else NAN
        elif k == OP_SIN:
            r = sin(va)
        elif k == OP_COS:
            r = cos(va)
        elif k == OP_ADDC:
            r = va + cc[i]
        elif k == OP_SUBC:
            r = cc[i] - va
        elif k == OP_MULC:
            r = va * cc[i]
        else:  # OP_DIVC
            r = cc[i] / va
        regs[oo[i]] = r


def replay_adjoint(const int[:] ops, const int[:] aa, const int[:] ab,
                   const double[:] cc, const int[:] oo, double[:] regs,
                   double[:] va, double[:] vb, double[:] vo, double[:] adj):
    """Forward value pass with operand spills, then one reverse sweep.

    ``adj`` arrives seeded with the output weights (scattered onto the output
    registers) and leaves holding the weighted gradient in the input
    registers. Spilling the operand and output values per entry keeps the
    reverse sweep correct under the builder's in-place register reuse; the
    read-then-zero order on the output adjoint does the same for entries
    whose output register aliases an operand.
    """
    cdef Py_ssize_t i, m = ops.shape[0]
    cdef int k, a, o
    cdef double x, y, r, g
    for i in range(m):
        k = ops[i]
        x = regs[aa[i]]
        va[i] = x
        if k == OP_ADD:
            y = regs[ab[i]]
            vb[i] = y
            r = x + y
        elif k == OP_SUB:
            y = regs[ab[i]]
            vb[i] = y
            r = x - y
        elif k == OP_MUL:
            y = regs[ab[i]]
            vb[i] = y
            r = x * y
        elif k == OP_DIV:
            y = regs[ab[i]]
            vb[i] = y
            r = x / y
        elif k == OP_NEG:
            r = -x
        elif k == OP_SQRT:
            r = sqrt(x) if x >= 0.0 else NAN
        elif k == OP_EXP:
            r = exp(x)
        elif k == OP_LOG:
            r = log(x) if x > 0.0 else NAN
        elif k == OP_SIN:
            r = sin(x)
        elif k == OP_COS:
            r = cos(x)
        elif k == OP_ADDC:
            r = x + cc[i]
        elif k == OP_SUBC:
            r = cc[i] - x
        elif k == OP_MULC:
            r = x * cc[i]
        else:  # OP_DIVC
            r = cc[i] / x
        vo[i] = r
        regs[oo[i]] = r

    for i in range(m - 1, -1, -1):
        o = oo[i]
        g = adj[o]
        if g == 0.0:
            continue
        adj[o] = 0.0
        k = ops[i]
        a = aa[i]
        if k == OP_ADD:
            adj[a] += g
            adj[ab[i]] += g
        elif k == OP_SUB:
            adj[a] += g
            adj[ab[i]] -= g
        elif k == OP_MUL:
            adj[a] += g * vb[i]
            adj[ab[i]] += g * va[i]
        elif k == OP_DIV:
            y = vb[i]
            adj[a] += g / y
            adj[ab[i]] -= g * vo[i] / y
        elif k == OP_NEG:
            adj[a] -= g
        elif k == OP_SQRT:
            adj[a] += 0.5 * g / vo[i] if vo[i] > 0.0 else NAN
        elif k == OP_EXP:
            adj[a] += g * vo[i]
        elif k == OP_LOG:
            adj[a] += g / va[i]
        elif k == OP_SIN:
            adj[a] += g * cos(va[i])
        elif k == OP_COS:
            adj[a] -= g * sin(va[i])
        elif k == OP_ADDC:
            adj[a] += g
        elif k == OP_SUBC:
            adj[a] -= g
        elif k == OP_MULC:
            adj[a] += g * cc[i]
        else:  # OP_DIVC
            adj[a] -= g * vo[i] / va[i]


def replay_tangents(const int[:] ops, const int[:] aa, const int[:] ab,
                    const double[:] cc, const int[:] oo, double[:] regs,
                    double[:, ::1] tang):
    cdef Py_ssize_t i, j, m = ops.shape[0]
    cdef Py_ssize_t w = tang.shape[1]
    cdef int k, a, b, o
    cdef double va, vb, q, g, s
    for i in range(m):
        k = ops[i]
        a = aa[i]
        o = oo[i]
        va = regs[a]
        if k == OP_ADD:
            b = ab[i]
            regs[o] = va + regs[b]
            for j in range(w):
                tang[o, j] = tang[a, j] + tang[b, j]
            continue
        if k == OP_SUB:
            b = ab[i]
            regs[o] = va - regs[b]
            for j in range(w):
                tang[o, j] = tang[a, j] - tang[b, j]
            continue
        if k == OP_MUL:
            b = ab[i]
            vb = regs[b]
            regs[o] = va * vb
            for j in range(w):
                tang[o, j] = tang[a, j] * vb + va * tang[b, j]
            continue
        if k == OP_DIV:
            b = ab[i]
            vb = regs[b]
            q = va / vb
            regs[o] = q
            for j in range(w):
                tang[o, j] = (tang[a, j] - q * tang[b, j]) / vb
            continue
        # single-parent chain rule: tangent scaled by g
        if k == OP_NEG:
            regs[o] = -va
            g = -1.0
        elif k == OP_SQRT:
            s = sqrt(va) if va >= 0.0 else NAN
            regs[o] = s
            g = 0.5 / s if s > 0.0 else NAN
        elif k == OP_EXP:
            s = exp(va)
            regs[o] = s
            g = s
        elif k == OP_LOG:
            regs[o] = log(va) if va > 0.0 else NAN
            g = 1.0 / va
        elif k == OP_SIN:
            regs[o] = sin(va)
            g = cos(va)
        elif k == OP_COS:
            regs[o] = cos(va)
            g = -sin(va)
        elif k == OP_ADDC:
            regs[o] = va + cc[i]
            g = 1.0
        elif k == OP_SUBC:
            regs[o] = cc[i] - va
            g = -1.0
        elif k == OP_MULC:
            g = cc[i]
            regs[o] = va * g
        else:  # OP_DIVC
            q = cc[i] / va
            regs[o] = q
            g = -q / va
        for j in range(w):
            tang[o, j] = g * tang[a, j]
