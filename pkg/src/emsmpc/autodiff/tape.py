"""Recorded computation graphs (tapes) with replayable forward passes.

A function written against :mod:`emsmpc.autodiff.scalars` is traced once by
evaluating it on :class:`Tracer` inputs; every scalar operation lands as one
entry in a flat tape. Replays then evaluate values (and, with seed vectors,
forward-mode tangent batches) without touching Python objects, either through
the compiled kernel ``_fasttape`` or the pure fallback ``_pytape``.

Constants are folded at build time (operations between plain floats never
reach the tape; additive/multiplicative identities simplify away). At
``finish`` the tape is cleaned up: entries whose value never reaches an
output are dropped, and remaining entries are assigned to a small register
file by liveness so tangent batches stay cache-resident. Inputs hold
registers ``0..n_inputs-1`` permanently.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

from .scalars import Dual

OP_ADD = 0   # r[a] + r[b]
OP_SUB = 1   # r[a] - r[b]
OP_MUL = 2   # r[a] * r[b]
OP_DIV = 3   # r[a] / r[b]
OP_NEG = 4
OP_SQRT = 5
OP_EXP = 6
OP_LOG = 7
OP_SIN = 8
OP_COS = 9
OP_ADDC = 10  # r[a] + c
OP_SUBC = 11  # c - r[a]
OP_MULC = 12  # r[a] * c
OP_DIVC = 13  # c / r[a]

_BINARY = (OP_ADD, OP_SUB, OP_MUL, OP_DIV)


def _load_backend():
    if not os.environ.get("EMSMPC_PURE_TAPE"):
        try:
            from . import _fasttape as backend
            return backend, True
        except ImportError:
            pass
    from . import _pytape as backend
    return backend, False


_BACKEND, COMPILED = _load_backend()


def backend_name() -> str:
    """Name of the replay backend selected at import: compiled or pure."""
    return "compiled" if COMPILED else "pure"


class Tracer:
    """Placeholder scalar whose arithmetic records tape entries."""

    __slots__ = ("tape", "slot")

    def __init__(self, tape: "TapeBuilder", slot: int):
        self.tape = tape
        self.slot = slot

    def __repr__(self):
        return f"Tracer(slot={self.slot})"

    # binary ops; Dual operands defer to Dual so tracers act as passive
    # constants inside a dual computation

    def __add__(self, other):
        if isinstance(other, Tracer):
            return self.tape._emit(OP_ADD, self.slot, other.slot)
        if isinstance(other, Dual):
            return NotImplemented
        c = float(other)
        if c == 0.0:
            return self
        return self.tape._emit(OP_ADDC, self.slot, c=c)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tracer):
            return self.tape._emit(OP_SUB, self.slot, other.slot)
        if isinstance(other, Dual):
            return NotImplemented
        c = float(other)
        if c == 0.0:
            return self
        return self.tape._emit(OP_ADDC, self.slot, c=-c)

    def __rsub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        c = float(other)
        if c == 0.0:
            return self.tape._emit(OP_NEG, self.slot)
        return self.tape._emit(OP_SUBC, self.slot, c=c)

    def __mul__(self, other):
        if isinstance(other, Tracer):
            return self.tape._emit(OP_MUL, self.slot, other.slot)
        if isinstance(other, Dual):
            return NotImplemented
        c = float(other)
        if c == 0.0:
            return 0.0
        if c == 1.0:
            return self
        if c == -1.0:
            return self.tape._emit(OP_NEG, self.slot)
        return self.tape._emit(OP_MULC, self.slot, c=c)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tracer):
            return self.tape._emit(OP_DIV, self.slot, other.slot)
        if isinstance(other, Dual):
            return NotImplemented
        return self.__mul__(1.0 / float(other))

    def __rtruediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        c = float(other)
        if c == 0.0:
            return 0.0
        return self.tape._emit(OP_DIVC, self.slot, c=c)

    def __neg__(self):
        return self.tape._emit(OP_NEG, self.slot)

    def __pow__(self, p):
        if isinstance(p, int):
            if p == 0:
                return 1.0
            if p == 1:
                return self
            if p < 0:
                return 1.0 / self.__pow__(-p)
            out = self
            for _ in range(p - 1):
                out = out * self
            return out
        return (self.log() * float(p)).exp()

    def sqrt(self):
        return self.tape._emit(OP_SQRT, self.slot)

    def exp(self):
        return self.tape._emit(OP_EXP, self.slot)

    def log(self):
        return self.tape._emit(OP_LOG, self.slot)

    def sin(self):
        return self.tape._emit(OP_SIN, self.slot)

    def cos(self):
        return self.tape._emit(OP_COS, self.slot)


class TapeBuilder:
    def __init__(self, n_inputs: int):
        self.n_inputs = n_inputs
        self._ops: list[int] = []
        self._aa: list[int] = []
        self._ab: list[int] = []
        self._cc: list[float] = []

    def inputs(self) -> list[Tracer]:
        return [Tracer(self, i) for i in range(self.n_inputs)]

    def _emit(self, op: int, a: int, b: int = 0, c: float = 0.0) -> Tracer:
        slot = self.n_inputs + len(self._ops)
        self._ops.append(op)
        self._aa.append(a)
        self._ab.append(b)
        self._cc.append(c)
        return Tracer(self, slot)

    def finish(self, outputs: Sequence) -> "Tape":
        n_in = self.n_inputs
        m = len(self._ops)
        out_slots = []
        out_consts = np.zeros(len(outputs))
        for i, o in enumerate(outputs):
            if isinstance(o, Tracer):
                out_slots.append(o.slot)
            else:  # output independent of the inputs
                out_slots.append(-1)
                out_consts[i] = float(o)

        # dead-code sweep: keep entries whose value can reach an output
        needed = np.zeros(n_in + m, dtype=bool)
        for s in out_slots:
            if s >= 0:
                needed[s] = True
        ops, aa, ab = self._ops, self._aa, self._ab
        for i in range(m - 1, -1, -1):
            if not needed[n_in + i]:
                continue
            needed[aa[i]] = True
            if ops[i] in _BINARY:
                needed[ab[i]] = True
        keep = [i for i in range(m) if needed[n_in + i]]

        # last use per kept slot (entry index in the kept ordering)
        n_kept = len(keep)
        new_index = np.full(n_in + m, -1, dtype=np.int64)
        new_index[:n_in] = np.arange(n_in)
        for j, i in enumerate(keep):
            new_index[n_in + i] = n_in + j
        last_use = np.full(n_in + n_kept, n_kept, dtype=np.int64)
        # outputs stay live forever (n_kept); everything else dies at its
        # final appearance as an operand
        is_output = np.zeros(n_in + n_kept, dtype=bool)
        for s in out_slots:
            if s >= 0:
                is_output[new_index[s]] = True
        for j in range(n_kept - 1, -1, -1):
            i = keep[j]
            for s in ([aa[i], ab[i]] if ops[i] in _BINARY else [aa[i]]):
                ns = new_index[s]
                if not is_output[ns] and last_use[ns] == n_kept:
                    last_use[ns] = j

        # linear-scan register assignment; inputs keep registers 0..n_in-1
        reg_of = np.empty(n_in + n_kept, dtype=np.intc)
        reg_of[:n_in] = np.arange(n_in, dtype=np.intc)
        free: list[int] = []
        n_regs = n_in
        r_ops = np.empty(n_kept, dtype=np.intc)
        r_aa = np.empty(n_kept, dtype=np.intc)
        r_ab = np.zeros(n_kept, dtype=np.intc)
        r_cc = np.empty(n_kept)
        for j in range(n_kept):
            i = keep[j]
            op = ops[i]
            sa = new_index[aa[i]]
            r_ops[j] = op
            r_aa[j] = reg_of[sa]
            operands = {sa}
            if op in _BINARY:
                sb = new_index[ab[i]]
                r_ab[j] = reg_of[sb]
                operands.add(sb)
            r_cc[j] = self._cc[i]
            for s in operands:  # registers dying here are reusable in place
                if s >= n_in and last_use[s] == j:
                    free.append(reg_of[s])
            if free:
                reg_of[n_in + j] = free.pop()
            else:
                reg_of[n_in + j] = n_regs
                n_regs += 1
        r_oo = reg_of[n_in:].copy() if n_kept else np.empty(0, dtype=np.intc)

        out_regs = np.empty(len(out_slots), dtype=np.intc)
        for i, s in enumerate(out_slots):
            out_regs[i] = reg_of[new_index[s]] if s >= 0 else -1

        return Tape(n_inputs=n_in, ops=r_ops, aa=r_aa, ab=r_ab, cc=r_cc,
                    oo=r_oo, n_regs=n_regs, out_regs=out_regs,
                    out_consts=out_consts)


class Tape:
    """Flat recorded computation; replays are allocation-light and reusable."""

    def __init__(self, n_inputs, ops, aa, ab, cc, oo, n_regs, out_regs,
                 out_consts):
        self.n_inputs = n_inputs
        self.ops = ops
        self.aa = aa
        self.ab = ab
        self.cc = cc
        self.oo = oo
        self.n_regs = n_regs
        self.out_regs = out_regs
        self.out_consts = out_consts
        self.n_entries = len(ops)
        self.n_out = len(out_regs)
        self._regs = np.empty(n_regs)
        self._tang = None
        self._spill = None
        self._adj = np.zeros(n_regs)

    def values(self, x) -> np.ndarray:
        """Replay values only. ``x`` must have length ``n_inputs``."""
        regs = self._regs
        regs[:self.n_inputs] = x
        _BACKEND.replay_values(self.ops, self.aa, self.ab, self.cc, self.oo,
                               regs)
        return self._gather(regs)

    def values_and_jacobian(self, x, seeds: np.ndarray | None = None):
        """Replay values plus tangents for ``seeds`` (default: identity).

        ``seeds`` is an ``(n_inputs, width)`` matrix whose columns are tangent
        directions. Returns ``(values, jac)`` with ``jac`` of shape
        ``(n_out, width)``.
        """
        if seeds is None:
            seeds = np.eye(self.n_inputs)
        width = seeds.shape[1]
        regs = self._regs
        regs[:self.n_inputs] = x
        if self._tang is None or self._tang.shape[1] != width:
            self._tang = np.zeros((self.n_regs, width))
        tang = self._tang
        tang[:self.n_inputs] = seeds
        _BACKEND.replay_tangents(self.ops, self.aa, self.ab, self.cc, self.oo,
                                 regs, tang)
        vals = self._gather(regs)
        jac = np.zeros((self.n_out, width))
        for i, r in enumerate(self.out_regs):
            if r >= 0:
                jac[i] = tang[r]
        return vals, jac

    def values_and_vjp(self, x, weights):
        """Replay values plus the weighted gradient ``weights @ jacobian``.

        One forward pass and one reverse sweep, so the cost is a small
        multiple of :meth:`values` no matter how many inputs or outputs the
        tape has. Returns ``(values, grad)`` with ``grad`` of length
        ``n_inputs``.
        """
        regs = self._regs
        regs[:self.n_inputs] = x
        if self._spill is None:
            self._spill = np.empty((3, max(self.n_entries, 1)))
        va, vb, vo = self._spill
        adj = self._adj
        adj[:] = 0.0
        w = np.asarray(weights, float)
        mask = self.out_regs >= 0
        np.add.at(adj, self.out_regs[mask], w[mask])
        _BACKEND.replay_adjoint(self.ops, self.aa, self.ab, self.cc, self.oo,
                                regs, va, vb, vo, adj)
        return self._gather(regs), adj[:self.n_inputs].copy()

    def _gather(self, regs):
        out = self.out_consts.copy()
        mask = self.out_regs >= 0
        out[mask] = regs[self.out_regs[mask]]
        return out


def trace(fn: Callable[[list[Tracer]], Sequence], n_inputs: int) -> Tape:
    """Record ``fn`` applied to ``n_inputs`` tracer scalars into a tape."""
    builder = TapeBuilder(n_inputs)
    outputs = fn(builder.inputs())
    return builder.finish(outputs)
