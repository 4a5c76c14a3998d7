"""Forward-mode dual scalars and the math dispatch used across the package.

Numeric code in this package is written against the module-level functions
``sqrt``, ``exp``, ``log``, ``sin``, ``cos`` instead of ``math.*`` so the same
expression evaluates on plain floats, on :class:`Dual` scalars (derivatives)
and on tape tracers (recorded computation graphs). Dual components may
themselves be tracers; that nesting is what evaluates dynamics Jacobians
inside a traced rollout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_NUMBER = (int, float)


class DomainError(ValueError):
    """A math primitive was evaluated where it is not differentiable."""


class Dual:
    """Scalar carrying a fixed-width tangent vector.

    Arithmetic follows the usual forward-mode rules. Operands that are not
    ``Dual`` (floats, ints, tape tracers) are treated as passive constants
    with zero tangent.
    """

    __slots__ = ("value", "tangent")

    def __init__(self, value, tangent):
        self.value = value
        self.tangent = tuple(tangent)

    @property
    def width(self) -> int:
        return len(self.tangent)

    def __repr__(self):
        return f"Dual({self.value!r}, {self.tangent!r})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value,
                        tuple(a + b for a, b in zip(self.tangent, other.tangent)))
        return Dual(self.value + other, self.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value,
                        tuple(a - b for a, b in zip(self.tangent, other.tangent)))
        return Dual(self.value - other, self.tangent)

    def __rsub__(self, other):
        return Dual(other - self.value, tuple(-a for a in self.tangent))

    def __mul__(self, other):
        if isinstance(other, Dual):
            va, vb = self.value, other.value
            return Dual(va * vb,
                        tuple(a * vb + va * b
                              for a, b in zip(self.tangent, other.tangent)))
        return Dual(self.value * other, tuple(a * other for a in self.tangent))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            q = self.value / other.value
            vb = other.value
            return Dual(q, tuple((a - q * b) / vb
                                 for a, b in zip(self.tangent, other.tangent)))
        return Dual(self.value / other, tuple(a / other for a in self.tangent))

    def __rtruediv__(self, other):
        q = other / self.value
        s = -q / self.value
        return Dual(q, tuple(s * a for a in self.tangent))

    def __neg__(self):
        return Dual(-self.value, tuple(-a for a in self.tangent))

    def __pow__(self, p):
        if isinstance(p, int):
            if p == 0:
                return Dual(1.0, tuple(0.0 * a for a in self.tangent))
            if p == 1:
                return self
            if p < 0:
                return 1.0 / self.__pow__(-p)
            out = self
            for _ in range(p - 1):
                out = out * self
            return out
        return exp(p * log(self))

    # comparisons act on values; only meaningful off-tape ------------------

    def _other_value(self, other):
        return other.value if isinstance(other, Dual) else other

    def __lt__(self, other):
        return self.value < self._other_value(other)

    def __le__(self, other):
        return self.value <= self._other_value(other)

    def __gt__(self, other):
        return self.value > self._other_value(other)

    def __ge__(self, other):
        return self.value >= self._other_value(other)

    # elementary functions --------------------------------------------------

    def sqrt(self):
        if isinstance(self.value, _NUMBER) and self.value <= 0.0:
            raise DomainError(f"sqrt not differentiable at {self.value}")
        s = sqrt(self.value)
        g = 0.5 / s
        return Dual(s, tuple(g * a for a in self.tangent))

    def exp(self):
        e = exp(self.value)
        return Dual(e, tuple(e * a for a in self.tangent))

    def log(self):
        if isinstance(self.value, _NUMBER) and self.value <= 0.0:
            raise DomainError(f"log undefined at {self.value}")
        g = 1.0 / self.value
        return Dual(log(self.value), tuple(g * a for a in self.tangent))

    def sin(self):
        c = cos(self.value)
        return Dual(sin(self.value), tuple(c * a for a in self.tangent))

    def cos(self):
        s = -1.0 * sin(self.value)
        return Dual(cos(self.value), tuple(s * a for a in self.tangent))


def sqrt(x):
    if isinstance(x, _NUMBER):
        if x < 0.0:
            raise DomainError(f"sqrt of negative value {x}")
        return math.sqrt(x)
    return x.sqrt()


def exp(x):
    if isinstance(x, _NUMBER):
        return math.exp(x)
    return x.exp()


def log(x):
    if isinstance(x, _NUMBER):
        if x <= 0.0:
            raise DomainError(f"log of non-positive value {x}")
        return math.log(x)
    return x.log()


def sin(x):
    if isinstance(x, _NUMBER):
        return math.sin(x)
    return x.sin()


def cos(x):
    if isinstance(x, _NUMBER):
        return math.cos(x)
    return x.cos()


@dataclass(frozen=True)
class DifferentiableFn:
    """A vector function with declared input/output dimensions.

    ``evaluator`` maps a sequence of ``arity`` scalars to a sequence of
    ``codomain`` scalars and must be written against this module's math
    functions so it accepts floats, duals and tracers alike.
    """

    arity: int
    codomain: int
    evaluator: Callable[[Sequence], Sequence]

    def __post_init__(self):
        if self.arity < 1 or self.codomain < 1:
            raise ValueError("arity and codomain must be positive")

    def __call__(self, xs):
        return self.evaluator(xs)


def jacobian(fn: DifferentiableFn, x, batch_width: int = 16) -> np.ndarray:
    """Dense Jacobian of ``fn`` at ``x`` by forward passes with unit seeds.

    Directions are processed in batches of at most ``batch_width`` tangent
    components per pass.
    """
    xs = [float(v) for v in x]
    if len(xs) != fn.arity:
        raise ValueError(f"expected {fn.arity} inputs, got {len(xs)}")
    if batch_width < 1:
        raise ValueError("batch_width must be >= 1")
    J = np.zeros((fn.codomain, fn.arity))
    for start in range(0, fn.arity, batch_width):
        w = min(batch_width, fn.arity - start)
        duals = []
        for i, v in enumerate(xs):
            seed = [0.0] * w
            if start <= i < start + w:
                seed[i - start] = 1.0
            duals.append(Dual(v, seed))
        out = fn.evaluator(duals)
        if len(out) != fn.codomain:
            raise ValueError(f"expected {fn.codomain} outputs, got {len(out)}")
        for r, o in enumerate(out):
            if isinstance(o, Dual):
                J[r, start:start + w] = o.tangent
        # non-Dual outputs are constants: row stays zero
    return J


def gradient(fn: DifferentiableFn, x, batch_width: int = 16) -> np.ndarray:
    """Gradient of a scalar-valued ``fn`` (codomain must be 1)."""
    if fn.codomain != 1:
        raise ValueError("gradient requires codomain 1")
    return jacobian(fn, x, batch_width)[0]


def value_and_jacobian_scalars(evaluator, xs):
    """Values and Jacobian rows in one full-width forward pass.

    Unlike :func:`jacobian` this keeps the input scalars as given (floats or
    tracers), so it can run inside a trace; the returned entries are whatever
    scalar type the arithmetic produced. Returns ``(values, rows)`` as plain
    lists, with zero rows for outputs that did not depend on the inputs.
    """
    n = len(xs)
    duals = [Dual(x, tuple(1.0 if j == i else 0.0 for j in range(n)))
             for i, x in enumerate(xs)]
    outs = evaluator(duals)
    vals, rows = [], []
    for o in outs:
        if isinstance(o, Dual):
            vals.append(o.value)
            rows.append(list(o.tangent))
        else:
            vals.append(o)
            rows.append([0.0] * n)
    return vals, rows


@dataclass(frozen=True)
class FdReport:
    """Result of an AD-versus-central-difference comparison."""

    max_rel_error: float
    worst_row: int
    worst_col: int
    tol: float
    passed: bool

    def __str__(self):
        state = "ok" if self.passed else "FAIL"
        return (f"fd_check {state}: max rel error {self.max_rel_error:.3e} "
                f"at entry ({self.worst_row}, {self.worst_col}), tol {self.tol:.1e}")


def fd_check(fn: DifferentiableFn, x, tol: float, step: float = 1e-6) -> FdReport:
    """Compare :func:`jacobian` against central finite differences.

    Relative error per entry uses ``max(1, |ad|, |fd|)`` as denominator.
    """
    xs = [float(v) for v in x]
    J = jacobian(fn, xs)
    worst = (0.0, 0, 0)
    for i in range(fn.arity):
        hi = list(xs)
        lo = list(xs)
        hi[i] += step
        lo[i] -= step
        f_hi = fn.evaluator(hi)
        f_lo = fn.evaluator(lo)
        for r in range(fn.codomain):
            fd = (f_hi[r] - f_lo[r]) / (2.0 * step)
            ad = J[r, i]
            rel = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            if rel > worst[0]:
                worst = (rel, r, i)
    return FdReport(max_rel_error=worst[0], worst_row=worst[1],
                    worst_col=worst[2], tol=tol, passed=worst[0] <= tol)
