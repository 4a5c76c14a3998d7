"""Differentiation utilities: dual scalars, recorded tapes with forward
Jacobians and reverse-mode vector-Jacobian products, FD checks."""

from .scalars import (DifferentiableFn, DomainError, Dual, FdReport, cos,
                      exp, fd_check, gradient, jacobian, log, sin, sqrt,
                      value_and_jacobian_scalars)
from .tape import COMPILED, Tape, TapeBuilder, Tracer, backend_name, trace

__all__ = [
    "DifferentiableFn", "DomainError", "Dual", "FdReport",
    "cos", "exp", "fd_check", "gradient", "jacobian", "log", "sin", "sqrt",
    "value_and_jacobian_scalars",
    "COMPILED", "Tape", "TapeBuilder", "Tracer", "backend_name", "trace",
]
