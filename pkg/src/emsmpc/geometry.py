"""Ellipsoidal set calculus: halfspace cuts and minimum-volume enclosures.

An ellipsoid is parameterized by a symmetric PSD shape matrix ``Q`` and
center ``c`` as ``E(Q, c) = { Q^(1/2) z + c : ||z|| <= 1 }``. Cutting with a
halfspace ``H(a, b) = { x : a^T x <= b }`` and enclosing the intersection
with the minimum-volume ellipsoid has the closed form implemented here; the
cut depth is measured by ``alpha = (a^T c - b) / sqrt(a^T Q a)``, with
``alpha = 0`` a central cut, ``alpha = 1`` a tangent point and
``alpha <= -1/n`` a cut that removes nothing.

For use inside smooth optimization the hard clamp ``max(alpha, -1/n)`` has a
softplus under-approximation :func:`smooth_clamp_alpha`. Note that for raw
``alpha < -1/n`` the smoothed value dips below ``-1/n`` (by at most
``ln 2 / beta``); evaluating the cut formulas there slightly inflates the
enclosure along ``a`` but slightly shrinks it in perpendicular directions,
so exact containment of the intersection is only guaranteed on the
unsmoothed path. The smoothed path trades that sliver (sub-percent at the
default ``beta = 100``) for differentiability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import exp, log, sqrt

__all__ = [
    "DegenerateDirection", "EmptyIntersection", "ExhaustedRejection",
    "OutOfRange", "SymPsdMatrix", "Ellipsoid", "Halfspace", "SmoothingParams",
    "alpha_of", "clamp_alpha", "smooth_clamp_alpha", "cut_coefficients",
    "loewner_john_cut", "partition_pair", "contains", "sample_in_cut",
    "log_volume",
]

DEGENERATE_TOL = 1e-14
PSD_EIG_TOL = -1e-10


class DegenerateDirection(ValueError):
    """The cut normal has (numerically) zero extent in the ellipsoid metric."""


class EmptyIntersection(ValueError):
    """The halfspace does not touch the ellipsoid."""


class OutOfRange(ValueError):
    """A cut depth outside the admissible interval."""


class ExhaustedRejection(RuntimeError):
    """Rejection sampling gave up: acceptance rate below 1e-4 over 1e6 draws."""


class SymPsdMatrix:
    """Symmetric positive-semidefinite matrix.

    Construction symmetrizes ``(M + M^T) / 2`` and verifies the minimum
    eigenvalue is ``>= -1e-10``.
    """

    __slots__ = ("array",)

    def __init__(self, array):
        M = np.asarray(array, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
            raise ValueError(f"expected a square matrix, got shape {M.shape}")
        M = 0.5 * (M + M.T)
        eigmin = float(np.linalg.eigvalsh(M)[0])
        if eigmin < PSD_EIG_TOL:
            raise ValueError(f"matrix is not PSD (min eigenvalue {eigmin:.3e})")
        self.array = M

    @property
    def n(self) -> int:
        return self.array.shape[0]

    def to_upper_triangle(self) -> list[float]:
        """Row-major upper triangle including the diagonal."""
        n = self.n
        return [float(self.array[i, j]) for i in range(n) for j in range(i, n)]

    @classmethod
    def from_upper_triangle(cls, n: int, entries) -> "SymPsdMatrix":
        entries = list(entries)
        if len(entries) != n * (n + 1) // 2:
            raise ValueError(f"expected {n * (n + 1) // 2} entries for n={n}")
        M = np.zeros((n, n))
        k = 0
        for i in range(n):
            for j in range(i, n):
                M[i, j] = entries[k]
                M[j, i] = entries[k]
                k += 1
        return cls(M)

    def __repr__(self):
        return f"SymPsdMatrix(n={self.n})"


@dataclass(frozen=True)
class Ellipsoid:
    """Shape-and-center ellipsoid ``E(Q, c)``; degenerate (flat) Q allowed."""

    shape: SymPsdMatrix
    center: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        if c.shape[0] != self.shape.n:
            raise ValueError("center dimension does not match shape matrix")
        object.__setattr__(self, "center", c)

    @property
    def n(self) -> int:
        return self.shape.n

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "center": [float(v) for v in self.center],
            "shape_upper_triangle": self.shape.to_upper_triangle(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ellipsoid":
        shape = SymPsdMatrix.from_upper_triangle(d["n"], d["shape_upper_triangle"])
        return cls(shape=shape, center=np.asarray(d["center"], dtype=float))


@dataclass(frozen=True)
class Halfspace:
    """``H(a, b) = { x : a^T x <= b }``."""

    a: np.ndarray
    b: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        if not np.any(a):
            raise ValueError("halfspace normal must be nonzero")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))

    def mirrored(self) -> "Halfspace":
        return Halfspace(-self.a, -self.b)


@dataclass(frozen=True)
class SmoothingParams:
    """Shifted-softplus parameters; larger ``beta`` hugs the clamp tighter."""

    beta: float = 100.0
    eta: float = 1.0
    nu: float = 1.0

    def __post_init__(self):
        if self.beta <= 0 or self.eta <= 0 or self.nu <= 0:
            raise ValueError("beta, eta, nu must all be positive")


def alpha_of(ell: Ellipsoid, hs: Halfspace) -> float:
    """Cut depth ``(a^T c - b) / sqrt(a^T Q a)`` of ``hs`` into ``ell``."""
    s = float(hs.a @ ell.shape.array @ hs.a)
    if s <= DEGENERATE_TOL:
        raise DegenerateDirection(
            f"a^T Q a = {s:.3e} <= {DEGENERATE_TOL}; cut direction carries "
            "no extent")
    return (float(hs.a @ ell.center) - hs.b) / np.sqrt(s)


def clamp_alpha(alpha: float, n: int) -> float:
    """Hard clamp ``max(alpha, -1/n)``: shallower cuts remove nothing."""
    return max(float(alpha), -1.0 / n)


def smooth_clamp_alpha(alpha, n: int, params: SmoothingParams | None = None):
    """Smooth under-approximation of :func:`clamp_alpha`.

    A softplus shifted so the value never exceeds the clamp and equals it at
    ``alpha = -1/n`` exactly; the gap is at most ``ln 2 / beta`` at the
    default ``nu = 1``. Accepts floats, duals and tracers (one fixed
    expression graph, no branches); the symmetric-exponent form keeps
    intermediate ``exp`` arguments halved.
    """
    p = params or SmoothingParams()
    inv_n = 1.0 / n
    t = (p.eta * p.beta) * (alpha + inv_n)
    s = t + np.log(p.nu) if p.nu != 1.0 else t
    # ln(1 + nu exp(t)) = max(s, 0) + ln(1 + exp(-|s|)) with s = t + ln nu,
    # written with a smooth absolute value so the graph stays branch-free and
    # the exp argument stays nonpositive for any iterate the optimizer visits
    mag = sqrt(s * s + 1e-16)
    softplus = 0.5 * (s + mag) + log(1.0 + exp(-mag))
    return softplus / p.beta - inv_n - np.log1p(p.nu) / p.beta


def _cut_coefficients_raw(alpha_used, n: int):
    """Enclosure coefficients (tau, sigma_cut, delta); no validation.

    Generic over scalar type so the traced rollout can reuse it.
    """
    nf = float(n)
    tau = (1.0 + nf * alpha_used) / (nf + 1.0)
    sigma_cut = (2.0 / (nf + 1.0)) * (1.0 + nf * alpha_used) / (1.0 + alpha_used)
    delta = (nf * nf / (nf * nf - 1.0)) * (1.0 - alpha_used * alpha_used)
    return tau, sigma_cut, delta


def cut_coefficients(alpha_used: float, n: int) -> tuple[float, float, float]:
    """Validated enclosure coefficients for a cut of depth ``alpha_used``.

    Requires ``-1 < alpha_used < 1`` (so ``delta > 0``) with a small
    undershoot below ``-1/n`` permitted for the smoothed clamp, and ``n >= 2``
    (the minimum-volume formula divides by ``n^2 - 1``).
    """
    if n < 2:
        raise ValueError("cut enclosures require dimension n >= 2")
    a = float(alpha_used)
    if a >= 1.0 or a <= -1.0:
        raise OutOfRange(f"alpha_used = {a} outside (-1, 1)")
    if a < -1.0 / n - 0.01 - 1e-12:
        raise OutOfRange(f"alpha_used = {a} undershoots -1/n by more than 0.01")
    return _cut_coefficients_raw(a, n)


def loewner_john_cut(ell: Ellipsoid, hs: Halfspace, use_smoothing: bool = False,
                     params: SmoothingParams | None = None) -> Ellipsoid:
    """Minimum-volume ellipsoid enclosing ``ell`` intersected with ``hs``.

    Unsmoothed, a cut with ``alpha <= -1/n`` returns the input ellipsoid
    exactly and ``alpha = 1`` returns the tangent point (zero shape). With
    ``use_smoothing`` the depth passes through :func:`smooth_clamp_alpha`
    first (see the module docstring for the containment caveat).
    """
    if ell.n < 2:
        raise ValueError("cut enclosures require dimension n >= 2")
    alpha = alpha_of(ell, hs)
    if alpha > 1.0:
        raise EmptyIntersection(f"alpha = {alpha:.6g} > 1: halfspace misses "
                                "the ellipsoid")
    if use_smoothing:
        alpha_used = float(smooth_clamp_alpha(alpha, ell.n, params))
    else:
        if alpha <= -1.0 / ell.n:
            return Ellipsoid(shape=ell.shape, center=ell.center.copy())
        alpha_used = alpha
    tau, sigma_cut, delta = _cut_coefficients_raw(alpha_used, ell.n)
    Q = ell.shape.array
    q = Q @ hs.a
    s = float(hs.a @ q)
    root = np.sqrt(s)
    d = ell.center - (tau / root) * q
    R = delta * (Q - (sigma_cut / s) * np.outer(q, q))
    return Ellipsoid(shape=SymPsdMatrix(R), center=d)


def partition_pair(ell: Ellipsoid, hs: Halfspace, use_smoothing: bool = False,
                   params: SmoothingParams | None = None
                   ) -> tuple[Ellipsoid, Ellipsoid]:
    """Enclosures of the two halves of ``ell`` split by the plane of ``hs``.

    Side one keeps ``H(a, b)``, side two the mirrored ``H(-a, -b)``; their
    union covers ``ell``. Requires ``-1 <= alpha <= 1``.
    """
    alpha = alpha_of(ell, hs)
    if alpha > 1.0:
        raise EmptyIntersection(f"alpha = {alpha:.6g} > 1: side one is empty")
    if alpha < -1.0:
        raise EmptyIntersection(f"alpha = {alpha:.6g} < -1: side two is empty")
    return (loewner_john_cut(ell, hs, use_smoothing, params),
            loewner_john_cut(ell, hs.mirrored(), use_smoothing, params))


def contains(ell: Ellipsoid, x, tol: float) -> bool:
    """Membership of ``x`` in ``E(Q, c)`` with tolerance ``tol``.

    True iff the quadratic form in the range of ``Q`` is ``<= 1 + tol`` and
    the component of ``x - c`` outside that range has norm ``<= tol``.
    """
    d = np.asarray(x, dtype=float).reshape(-1) - ell.center
    w, V = np.linalg.eigh(ell.shape.array)
    null_tol = 1e-12 * max(1.0, float(w[-1]))
    proj = V.T @ d
    null_mask = w <= null_tol
    null_norm = float(np.linalg.norm(proj[null_mask]))
    if null_norm > tol:
        return False
    form = float(np.sum(proj[~null_mask] ** 2 / w[~null_mask]))
    return form <= 1.0 + tol


def sample_in_cut(ell: Ellipsoid, hs: Halfspace, count: int,
                  seed: int) -> np.ndarray:
    """Uniform samples from ``ell`` intersected with ``hs`` by rejection.

    Requires a nondegenerate ellipsoid. Raises :class:`ExhaustedRejection`
    once 1e6 draws have been spent at an acceptance rate below 1e-4.
    """
    w, V = np.linalg.eigh(ell.shape.array)
    if w[0] <= 0.0:
        raise ValueError("sample_in_cut requires a nondegenerate ellipsoid")
    M = (V * np.sqrt(w)) @ V.T  # symmetric square root
    rng = np.random.default_rng(seed)
    n = ell.n
    out = np.empty((count, n))
    got = 0
    drawn = 0
    while got < count:
        batch = max(1024, count - got)
        z = rng.standard_normal((batch, n))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        r = rng.random(batch) ** (1.0 / n)
        pts = ell.center + (z * r[:, None]) @ M
        drawn += batch
        ok = pts @ hs.a <= hs.b
        take = pts[ok][:count - got]
        out[got:got + len(take)] = take
        got += len(take)
        if drawn >= 1_000_000 and got / drawn < 1e-4:
            raise ExhaustedRejection(
                f"acceptance rate {got / drawn:.2e} after {drawn} draws")
    return out


def log_volume(ell: Ellipsoid) -> float:
    """``log sqrt(det Q)``, the volume up to the unit-ball constant.

    ``-inf`` for degenerate shapes.
    """
    sign, ld = np.linalg.slogdet(ell.shape.array)
    if sign <= 0:
        return float("-inf")
    return 0.5 * float(ld)
