"""Time-dependent affine drift/diffusion coefficients.

The state equation carries b(s, x) = b0(s) + B(s) x and a diffusion with
sigma(s, x) sigma(s, x)^T = a(s, x) = A0(s) + sum_i Ai(s) x_i on a state
space E. Everything in this module is a pure function of (s, x); instances
are immutable and safe to share.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import StateSpaceError, ValidationError
from .kernels import TimeGrid

__all__ = ["TimeFunction", "AffineCoefficients", "STATE_SPACES"]

STATE_SPACES = ("R^d", "RxR+", "R+^d")


class TimeFunction:
    """A deterministic curve on [0, T]: constant, linearly interpolated samples,
    or piecewise-constant segments.

    Piecewise-constant inputs (market-style term structures) are accepted but
    flagged as discontinuous: the affine structure requires continuous
    coefficients, and every quadrature in this library interpolates node
    samples linearly, which amounts to smoothing each jump over one grid step.
    """

    def __init__(self, kind: str, times=None, values=None, func=None, tag: str = ""):
        if kind not in ("constant", "linear", "pconst", "callable"):
            raise ValidationError(f"unknown time-function kind {kind!r}")
        self.kind = kind
        self.func = func
        self.tag = tag
        if kind == "constant":
            self.values = np.asarray(values)
            self.times = None
        elif kind == "callable":
            if not callable(func):
                raise ValidationError("callable kind needs a function")
            self.values = np.asarray(func(0.0))
            self.times = None
        else:
            self.times = np.asarray(times, dtype=float)
            self.values = np.asarray(values)
            if self.times.ndim != 1 or len(self.times) < 1:
                raise ValidationError("times must be a nonempty 1-d array")
            if len(self.times) != self.values.shape[0]:
                raise ValidationError("times and values must have equal length")
            if np.any(np.diff(self.times) <= 0):
                raise ValidationError("times must be strictly increasing")

    # -- constructors ------------------------------------------------------

    @classmethod
    def constant(cls, value) -> "TimeFunction":
        return cls("constant", values=value)

    @classmethod
    def linear(cls, times, values) -> "TimeFunction":
        return cls("linear", times=times, values=values)

    @classmethod
    def piecewise_constant(cls, times, values) -> "TimeFunction":
        """Right-continuous steps: value[i] on [times[i], times[i+1])."""
        return cls("pconst", times=times, values=values)

    @classmethod
    def from_callable(cls, func, tag: str, continuous: bool = True) -> "TimeFunction":
        out = cls("callable", func=func, tag=tag)
        out._continuous = continuous
        return out

    @classmethod
    def coerce(cls, obj) -> "TimeFunction":
        if isinstance(obj, TimeFunction):
            return obj
        return cls.constant(obj)

    # -- evaluation --------------------------------------------------------

    @property
    def continuous(self) -> bool:
        if self.kind == "callable":
            return getattr(self, "_continuous", True)
        return self.kind != "pconst"

    @property
    def shape(self):
        return self.values.shape if self.kind == "constant" else self.values.shape[1:]

    def __call__(self, t):
        """Evaluate at scalar time t."""
        if self.kind == "constant":
            out = self.values
        elif self.kind == "callable":
            out = np.asarray(self.func(float(t)))
        else:
            t = float(t)
            if self.kind == "pconst":
                idx = int(np.searchsorted(self.times, t, side="right")) - 1
                idx = min(max(idx, 0), len(self.times) - 1)
                out = self.values[idx]
            elif len(self.times) == 1:
                out = self.values[0]
            else:
                tc = min(max(t, self.times[0]), self.times[-1])
                i = int(np.searchsorted(self.times, tc, side="right")) - 1
                i = min(max(i, 0), len(self.times) - 2)
                w = (tc - self.times[i]) / (self.times[i + 1] - self.times[i])
                out = (1.0 - w) * self.values[i] + w * self.values[i + 1]
        if np.ndim(out):
            return np.asarray(out).copy()
        return complex(out) if np.iscomplexobj(self.values) else float(out)

    def sample(self, times) -> np.ndarray:
        """Evaluate on an array of times; shape (len(times),) + self.shape."""
        return np.array([self(t) for t in np.asarray(times, dtype=float)])

    def sup_norm(self, horizon: float, probes: int = 257) -> float:
        ts = np.linspace(0.0, horizon, probes)
        vals = self.sample(ts)
        if vals.ndim == 1:
            return float(np.max(np.abs(vals)))
        return float(np.max(np.linalg.norm(vals.reshape(len(ts), -1), axis=1)))

    def key(self) -> str:
        """Stable fingerprint used for transform caching."""
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(self.tag.encode())
        if self.times is not None:
            h.update(self.times.tobytes())
        h.update(np.asarray(self.values, dtype=np.complex128).tobytes())
        return h.hexdigest()[:16]


class AffineCoefficients:
    """Affine coefficient family (b0, B, A0..Ad) on a horizon [0, T].

    Parameters
    ----------
    b0 : TimeFunction -> R^d
    B : TimeFunction -> R^{d x d}, columns b^1 .. b^d
    A : sequence of d+1 TimeFunctions -> symmetric d x d (A^0 .. A^d)
    horizon : float
        Upper end of the time interval the curves live on.
    state_space : one of "R^d", "RxR+", "R+^d"
    sigma : callable (s, x) -> d x m matrix, optional
        Explicit diffusion factor with sigma sigma^T = a(s, x); when omitted a
        symmetric PSD square root is used.
    m : int
        Number of Brownian drivers (defaults to d).

    The constructor computes a finite linear-growth constant ``c_lg`` with
    ||b(t,x)|| + ||sigma(t,x)|| <= c_lg (1 + ||x||) from coefficient sup-norms.
    """

    def __init__(self, d, b0, B, A, horizon, state_space="R^d",
                 sigma: Callable | None = None, m: int | None = None,
                 psd_tol: float = 1e-10):
        self.d = int(d)
        self.horizon = float(horizon)
        if state_space not in STATE_SPACES:
            raise ValidationError(f"state_space must be one of {STATE_SPACES}")
        self.state_space = state_space
        self.b0 = TimeFunction.coerce(b0)
        self.B = TimeFunction.coerce(B)
        self.A = tuple(TimeFunction.coerce(a) for a in A)
        if len(self.A) != self.d + 1:
            raise ValidationError("need d+1 matrices A^0 .. A^d")
        self._sigma = sigma
        self.m = int(m) if m is not None else self.d
        self.psd_tol = float(psd_tol)
        self.continuous = all(f.continuous for f in (self.b0, self.B, *self.A))

        probes = np.linspace(0.0, self.horizon, 65)
        for s in probes[:: max(1, len(probes) // 8)]:
            for i, a in enumerate(self.A):
                mat = np.atleast_2d(a(s))
                if not np.allclose(mat, mat.T, atol=1e-12):
                    raise ValidationError(f"A^{i} is not symmetric at t={s}")
        self.c_lg = self._linear_growth_bound()

    def _linear_growth_bound(self) -> float:
        T = self.horizon
        cb = self.b0.sup_norm(T) + self.B.sup_norm(T)
        ca = sum(a.sup_norm(T) for a in self.A)
        return float(cb + np.sqrt(self.d * max(ca, 0.0)) + np.sqrt(max(ca, 0.0)))

    # -- evaluation --------------------------------------------------------

    def drift(self, s: float, x) -> np.ndarray:
        """b(s, x) = b0(s) + B(s) x."""
        x = np.asarray(x, dtype=float)
        return np.atleast_1d(self.b0(s)) + np.atleast_2d(self.B(s)) @ x

    def diffusion_squared(self, s: float, x) -> np.ndarray:
        """a(s, x) = A0(s) + sum_i Ai(s) x_i (may be indefinite outside E)."""
        x = np.asarray(x, dtype=float)
        a = np.atleast_2d(self.A[0](s)).astype(float).copy()
        for i in range(self.d):
            a += np.atleast_2d(self.A[i + 1](s)) * x[i]
        return a

    def quadratic_form(self, s: float, v) -> np.ndarray:
        """Row vector A(s, v) with components v A^i(s) v^T (plain transpose,
        complex bilinear -- not Hermitian)."""
        v = np.asarray(v)
        return np.array([v @ np.atleast_2d(self.A[i + 1](s)) @ v for i in range(self.d)])

    def sigma_factor(self, s: float, x) -> np.ndarray:
        """A d x m matrix sigma with sigma sigma^T = a(s, x), x in E.

        Uses the explicit factor when one was supplied (the Heston build
        does); otherwise a symmetric eigendecomposition square root with
        negative eigenvalues clipped at -psd_tol and floored to zero.
        """
        if self._sigma is not None:
            return np.asarray(self._sigma(s, np.asarray(x, dtype=float)), dtype=float)
        a = self.diffusion_squared(s, x)
        w, q = np.linalg.eigh(a)
        if np.min(w) < -self.psd_tol:
            raise StateSpaceError(
                f"a(s, x) has eigenvalue {np.min(w):.3e} < -{self.psd_tol:g}; x outside E?"
            )
        w = np.clip(w, 0.0, None)
        root = q @ np.diag(np.sqrt(w)) @ q.T
        if self.m == self.d:
            return root
        out = np.zeros((self.d, self.m))
        out[:, : self.d] = root
        return out

    # -- grid sampling used by the solvers ----------------------------------

    def sampled(self, grid: TimeGrid) -> "SampledCoefficients":
        return SampledCoefficients(self, grid)

    def key(self) -> str:
        h = hashlib.sha256()
        for f in (self.b0, self.B, *self.A):
            h.update(f.key().encode())
        h.update(f"{self.d}|{self.horizon}|{self.state_space}".encode())
        return h.hexdigest()[:16]


class SampledCoefficients:
    """Coefficient curves frozen on the nodes of a grid (plain arrays)."""

    def __init__(self, coeffs: AffineCoefficients, grid: TimeGrid):
        nodes = grid.nodes
        d = coeffs.d
        self.coeffs = coeffs
        self.grid = grid
        self.b0 = np.array([np.atleast_1d(coeffs.b0(t)) for t in nodes])        # (n+1, d)
        self.B = np.array([np.atleast_2d(coeffs.B(t)) for t in nodes])          # (n+1, d, d)
        self.A = np.array([[np.atleast_2d(a(t)) for a in coeffs.A] for t in nodes])
        # self.A has shape (n+1, d+1, d, d)
        if self.b0.shape[1] != d or self.B.shape[1:] != (d, d):
            raise ValidationError("coefficient shapes do not match dimension d")
