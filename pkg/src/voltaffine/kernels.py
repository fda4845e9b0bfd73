"""Volterra kernels, resolvents of the first kind, and fractional calculus.

The kernels here drive every other module: they supply point values K(t, s),
exact sub-interval integrals (the quadratures never touch the power-law
singularity by point evaluation), resolvents of the first kind L with
Kbar * L = Id, and the Riemann-Liouville operators I^beta and D^alpha built
from the same product-integration weights.

Conventions
-----------
* Convolution kernels are diagonal: K(t, s) = Kbar(t - s) 1_{s <= t} with
  Kbar(t) = diag(k_1(t), ..., k_d(t)).
* The power-law component k(t) = t^(alpha-1) / Gamma(alpha) with
  alpha in (1/2, 1]; alpha = 1 is the constant kernel (classical case).
* All product rules interpolate the smooth factor piecewise-linearly and
  integrate the kernel factor exactly over each cell (trapezoidal product
  weights).

Everything is immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.integrate import quad, simpson
from scipy.special import gamma as _gamma
from scipy.special import roots_jacobi

from .errors import DomainError, UnsupportedOperationError, ValidationError

__all__ = [
    "TimeGrid",
    "PowerLawComponent",
    "CustomComponent",
    "Kernel",
    "GeneralKernel",
    "DiagonalConvolutionKernel",
    "FractionalKernel",
    "IdentityKernel",
    "ResolventFirstKind",
    "eval_kernel",
    "kernel_interval_integral",
    "sup_l2_norm",
    "resolvent_first_kind",
    "scheme_consistent_resolvent",
    "shifted_kernel_convolution",
    "convolution_identity_residual",
    "rl_integral",
    "rl_derivative",
    "lag_cell_integrals",
]


# ---------------------------------------------------------------------------
# time grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_j = j * dt on [0, T], j = 0..n_steps."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (self.horizon > 0.0):
            raise ValidationError("horizon must be positive")
        if int(self.n_steps) < 1:
            raise ValidationError("n_steps must be >= 1")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @cached_property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * int(factor))

    def key(self):
        return (self.horizon, self.n_steps)


# ---------------------------------------------------------------------------
# scalar convolution components
# ---------------------------------------------------------------------------

class PowerLawComponent:
    """Scalar kernel k(t) = t^(alpha-1) / Gamma(alpha), alpha in (0, 1]."""

    def __init__(self, alpha: float):
        alpha = float(alpha)
        if not (0.0 < alpha <= 1.0):
            raise DomainError(f"power-law exponent must lie in (0, 1], got {alpha}")
        self.alpha = alpha
        self._c = 1.0 / _gamma(alpha)

    @property
    def singular(self) -> bool:
        return self.alpha < 1.0

    def value(self, t):
        """k(t); diverges as t -> 0 when alpha < 1."""
        t = np.asarray(t, dtype=float)
        if self.alpha == 1.0:
            return np.ones_like(t)
        with np.errstate(divide="ignore"):
            return self._c * t ** (self.alpha - 1.0)

    def integral(self, lo, hi):
        """Exact integral of k over [lo, hi]."""
        a = self.alpha
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return (hi ** a - lo ** a) / _gamma(a + 1.0)

    def moment(self, lo, hi):
        """Exact integral of tau * k(tau) over [lo, hi]."""
        a = self.alpha
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return a * (hi ** (a + 1.0) - lo ** (a + 1.0)) / _gamma(a + 2.0)

    def squared_integral(self, lo, hi):
        """Exact integral of k^2 over [lo, hi]; requires alpha > 1/2."""
        a = self.alpha
        if a <= 0.5:
            raise ValidationError(
                f"k^2 is not integrable for alpha = {a} <= 1/2 (square-integrability fails)"
            )
        if a == 1.0:
            return float(hi) - float(lo)
        p = 2.0 * a - 1.0
        return (float(hi) ** p - float(lo) ** p) / (p * _gamma(a) ** 2)

    def value_at_zero(self):
        """Finite k(0+) or None if singular."""
        return None if self.singular else self._c


class CustomComponent:
    """Scalar convolution kernel supplied as a callable, with quad fallbacks.

    Parameters
    ----------
    func : callable
        Vectorizable evaluator k(t) for t > 0.
    integral : callable, optional
        Exact (lo, hi) -> int_lo^hi k; adaptive quadrature if omitted.
    finite_at_zero : float or None
        k(0+) if finite; None marks an integrable singularity at 0.
    """

    def __init__(self, func, integral=None, finite_at_zero=None):
        self._func = func
        self._integral = integral
        self._k0 = finite_at_zero

    @property
    def singular(self) -> bool:
        return self._k0 is None

    def value(self, t):
        return np.asarray(self._func(np.asarray(t, dtype=float)), dtype=float)

    def integral(self, lo, hi):
        if self._integral is not None:
            return self._integral(lo, hi)
        lo, hi = float(lo), float(hi)
        if hi <= lo:
            return 0.0
        val, _ = quad(lambda u: float(self._func(u)), lo, hi, limit=200)
        return val

    def moment(self, lo, hi):
        lo, hi = float(lo), float(hi)
        if hi <= lo:
            return 0.0
        val, _ = quad(lambda u: u * float(self._func(u)), lo, hi, limit=200)
        return val

    def squared_integral(self, lo, hi):
        lo, hi = float(lo), float(hi)
        if hi <= lo:
            return 0.0
        val, _ = quad(lambda u: float(self._func(u)) ** 2, lo, hi, limit=200)
        return val

    def value_at_zero(self):
        return self._k0


# ---------------------------------------------------------------------------
# matrix kernels
# ---------------------------------------------------------------------------

class Kernel:
    """Base class for d x d kernels K(t, s)."""

    d: int

    def __call__(self, t: float, s: float) -> np.ndarray:
        raise NotImplementedError

    @property
    def is_convolution(self) -> bool:
        return False


class GeneralKernel(Kernel):
    """Kernel given by an arbitrary evaluator (t, s) -> d x d matrix."""

    def __init__(self, d: int, evaluator: Callable[[float, float], np.ndarray]):
        self.d = int(d)
        self._eval = evaluator

    def __call__(self, t, s):
        return np.asarray(self._eval(float(t), float(s)), dtype=float).reshape(self.d, self.d)


class DiagonalConvolutionKernel(Kernel):
    """K(t, s) = diag(k_1(t-s), ..., k_d(t-s)) 1_{s <= t}."""

    def __init__(self, components):
        self.components = tuple(components)
        self.d = len(self.components)
        if self.d == 0:
            raise ValidationError("kernel needs at least one component")

    @property
    def is_convolution(self) -> bool:
        return True

    def bar(self, t) -> np.ndarray:
        """Kbar(t) as a d x d matrix (t scalar)."""
        return np.diag([float(c.value(t)) for c in self.components])

    def bar_diag(self, t) -> np.ndarray:
        """Diagonal of Kbar at times t (vectorized): shape t.shape + (d,)."""
        t = np.asarray(t, dtype=float)
        return np.stack([c.value(t) for c in self.components], axis=-1)

    def __call__(self, t, s):
        t, s = float(t), float(s)
        if s > t:
            return np.zeros((self.d, self.d))
        tau = t - s
        vals = []
        for c in self.components:
            if tau == 0.0 and c.singular:
                raise DomainError(
                    "kernel evaluation at the singular point t = s for a component with alpha < 1"
                )
            vals.append(float(c.value(tau)))
        return np.diag(vals)

    def interval_integral(self, a, b, t) -> np.ndarray:
        """Exact int_a^b Kbar(t - s) ds as a d x d matrix."""
        a, b, t = float(a), float(b), float(t)
        if not (0.0 <= a <= b <= t):
            raise DomainError("need 0 <= a <= b <= t")
        # substitute tau = t - s
        return np.diag([float(c.integral(t - b, t - a)) for c in self.components])


class FractionalKernel(DiagonalConvolutionKernel):
    """Diagonal power-law kernel, component i equal to t^(alpha_i - 1)/Gamma(alpha_i).

    Exponents must lie in (1/2, 1]; alpha_i = 1 gives a constant (classical)
    component.
    """

    def __init__(self, alphas):
        alphas = tuple(float(a) for a in np.atleast_1d(alphas))
        for a in alphas:
            if not (0.5 < a <= 1.0):
                raise ValidationError(f"fractional exponent must lie in (1/2, 1], got {a}")
        self.alphas = alphas
        super().__init__([PowerLawComponent(a) for a in alphas])


class IdentityKernel(FractionalKernel):
    """K(t, s) = Id_d; the classical (memoryless) case."""

    def __init__(self, d: int):
        super().__init__((1.0,) * int(d))


# ---------------------------------------------------------------------------
# resolvent of the first kind
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResolventFirstKind:
    """Measure L = atom * delta_0 + density(t) dt with Kbar * L = Id.

    ``interval_mass(a, b)`` returns L((a, b]) as a d x d matrix (the atom at
    zero is excluded; add ``atom`` explicitly where the convolution interval
    contains 0).
    """

    d: int
    atom: np.ndarray
    density: Callable[[float], np.ndarray]
    interval_mass: Callable[[float, float], np.ndarray]
    tv_bound: float
    kind: str = "analytic"
    density_powers: tuple | None = None     # density_i ~ t^(p_i - 1) (None: atom/tabulated)
    cell_masses: np.ndarray | None = field(default=None, compare=False)
    grid: TimeGrid | None = field(default=None, compare=False)


def _fractional_resolvent(kernel: FractionalKernel, grid: TimeGrid) -> ResolventFirstKind:
    alphas = kernel.alphas
    d = kernel.d
    atom = np.diag([1.0 if a == 1.0 else 0.0 for a in alphas])

    def density(t, _alphas=alphas):
        t = float(t)
        vals = []
        for a in _alphas:
            if a == 1.0:
                vals.append(0.0)
            else:
                vals.append(t ** (-a) / _gamma(1.0 - a))
        return np.diag(vals)

    def interval_mass(lo, hi, _alphas=alphas):
        lo, hi = float(lo), float(hi)
        vals = []
        for a in _alphas:
            if a == 1.0 or hi <= lo:
                vals.append(0.0)
            else:
                p = 1.0 - a
                vals.append((hi ** p - lo ** p) / _gamma(2.0 - a))
        return np.diag(vals)

    T = grid.horizon
    tv = 0.0
    for a in alphas:
        tv += 1.0 if a == 1.0 else T ** (1.0 - a) / _gamma(2.0 - a)
    powers = tuple(None if a == 1.0 else 1.0 - a for a in alphas)
    return ResolventFirstKind(d, atom, density, interval_mass, tv,
                              kind="fractional", density_powers=powers)


def _discretized_resolvent(kernel: DiagonalConvolutionKernel, grid: TimeGrid) -> ResolventFirstKind:
    """Triangular deconvolution of Kbar * L = Id on the grid.

    Per component: the atom is 1/k(0+) when k(0+) is finite, else 0; the cell
    masses ell_j = L((t_{j-1}, t_j]) solve the lower-triangular system obtained
    by freezing k at cell midpoints,

        k(t_i) ell_0 + sum_{j<=i} k(t_i - m_j) ell_j = 1,  i = 1..n.
    """
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    mids = nodes[:-1] + 0.5 * dt
    d = kernel.d
    masses = np.zeros((n + 1, d))  # row 0 holds the atom

    for ic, comp in enumerate(kernel.components):
        kv = np.asarray(comp.value(nodes[1:]), dtype=float)      # k(t_1..t_n)
        if np.any(kv < 0.0):
            raise UnsupportedOperationError("kernel component takes negative values")
        if np.any(np.diff(kv) > 1e-12 * max(1.0, abs(kv[0]))):
            raise UnsupportedOperationError("kernel component is increasing; no resolvent computed")
        if np.all(kv == 0.0):
            raise UnsupportedOperationError("kernel component is identically zero")
        k0 = comp.value_at_zero()
        masses[0, ic] = 0.0 if k0 is None else 1.0 / float(k0)
        kmid = np.asarray(comp.value(mids), dtype=float)          # k(m_0 .. m_{n-1}) ascending
        for i in range(1, n + 1):
            # lag of cell j relative to t_i: t_i - m_{j-1}, j = 1..i
            acc = kv[i - 1] * masses[0, ic]
            if i > 1:
                acc += np.dot(kmid[1:i][::-1], masses[1:i, ic])
            masses[i, ic] = (1.0 - acc) / kmid[0]

    atom = np.diag(masses[0])
    cell = masses[1:]  # (n, d)

    def density(t, _cell=cell, _grid=grid):
        j = min(int(np.floor(float(t) / _grid.dt)), _grid.n_steps - 1)
        return np.diag(_cell[j] / _grid.dt)

    def interval_mass(lo, hi, _cell=cell, _grid=grid):
        # piecewise-constant density integrated over (lo, hi]
        lo, hi = float(lo), float(hi)
        if hi <= lo:
            return np.zeros((_cell.shape[1], _cell.shape[1]))
        dens = _cell / _grid.dt
        edges = _grid.nodes
        out = np.zeros(_cell.shape[1])
        for j in range(_grid.n_steps):
            a = max(lo, edges[j])
            b = min(hi, edges[j + 1])
            if b > a:
                out += dens[j] * (b - a)
        return np.diag(out)

    tv = float(np.sum(np.abs(masses)))
    return ResolventFirstKind(d, atom, density, interval_mass, tv,
                              kind="discretized", cell_masses=cell, grid=grid)


def resolvent_first_kind(kernel: Kernel, grid: TimeGrid) -> ResolventFirstKind:
    """Resolvent of the first kind of a diagonal convolution kernel.

    Analytic for fractional/identity kernels; for other diagonal convolution
    kernels (nonnegative, nonincreasing, not identically zero per component) a
    discretized resolvent is obtained by triangular deconvolution of the
    convolution identity on the grid.
    """
    if isinstance(kernel, FractionalKernel):
        return _fractional_resolvent(kernel, grid)
    if isinstance(kernel, DiagonalConvolutionKernel):
        return _discretized_resolvent(kernel, grid)
    raise UnsupportedOperationError(
        "resolvents of the first kind are only computed for diagonal convolution kernels"
    )


def scheme_consistent_resolvent(kernel: DiagonalConvolutionKernel,
                                grid: TimeGrid) -> ResolventFirstKind:
    """Resolvent of the cell-averaged kernel the simulation scheme applies.

    The kernel-weighted Euler scheme effectively convolves against the step
    kernel equal to the cell average of Kbar on each lag cell. Deconvolving
    that step kernel yields the exact first-kind inverse of the discrete
    dynamics, which makes pathwise identities (the dual representations of Y)
    hold up to the smooth-quadrature error instead of the kernel-mismatch
    error. Pure transform identities keep using the analytic resolvent.
    """
    if not isinstance(kernel, DiagonalConvolutionKernel):
        raise UnsupportedOperationError("need a diagonal convolution kernel")
    n, dt = grid.n_steps, grid.dt
    comps = []
    for c in kernel.components:
        i0, _ = lag_cell_integrals(c, grid)
        dens = np.asarray(i0, dtype=float) / dt

        def step_val(t, _dens=dens, _dt=dt, _n=n):
            t = np.asarray(t, dtype=float)
            idx = np.clip((t / _dt).astype(int), 0, _n - 1)
            return _dens[idx]

        comps.append(CustomComponent(step_val, finite_at_zero=float(dens[0])))
    return _discretized_resolvent(DiagonalConvolutionKernel(comps), grid)


# ---------------------------------------------------------------------------
# spec operations on kernels
# ---------------------------------------------------------------------------

def eval_kernel(kernel: Kernel, t: float, s: float) -> np.ndarray:
    """K(t, s); zero matrix for s > t in the convolution case."""
    return kernel(t, s)


def kernel_interval_integral(kernel: Kernel, a: float, b: float, t: float,
                             allow_quadrature: bool = False) -> np.ndarray:
    """int_a^b Kbar(t - s) ds, exact where closed forms exist.

    A non-convolution kernel is rejected unless ``allow_quadrature`` opts in
    to componentwise adaptive quadrature of s -> K(t, s).
    """
    if isinstance(kernel, DiagonalConvolutionKernel):
        return kernel.interval_integral(a, b, t)
    if not allow_quadrature:
        raise UnsupportedOperationError(
            "interval integrals need a convolution kernel (pass allow_quadrature=True to force)"
        )
    a, b, t = float(a), float(b), float(t)
    out = np.zeros((kernel.d, kernel.d))
    for i in range(kernel.d):
        for j in range(kernel.d):
            out[i, j], _ = quad(lambda s: kernel(t, s)[i, j], a, b, limit=200)
    return out


def sup_l2_norm(kernel: Kernel, grid: TimeGrid) -> float:
    """max over grid nodes t_j of int_0^{t_j} ||K(t_j, s)||_F^2 ds.

    Diagnostic for the square-integrability assumption; exact for power-law
    components (and raises for alpha <= 1/2, where it fails).
    """
    nodes = grid.nodes
    if isinstance(kernel, DiagonalConvolutionKernel):
        vals = np.zeros(grid.n_steps + 1)
        for c in kernel.components:
            vals += np.array([c.squared_integral(0.0, t) for t in nodes])
        return float(np.max(vals))
    # general kernel: composite Simpson over s on each [0, t_j]
    best = 0.0
    for j in range(1, grid.n_steps + 1):
        tj = nodes[j]
        ss = np.linspace(0.0, tj, 201)
        vals = np.array([np.sum(kernel(tj, s) ** 2) for s in ss])
        best = max(best, float(simpson(vals, x=ss)))
    return best


def _gauss_jacobi_identity(alpha: float, n_nodes: int = 24) -> float:
    """int_0^t Kbar(t-s) resolvent-density(s) ds for a power-law pair.

    After s = t(1+x)/2 the integral is t-independent with Jacobi weight
    (1-x)^(alpha-1) (1+x)^(-alpha); Gauss-Jacobi integrates it directly.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        _, w = roots_jacobi(n_nodes, alpha - 1.0, -alpha)
    return float(np.sum(w)) / (_gamma(alpha) * _gamma(1.0 - alpha))


def convolution_identity_residual(kernel: DiagonalConvolutionKernel,
                                  L: ResolventFirstKind,
                                  grid: TimeGrid) -> float:
    """max_{j >= 1} ||(Kbar * L)(t_j) - Id|| by direct convolution quadrature."""
    if not isinstance(kernel, DiagonalConvolutionKernel):
        raise UnsupportedOperationError("identity check needs a diagonal convolution kernel")
    n, dt = grid.n_steps, grid.dt
    nodes = grid.nodes
    worst = 0.0
    for ic, comp in enumerate(kernel.components):
        atom = float(L.atom[ic, ic])
        if isinstance(comp, PowerLawComponent) and L.kind == "fractional":
            if comp.alpha == 1.0:
                continue  # Kbar * delta_0 = 1 exactly
            val = _gauss_jacobi_identity(comp.alpha)
            worst = max(worst, abs(val - 1.0))
            continue
        # discretized measure: midpoint product rule against the cell masses
        mids = nodes[:-1] + 0.5 * dt
        cell = np.array([L.interval_mass(nodes[j], nodes[j + 1])[ic, ic] for j in range(n)])
        kv = np.asarray(comp.value(nodes[1:]), dtype=float)
        kmid = np.asarray(comp.value(mids), dtype=float)
        for i in range(1, n + 1):
            val = kv[i - 1] * atom + np.dot(kmid[:i][::-1], cell[:i])
            worst = max(worst, abs(val - 1.0))
    return worst


def shifted_kernel_convolution(kernel: DiagonalConvolutionKernel,
                               L: ResolventFirstKind,
                               h: float,
                               grid: TimeGrid):
    """((Delta_h Kbar) * L)(t_j) on the grid, with its total variation.

    Delta_h Kbar(t) = Kbar((t + h) ^ T). Returns ``(values, tv)`` where
    ``values[j]`` is a d x d matrix. For h = 0 this is the resolvent identity
    and singular power-law components are evaluated by Gauss-Jacobi quadrature
    instead of the midpoint product rule.
    """
    h = float(h)
    if h < 0.0:
        raise DomainError("shift h must be nonnegative")
    n, dt, T = grid.n_steps, grid.dt, grid.horizon
    nodes = grid.nodes
    mids = nodes[:-1] + 0.5 * dt
    values = np.zeros((n + 1, kernel.d, kernel.d))
    for ic, comp in enumerate(kernel.components):
        atom = float(L.atom[ic, ic])
        analytic_power = isinstance(comp, PowerLawComponent) and L.kind == "fractional"
        if analytic_power and comp.alpha == 1.0:
            values[:, ic, ic] = 1.0  # constant kernel against delta_0
            continue
        if h == 0.0 and analytic_power:
            values[1:, ic, ic] = _gauss_jacobi_identity(comp.alpha)
            values[0, ic, ic] = values[1, ic, ic]
            continue
        cell = np.array([L.interval_mass(nodes[j], nodes[j + 1])[ic, ic] for j in range(n)])

        def shifted(tau, _c=comp):
            return _c.value(np.minimum(np.asarray(tau, dtype=float) + h, T))

        k_at_nodes = np.asarray(shifted(nodes), dtype=float)
        for i in range(n + 1):
            val = k_at_nodes[i] * atom
            if i > 0:
                val += float(np.dot(np.asarray(shifted(nodes[i] - mids[:i]), dtype=float), cell[:i]))
            values[i, ic, ic] = val
    tv = float(np.sum(np.linalg.norm(np.diff(values, axis=0), axis=(1, 2))))
    return values, tv


# ---------------------------------------------------------------------------
# product-integration weights and Riemann-Liouville operators
# ---------------------------------------------------------------------------

def lag_cell_integrals(component, grid: TimeGrid):
    """Per-lag cell integrals (i0, i1) of a scalar convolution component.

    Cell at lag m covers tau in [m dt, (m+1) dt];
    i0[m] = int k(tau) dtau and i1[m] = int tau k(tau) dtau over that cell.
    These generate both the rectangle (predictor) and the piecewise-linear
    (corrector) product weights.
    """
    n, dt = grid.n_steps, grid.dt
    edges = grid.nodes
    if isinstance(component, PowerLawComponent):
        i0 = np.asarray(component.integral(edges[:-1], edges[1:]), dtype=float)
        i1 = np.asarray(component.moment(edges[:-1], edges[1:]), dtype=float)
    else:
        i0 = np.array([component.integral(edges[m], edges[m + 1]) for m in range(n)])
        i1 = np.array([component.moment(edges[m], edges[m + 1]) for m in range(n)])
    return i0, i1


def product_linear_weights(component, grid: TimeGrid):
    """Left/right node weights of the piecewise-linear product rule.

    For the cell at lag m (tau in [m dt, (m+1) dt]) and a linear integrand
    g on the cell, int k(tau) g dtau = w_far[m] g(far node) + w_near[m] g(near
    node), where 'near' is the node closer to the evaluation point t (smaller
    tau).
    """
    n, dt = grid.n_steps, grid.dt
    i0, i1 = lag_cell_integrals(component, grid)
    m = np.arange(n, dtype=float)
    w_near = ((m + 1.0) * dt * i0 - i1) / dt   # pairs with g at tau = m dt
    w_far = (i1 - m * dt * i0) / dt            # pairs with g at tau = (m+1) dt
    return w_near, w_far, i0


def rl_integral(f: np.ndarray, beta: float, grid: TimeGrid) -> np.ndarray:
    """Riemann-Liouville integral (I^beta f)(t_j) on the grid.

    Product integration with piecewise-linear f; exact for linear f.
    f has shape (n_steps+1, ...) and may be complex. I^0 f = f.
    """
    beta = float(beta)
    if beta < 0.0:
        raise DomainError("order beta must be >= 0")
    f = np.asarray(f)
    if f.shape[0] != grid.n_steps + 1:
        raise ValidationError("f must be sampled on the grid nodes")
    if beta == 0.0:
        return f.copy()
    comp = PowerLawComponent(beta) if beta <= 1.0 else None
    if comp is None:
        # k(t) = t^(beta-1)/Gamma(beta) with beta > 1: same closed forms apply
        comp = _HighOrderPowerLaw(beta)
    w_near, w_far, _ = product_linear_weights(comp, grid)
    out = np.zeros_like(f, dtype=np.result_type(f.dtype, float))
    n = grid.n_steps
    for i in range(1, n + 1):
        # node j in 0..i: far-weight from cell lag i-j-1 (j <= i-1), near from lag i-j (j >= 1)
        w = np.zeros(i + 1)
        w[:-1] += w_far[:i][::-1]
        w[1:] += w_near[:i][::-1]
        out[i] = np.tensordot(w, f[: i + 1], axes=(0, 0))
    return out


class _HighOrderPowerLaw:
    """Power-law component for exponent beta > 1 (used only by I^beta)."""

    def __init__(self, beta: float):
        self.alpha = float(beta)
        self.singular = False

    def value(self, t):
        t = np.asarray(t, dtype=float)
        return t ** (self.alpha - 1.0) / _gamma(self.alpha)

    def integral(self, lo, hi):
        a = self.alpha
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return (hi ** a - lo ** a) / _gamma(a + 1.0)

    def moment(self, lo, hi):
        a = self.alpha
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return a * (hi ** (a + 1.0) - lo ** (a + 1.0)) / _gamma(a + 2.0)


def rl_derivative(f: np.ndarray, alpha: float, grid: TimeGrid) -> np.ndarray:
    """Riemann-Liouville derivative D^alpha f = d/dt I^(1-alpha) f on the grid.

    Forward finite difference of I^(1-alpha) f; the last node reuses the
    backward difference. D^1 is the ordinary difference quotient.
    """
    alpha = float(alpha)
    if not (0.0 < alpha <= 1.0):
        raise DomainError("order alpha must lie in (0, 1]")
    g = rl_integral(f, 1.0 - alpha, grid)
    out = np.empty_like(g)
    out[:-1] = np.diff(g, axis=0) / grid.dt
    out[-1] = out[-2]
    return out
