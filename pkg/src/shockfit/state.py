"""Shock-frame state: fluxes, piecewise fields, jump quantities, and norms.

Fields live on a doubled-origin grid: each side carries its own abscissae
(including a node at 0) so the two one-sided traces are independent.  Sides
are represented either by an analytic profile (exact evaluation, used for
initial data) or by samples interpolated with a cubic spline on a grid that
refines geometrically toward the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import make_interp_spline

from . import quadrature
from .errors import (
    DegenerateJumpError,
    DomainError,
    InadmissibleStateError,
    PreconditionError,
    RangeError,
)
from .kernels import CutoffFunction

# ---------------------------------------------------------------------------
# flux
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Flux:
    """Polynomial flux with derivatives to order 4 and convexity bookkeeping."""

    name: str
    coefficients: tuple  # ascending powers

    def __post_init__(self):
        object.__setattr__(self, "_derivs", _poly_derivs(self.coefficients, 4))

    def eval(self, u, order=0):
        if order < 0 or order > 4:
            raise RangeError("flux derivative order must be in 0..4")
        u = np.asarray(u, dtype=float)
        out = np.polynomial.polynomial.polyval(u, self._derivs[order])
        return float(out) if out.ndim == 0 else out

    def __call__(self, u, order=0):
        return self.eval(u, order)

    def convexity_floor(self, interval, samples=512):
        """Positive lower bound for f'' on the interval; raises if convexity fails."""
        lo, hi = interval
        u = np.linspace(lo, hi, samples)
        floor = float(np.min(self.eval(u, 2)))
        if floor <= 0.0:
            raise InadmissibleStateError(
                f"flux {self.name!r} is not strictly convex on [{lo}, {hi}]")
        return floor

    def c_norm(self, k, interval, samples=2001):
        """max over i <= k of sup |f^(i)| on the interval (sampled)."""
        lo, hi = interval
        u = np.linspace(lo, hi, samples)
        return max(float(np.max(np.abs(self.eval(u, i)))) for i in range(k + 1))


def _poly_derivs(coeffs, orders):
    ds = [np.asarray(coeffs, dtype=float)]
    for _ in range(orders):
        ds.append(np.polynomial.polynomial.polyder(ds[-1]) if len(ds[-1]) > 1
                  else np.zeros(1))
    return ds


_FLUXES = {
    "burgers": (0.0, 0.0, 0.5),
    "quadratic_plus_linear": (0.0, 1.0, 0.5),
}


def make_flux(name: str, coefficients=None) -> Flux:
    if name == "custom":
        if not coefficients:
            raise RangeError("custom flux requires polynomial coefficients")
        return Flux(name="custom", coefficients=tuple(float(c) for c in coefficients))
    if name not in _FLUXES:
        raise RangeError(f"unknown flux {name!r}; built-ins: {sorted(_FLUXES)}")
    return Flux(name=name, coefficients=_FLUXES[name])


# ---------------------------------------------------------------------------
# one side of a piecewise field
# ---------------------------------------------------------------------------


class SideData:
    """One side of a field: grid + values, optionally an analytic profile.

    ``grid`` is ascending and includes the origin node (left side ends at 0,
    right side starts at 0).  ``profile(x, order)`` when present takes
    precedence over the spline for evaluation.
    """

    def __init__(self, grid, values, profile=None):
        self.grid = np.asarray(grid, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.grid.ndim != 1 or self.grid.size < 2:
            raise PreconditionError("side grid needs at least two nodes")
        if np.any(np.diff(self.grid) <= 0):
            raise PreconditionError("side grid must be strictly increasing")
        if self.grid.shape != self.values.shape:
            raise PreconditionError("grid/value shape mismatch")
        if not np.all(np.isfinite(self.values)):
            raise PreconditionError("side values must be finite")
        self.profile = profile
        self._splines = None

    @classmethod
    def from_profile(cls, grid, profile):
        return cls(grid, profile(np.asarray(grid, dtype=float), 0), profile=profile)

    def _spline(self, order):
        if self._splines is None:
            k = min(3, len(self.grid) - 1)
            base = make_interp_spline(self.grid, self.values, k=k)
            self._splines = [base]
            for i in range(1, 3):
                self._splines.append(base.derivative(i) if i <= k else None)
        return self._splines[order]

    def eval(self, x, order=0):
        x = np.asarray(x, dtype=float)
        if self.profile is not None:
            out = self.profile(x, order)
        else:
            sp = self._spline(order)
            if sp is None:
                return np.zeros_like(x)
            lo, hi = self.grid[0], self.grid[-1]
            xc = np.clip(x, lo, hi)  # constant-tail clamp outside the grid
            out = sp(xc)
            if order > 0:
                out = np.where((x < lo) | (x > hi), 0.0, out)
        return out

    def cells(self):
        return self.grid


class PiecewiseField:
    """Spatial field with a doubled node at the origin and smooth sides."""

    def __init__(self, left: SideData, right: SideData):
        if left.grid[-1] != 0.0 or right.grid[0] != 0.0:
            raise PreconditionError("sides must meet at a doubled origin node")
        self.left = left
        self.right = right

    # -- constructors --------------------------------------------------------

    @classmethod
    def from_profiles(cls, profile_left, profile_right, L, grid=None):
        g = make_graded_grid(L) if grid is None else np.asarray(grid, dtype=float)
        return cls(SideData.from_profile(-g[::-1], profile_left),
                   SideData.from_profile(g, profile_right))

    @classmethod
    def from_samples(cls, x_left, v_left, x_right, v_right):
        return cls(SideData(x_left, v_left), SideData(x_right, v_right))

    # -- evaluation ----------------------------------------------------------

    @property
    def domain_half_width(self):
        return float(self.right.grid[-1])

    @property
    def traces(self):
        return (float(self.left.eval(0.0, 0)), float(self.right.eval(0.0, 0)))

    def side(self, which):
        return self.left if which < 0 else self.right

    def eval(self, x, order=0, side=None):
        """Evaluate the field (or a derivative); ``side`` (+1/-1) resolves the
        origin and forces one-sided evaluation for mixed-sign arrays."""
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        if side is not None:
            out = self.side(side).eval(x, order)
        else:
            if np.any(x == 0.0):
                raise DomainError("origin evaluation requires an explicit side")
            out = np.empty_like(x)
            neg = x < 0
            if np.any(neg):
                out[neg] = self.left.eval(x[neg], order)
            if np.any(~neg):
                out[~neg] = self.right.eval(x[~neg], order)
        return float(out[0]) if scalar else out

    def to_csv(self, path):
        """Snapshot rows: side,x,w,w_x,w_xx."""
        with open(path, "w") as fh:
            fh.write("side,x,w,w_x,w_xx\n")
            for tag, sd in (("L", self.left), ("R", self.right)):
                for x in sd.grid:
                    w, wx, wxx = (float(sd.eval(x, i)) for i in range(3))
                    fh.write(f"{tag},{x:.17g},{w:.17g},{wx:.17g},{wxx:.17g}\n")


def make_graded_grid(L, ratio=1.15, finest_rel=1e-5, h_cap=0.03, near=3.0,
                     far_ratio=1.3):
    """Abscissae 0 < x_1 < ... < L refining geometrically toward the origin.

    Spacing grows by ``ratio`` but is capped at ``h_cap`` within |x| <= near
    (so smooth features away from the shock stay resolved) and relaxes
    geometrically by ``far_ratio`` beyond.
    """
    finest = finest_rel * L
    pts = [0.0, finest]
    while pts[-1] < min(near, L):
        h = min(pts[-1] * (ratio - 1.0), h_cap)
        pts.append(pts[-1] + h)
    h = h_cap
    while pts[-1] < L:
        pts.append(pts[-1] + h)
        h *= far_ratio
    pts[-1] = L
    if len(pts) > 2 and pts[-1] - pts[-2] < 1e-3 * L:
        del pts[-2]
    return np.array(pts)


# ---------------------------------------------------------------------------
# jump quantities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShockQuantities:
    sigma: float
    b_minus: float
    b_plus: float
    b0: float
    b1: float

    def ordering_holds(self, rtol=1e-9):
        pad = 1.0 + rtol
        return (-self.b1 * pad <= self.b_plus <= -self.b0 / pad < 0.0
                and 0.0 < self.b0 / pad <= self.b_minus <= self.b1 * pad)


def rh_speed(flux: Flux, u_minus, u_plus):
    """Rankine-Hugoniot speed (f(u-) - f(u+)) / (u- - u+)."""
    if u_minus == u_plus:
        raise DegenerateJumpError("equal states carry no jump")
    return (flux.eval(u_minus) - flux.eval(u_plus)) / (u_minus - u_plus)


def characteristic_gap_floor(flux: Flux, delta0, m0, grid=41, quad_order=24):
    """delta0 * min over admissible (a, b) of the double integral
    int_0^1 int_0^1 f''(b - r s (b - a)) s dr ds  (the floor for |b_pm|)."""
    if delta0 <= 0:
        raise InadmissibleStateError("jump floor must be positive")
    lo, hi = -2.0 * m0, 2.0 * m0
    xg, wg = quadrature.leggauss(quad_order)
    r = 0.5 * (xg + 1.0)
    wr = 0.5 * wg
    s = 0.5 * (xg + 1.0)
    ws = 0.5 * wg * s  # weight s absorbed
    best = math.inf
    a_vals = np.linspace(lo, hi, grid)
    for a in a_vals:
        b_lo = max(a + delta0, lo)
        if b_lo > hi:
            continue
        for b in np.linspace(b_lo, hi, grid):
            # f'' on the (r, s) tensor grid
            args = b - np.outer(r, s) * (b - a)
            val = float(ws @ (wr @ flux.eval(args, 2)))
            best = min(best, val)
    if not math.isfinite(best) or best <= 0.0:
        raise InadmissibleStateError("characteristic gap floor is not positive")
    return delta0 * best


def shock_quantities(flux: Flux, w: PiecewiseField, delta0=None, m0=None) -> ShockQuantities:
    """Jump strength, one-sided characteristic speeds, and their bounds."""
    wm, wp = w.traces
    if wm <= wp:
        raise InadmissibleStateError(
            f"entropy violation: w(0-) = {wm} <= w(0+) = {wp}")
    sigma = wm - wp
    speed = rh_speed(flux, wm, wp)
    b_minus = float(flux.eval(wm, 1)) - speed
    b_plus = float(flux.eval(wp, 1)) - speed
    if delta0 is None:
        delta0 = sigma
    if m0 is None:
        m0 = 2.0 * sobolev_norm(w, 2)
    b0 = characteristic_gap_floor(flux, delta0, m0)
    b1 = 4.0 * flux.c_norm(2, (-2.0 * m0, 2.0 * m0)) * m0
    return ShockQuantities(sigma=sigma, b_minus=b_minus, b_plus=b_plus, b0=b0, b1=b1)


def entropy_check(w: PiecewiseField, delta_floor) -> bool:
    wm, wp = w.traces
    return wm - wp > delta_floor


# ---------------------------------------------------------------------------
# Sobolev norms
# ---------------------------------------------------------------------------


def _side_square_integral(sd: SideData, order, lo, hi):
    """int_lo^hi sum_i<=order (d^i w)^2 dx on one side."""
    if hi <= lo:
        return 0.0
    if sd.profile is not None:
        def f(x):
            return sum(sd.eval(x, i) ** 2 for i in range(order + 1))
        sing = (0.0,) if lo <= 0.0 <= hi or abs(lo) < 1e-12 or abs(hi) < 1e-12 else ()
        return quadrature.integrate(f, lo, hi, singular=sing + (lo, hi), tol=1e-12)
    # spline path: integrand is piecewise polynomial of degree <= 6,
    # Gauss-Legendre 4 per knot cell is exact
    edges = np.unique(np.clip(sd.grid, lo, hi))
    edges = np.unique(np.concatenate([[lo], edges, [hi]]))
    xg, wg = quadrature.leggauss(4)
    a, b = edges[:-1], edges[1:]
    h = 0.5 * (b - a)
    nodes = (0.5 * (a + b)[:, None] + h[:, None] * xg[None, :]).ravel()
    weights = (h[:, None] * wg[None, :]).ravel()
    total = np.zeros_like(nodes)
    for i in range(order + 1):
        total += sd.eval(nodes, i) ** 2
    return float(np.dot(weights, total))


def sobolev_norm(w: PiecewiseField, order=2, excluded=None):
    """Discrete H^order norm over the domain minus a symmetric excluded
    interval (the origin itself is always excluded by the doubled node)."""
    if order not in (1, 2):
        raise RangeError("sobolev order must be 1 or 2")
    L = w.domain_half_width
    delta = 0.0
    if excluded is not None:
        d_lo, d_hi = excluded
        if abs(d_lo + d_hi) > 1e-14 or d_hi < 0:
            raise PreconditionError("excluded interval must be symmetric [-d, d]")
        delta = float(d_hi)
        if delta >= L:
            raise PreconditionError("excluded interval wider than the domain")
    total = (_side_square_integral(w.left, order, -L, -delta)
             + _side_square_integral(w.right, order, delta, L))
    return math.sqrt(max(total, 0.0))


# ---------------------------------------------------------------------------
# X_alpha perturbations
# ---------------------------------------------------------------------------


class XAlphaFunction:
    """v(x) = amplitude * |x|^alpha * bump(x), supported in [-1, 1].

    Continuous with v(0) = 0; off the origin it is C^4 with the derivative
    blow-up |x|^(alpha - i) characteristic of the class.
    """

    def __init__(self, amplitude, alpha, support_radius=1.0):
        if not (0.75 < alpha < 1.0):
            raise RangeError(f"alpha = {alpha} outside (3/4, 1)")
        if support_radius > 1.0 or support_radius <= 0.0:
            raise RangeError("support radius must lie in (0, 1]")
        self.amplitude = float(amplitude)
        self.alpha = float(alpha)
        self.support_radius = float(support_radius)
        self._bump = CutoffFunction(inner=0.5 * support_radius, outer=support_radius)

    @property
    def is_zero(self):
        return self.amplitude == 0.0

    def eval(self, x, order=0):
        if order < 0 or order > 4:
            raise RangeError("X_alpha derivative order must be in 0..4")
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        out = np.zeros_like(x)
        if self.amplitude != 0.0:
            if order > 0 and np.any(x == 0.0):
                raise DomainError("X_alpha derivatives blow up at the origin")
            ax = np.abs(x)
            safe = np.where(ax > 0, ax, 1.0)
            sgn = np.sign(x)
            for j in range(order + 1):
                # j-th derivative of |x|^alpha times (order-j)-th of the bump
                fac = 1.0
                for m in range(j):
                    fac *= self.alpha - m
                pow_term = fac * sgn ** j * safe ** (self.alpha - j)
                pow_term = np.where(ax > 0, pow_term, 0.0)
                out += math.comb(order, j) * pow_term * self._bump.eval(x, order - j)
            out *= self.amplitude
        return float(out[0]) if scalar else out

    def __call__(self, x, order=0):
        return self.eval(x, order)


def make_xalpha(amplitude, alpha) -> XAlphaFunction:
    return XAlphaFunction(amplitude, alpha)


# ---------------------------------------------------------------------------
# problem specification
# ---------------------------------------------------------------------------


@dataclass
class ProblemSpec:
    """Validated data for one shock-frame run."""

    kernel: object
    flux: Flux
    w_bar: PiecewiseField
    v_bar: Optional[XAlphaFunction]
    y0: float
    delta0: float
    m0: float
    horizon: Optional[float]  # None: start from the structural bound
    domain_half_width: float
    cutoff: CutoffFunction = field(default_factory=CutoffFunction)

    def validate(self, norm_rtol=5e-2):
        wm, wp = self.w_bar.traces
        d0 = wm - wp
        if d0 <= 0:
            raise InadmissibleStateError("initial jump must be positive (entropy)")
        if abs(d0 - self.delta0) > 1e-10 * max(1.0, abs(d0)):
            raise InadmissibleStateError("declared delta0 disagrees with the traces")
        norm = sobolev_norm(self.w_bar, 2)
        if abs(self.m0 - 2.0 * norm) > norm_rtol * max(1.0, self.m0):
            raise InadmissibleStateError(
                f"declared M0 = {self.m0} vs 2*||w||_H2 = {2.0 * norm}")
        return True


def build_problem_spec(kernel, flux, profile_left, profile_right, v_bar,
                       y0=0.0, horizon=None, grid_kwargs=None) -> ProblemSpec:
    """Materialize fields and structural constants for a run.

    The domain half-width is set so supports never reach the boundary over
    the horizon: L = 3 + 2 * b1 * T with T capped by the structural bound.
    """
    # provisional domain for the norm pass
    gk = dict(grid_kwargs or {})
    prov = PiecewiseField.from_profiles(profile_left, profile_right, L=4.0)
    wm, wp = prov.traces
    if wm <= wp:
        raise InadmissibleStateError("initial data violates the entropy condition")
    delta0 = wm - wp
    m0 = 2.0 * sobolev_norm(prov, 2)
    b1 = 4.0 * flux.c_norm(2, (-2.0 * m0, 2.0 * m0)) * m0
    t_cap = horizon if horizon is not None else 1.0 / (4.0 * b1)
    L = 3.0 + 2.0 * b1 * min(t_cap, 1.0 / (4.0 * b1)) if horizon is None else 3.0 + 2.0 * b1 * t_cap
    w_bar = PiecewiseField.from_profiles(profile_left, profile_right, L=L, **gk)
    m0 = 2.0 * sobolev_norm(w_bar, 2)
    return ProblemSpec(kernel=kernel, flux=flux, w_bar=w_bar, v_bar=v_bar,
                       y0=float(y0), delta0=float(delta0), m0=float(m0),
                       horizon=horizon, domain_half_width=L)
