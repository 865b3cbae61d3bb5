"""The explicit shock-layer corrector and its calculus.

The corrector is assembled per side from the two-argument function
phi(x, b) = eta(x) (Phi(b) - Phi(x + b)) evaluated at b = 0 and b = -t b_s
(b_s the one-sided characteristic-minus-shock speed), plus the transported
X_alpha perturbation.  Both one-sided limits at the origin vanish for all
times, so the corrector never touches the jump; its spatial derivatives are
available in closed form to order 3 and the time derivative follows from
d/db phi(x, b) = eta(x) (Lambda(b) - Lambda(x + b)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InadmissibleStateError, PreconditionError, RangeError
from .kernels import CutoffFunction, Kernel
from .singular_operator import BoundReport
from .state import XAlphaFunction

_BINOM = {0: (1,), 1: (1, 1), 2: (1, 2, 1), 3: (1, 3, 3, 1)}


@dataclass
class CorrectorParams:
    """Frozen per-time data defining the corrector."""

    kernel: Kernel
    cutoff: CutoffFunction
    sigma: float
    b_minus: float
    b_plus: float
    t: float
    v_bar: Optional[XAlphaFunction] = None
    sigma_dot: float = 0.0
    b_minus_dot: float = 0.0
    b_plus_dot: float = 0.0

    def validate(self):
        if self.sigma <= 0.0:
            raise InadmissibleStateError("corrector requires a positive jump")
        if not (self.b_plus < 0.0 < self.b_minus):
            raise InadmissibleStateError(
                f"speed ordering violated: b- = {self.b_minus}, b+ = {self.b_plus}")
        if self.t < 0.0:
            raise RangeError("time must be nonnegative")
        if self.t * max(abs(self.b_minus), abs(self.b_plus)) >= 1.0:
            raise RangeError("t * |b| >= 1: antiderivative argument out of range")
        return self

    def side_speed(self, side):
        return self.b_minus if side < 0 else self.b_plus

    def side_speed_dot(self, side):
        return self.b_minus_dot if side < 0 else self.b_plus_dot


def _phi_xb_terms(kernel, cutoff, x, b, order):
    """d^order/dx^order of eta(x) (Phi(b) - Phi(x+b)), vectorized; the caller
    guarantees x + b != 0 wherever a kernel factor carries weight."""
    x = np.asarray(x, dtype=float)
    gap = kernel.phi(np.asarray([b]))[0] - kernel.phi(x + b)
    etas = [cutoff.eval(x, i) for i in range(order + 1)]
    out = etas[order] * gap
    if order >= 1:
        arg = x + b
        with np.errstate(divide="ignore", invalid="ignore"):
            chain = [kernel.lam(arg)]
            if order >= 2:
                chain.append(kernel.kde(arg, 0))
            if order >= 3:
                chain.append(kernel.kde(arg, 1))
        coefs = _BINOM[order]
        for j in range(1, order + 1):
            term = chain[j - 1]
            coef = etas[order - j]
            out = out - coefs[j] * coef * np.where(coef != 0.0, term, 0.0)
    return out


def _vbar_terms(params: CorrectorParams, x, shift, order):
    """d^order/dx^order of eta(x) [v(x - shift) - v(-shift)]."""
    v = params.v_bar
    if v is None or v.is_zero:
        return np.zeros_like(np.asarray(x, dtype=float))
    x = np.asarray(x, dtype=float)
    eta = params.cutoff
    out = eta.eval(x, order) * (-v.eval(-shift, 0))
    for j in range(order + 1):
        out = out + (math.comb(order, j) * eta.eval(x, order - j)
                     * v.eval(x - shift, j))
    return out


def corrector_eval_side(params: CorrectorParams, x, side, order=0):
    """Corrector derivative of given order on one side (x may include 0 for
    order 0; all entries are treated as lying on ``side``)."""
    x = np.asarray(x, dtype=float)
    bs = params.side_speed(side)
    shift = params.t * bs
    tilde = (params.sigma / bs) * (
        _phi_xb_terms(params.kernel, params.cutoff, x, 0.0, order)
        - _phi_xb_terms(params.kernel, params.cutoff, x, -shift, order))
    return tilde + _vbar_terms(params, x, shift, order)


def corrector_eval(params: CorrectorParams, x, order=0):
    """Corrector derivative at x (side from sign; the origin value is 0)."""
    if order not in (0, 1, 2, 3):
        raise RangeError("corrector derivative order must be in 0..3")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if order >= 1 and np.any(x == 0.0):
        raise PreconditionError("corrector derivatives need x != 0")
    out = np.empty_like(x)
    neg = x < 0
    if np.any(neg):
        out[neg] = corrector_eval_side(params, x[neg], -1, order)
    if np.any(~neg):
        out[~neg] = corrector_eval_side(params, x[~neg], +1, order)
    return float(out[0]) if scalar else out


def corrector_time_derivative_side(params: CorrectorParams, x, side):
    """d/dt of the corrector on one side, closed form (t > 0 required)."""
    if params.t <= 0.0:
        raise PreconditionError(
            "trace derivatives are undefined at t = 0 (Lipschitz bound blows up)")
    x = np.asarray(x, dtype=float)
    k, eta = params.kernel, params.cutoff
    bs = params.side_speed(side)
    bs_dot = params.side_speed_dot(side)
    sig, sig_dot, t = params.sigma, params.sigma_dot, params.t
    shift = t * bs
    rate = bs + t * bs_dot

    tilde = (sig / bs) * (_phi_xb_terms(k, eta, x, 0.0, 0)
                          - _phi_xb_terms(k, eta, x, -shift, 0))
    # d/db phi(x, b) = eta(x) (Lambda(b) - Lambda(x + b)) at b = -t b_s
    db_phi = eta.eval(x, 0) * (k.lam(np.asarray([-shift]))[0] - k.lam(x - shift))
    out = (sig_dot / sig - bs_dot / bs) * tilde + (sig / bs) * rate * db_phi
    v = params.v_bar
    if v is not None and not v.is_zero:
        out = out + rate * eta.eval(x, 0) * (v.eval(-shift, 1) - v.eval(x - shift, 1))
    return out


def corrector_time_derivative(params: CorrectorParams, x):
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if np.any(x == 0.0):
        raise PreconditionError("time derivative needs x != 0")
    out = np.empty_like(x)
    neg = x < 0
    if np.any(neg):
        out[neg] = corrector_time_derivative_side(params, x[neg], -1)
    if np.any(~neg):
        out[~neg] = corrector_time_derivative_side(params, x[~neg], +1)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# envelope probe
# ---------------------------------------------------------------------------


def _corrector_h2_off(params, delta, outer=2.0, n=400):
    """H^2 norm of the corrector over delta <= |x| <= outer (log-grid trapezoid)."""
    total = 0.0
    for side in (-1, 1):
        xs = side * np.geomspace(delta, outer, n)
        xs = np.sort(xs)
        dens = sum(corrector_eval_side(params, xs, side, i) ** 2 for i in range(3))
        total += np.trapezoid(dens, xs)
    return math.sqrt(max(total, 0.0))


def corrector_bound_check(params_at, grid, t_samples, deltas=(0.02, 0.05, 0.1),
                          keep_samples=False):
    """Fit the corrector envelopes on grid x t_samples.

    ``params_at`` is either a single CorrectorParams (frozen coefficients,
    re-timed per sample) or a callable t -> CorrectorParams.
    """
    if isinstance(params_at, CorrectorParams):
        base = params_at

        def params_fn(t):
            return CorrectorParams(
                kernel=base.kernel, cutoff=base.cutoff, sigma=base.sigma,
                b_minus=base.b_minus, b_plus=base.b_plus, t=t, v_bar=base.v_bar,
                sigma_dot=base.sigma_dot, b_minus_dot=base.b_minus_dot,
                b_plus_dot=base.b_plus_dot)
    else:
        params_fn = params_at

    grid = np.asarray(grid, dtype=float)
    if np.any(np.abs(grid) >= 0.25) or np.any(grid == 0.0):
        raise PreconditionError("probe grid must lie in 0 < |x| < 1/4")
    t_samples = np.asarray(t_samples, dtype=float)

    first = params_fn(t_samples[0])
    alpha = first.v_bar.alpha if first.v_bar is not None else 0.8
    ax = np.abs(grid)
    lg = np.abs(np.log(ax))

    xs_all, ts_all = [], []
    meas = {i: [] for i in range(4)}
    envs = {i: [] for i in range(4)}
    for t in t_samples:
        p = params_fn(t).validate()
        xs_all.append(grid)
        ts_all.append(np.full_like(grid, t))
        env_shapes = {
            0: ax * (lg + t ** (alpha - 1.0)),
            1: lg + (ax + t) ** (alpha - 1.0),
            2: 1.0 / ax + (ax + t) ** (alpha - 2.0),
            3: ax ** -2.0 + (ax + t) ** (alpha - 3.0),
        }
        for i in range(4):
            meas[i].append(corrector_eval(p, grid, i))
            envs[i].append(env_shapes[i])

    xs_all = np.concatenate(xs_all)
    ts_all = np.concatenate(ts_all)
    names = {0: ("corrector_value", "|x| (|ln|x|| + t^(a-1))"),
             1: ("corrector_dx1", "|ln|x|| + (|x|+t)^(a-1)"),
             2: ("corrector_dx2", "|x|^-1 + (|x|+t)^(a-2)"),
             3: ("corrector_dx3", "|x|^-2 + (|x|+t)^(a-3)")}
    reports = {}
    for i in range(4):
        qname, edesc = names[i]
        reports[qname] = BoundReport.fit(
            qname, edesc, xs_all, ts_all, np.concatenate(meas[i]),
            np.concatenate(envs[i]), keep_samples=keep_samples)

    h2_x, h2_t, h2_m, h2_e = [], [], [], []
    for t in t_samples:
        p = params_fn(t)
        for d in deltas:
            h2_x.append(d)
            h2_t.append(t)
            h2_m.append(_corrector_h2_off(p, d))
            h2_e.append(d ** (alpha - 1.5))
    reports["corrector_h2"] = BoundReport.fit(
        "corrector_h2", "delta^(a-3/2)", h2_x, h2_t, h2_m, h2_e,
        keep_samples=keep_samples)
    return reports
