"""The transport source F = A + B - C.

A carries the nonlocal action on the corrector, B is the regular part of
the nonlocal action on the H^2 remainder after extracting the logarithmic
jump response, and C collects the corrector's advective derivative together
with the same logarithmic term, so the three pieces are individually tame
near the shock even though the raw operator diverges there.

Two evaluation paths exist throughout: accurate per-point quadrature (the
reference, used by probes and cross-checks) and a vectorized slice
evaluator with precomputed node tables (the solver's hot loop).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import quadrature
from .corrector import (
    CorrectorParams,
    corrector_eval,
    corrector_eval_side,
    corrector_time_derivative_side,
)
from .errors import PreconditionError
from .kernels import CutoffFunction, Kernel
from .singular_operator import (
    BoundReport,
    SampledField,
    g_apply_jump_form,
    g_apply_pv,
    g_prime_jump_form,
)
from .state import Flux, PiecewiseField, rh_speed

_ORIGIN_EPS = 1e-9  # offset for evaluating one-sided origin limits of F


# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------


@dataclass
class SourceContext:
    """Everything needed to evaluate F(t, x, w) at one time."""

    kernel: Kernel
    cutoff: CutoffFunction
    flux: Flux
    w: PiecewiseField
    params: CorrectorParams
    t: float

    def __post_init__(self):
        wm, wp = self.w.traces
        if wm <= wp:
            raise PreconditionError("source context needs an entropic state")
        self.rh = rh_speed(self.flux, wm, wp)
        sig = wm - wp
        if abs(sig - self.params.sigma) > 1e-7 * max(1.0, abs(sig)):
            raise PreconditionError("corrector params inconsistent with traces")

    def b_field(self, x, side=None):
        """b(t, x) = f'(w(t, x)) - (shock speed)."""
        return self.flux.eval(self.w.eval(x, 0, side=side), 1) - self.rh

    def corrector_field(self):
        """The corrector as an exactly differentiable compact field."""
        p = self.params

        def func(y):
            return corrector_eval(p, y, 0)

        def dfunc(y):
            return corrector_eval(p, y, 1)

        return SampledField.from_callable(
            func, dfunc, support=(-2.0, 2.0), limits=(0.0, 0.0),
            breakpoints=(0.0, -1.0, 1.0))

    def w_field(self):
        """The remainder as a SampledField over its full domain."""
        w = self.w
        L = w.domain_half_width
        for edge in (-L, L):
            if not self.kernel.is_zero and abs(float(w.eval(edge, 0, side=int(np.sign(edge))))) > 1e-8:
                raise PreconditionError(
                    "nonzero kernel requires decaying data (nonzero tail at "
                    f"x = {edge})")
        wm, wp = w.traces

        def func(y):
            y = np.asarray(y, dtype=float)
            out = np.empty_like(y)
            neg = y < 0
            out[neg] = w.eval(y[neg], 0, side=-1)
            out[~neg] = w.eval(y[~neg], 0, side=+1)
            return out

        def dfunc(y):
            y = np.asarray(y, dtype=float)
            out = np.empty_like(y)
            neg = y < 0
            out[neg] = w.eval(y[neg], 1, side=-1)
            out[~neg] = w.eval(y[~neg], 1, side=+1)
            return out

        return SampledField.from_callable(
            func, dfunc, support=(-L, L), limits=(wm, wp),
            breakpoints=(0.0,), span=(-L - 1, L + 1))


# ---------------------------------------------------------------------------
# accurate per-point operations
# ---------------------------------------------------------------------------


def _d_coefficient(ctx: SourceContext, x, side=None):
    w = ctx.w.eval(x, 0, side=side)
    phi = corrector_eval(ctx.params, x, 0) if side is None \
        else corrector_eval_side(ctx.params, np.asarray(x, dtype=float), side, 0)
    return ctx.flux.eval(w + phi, 1) - ctx.flux.eval(w, 1)


def source_A(ctx: SourceContext, x, use_pv=False, quad_tol=1e-11):
    """A = G[corrector] - (f'(w + corrector) - f'(w)) * corrector_x."""
    x = float(x)
    if x == 0.0:
        raise PreconditionError("A is evaluated off the origin")
    if ctx.kernel.is_zero:
        gphi = 0.0
    else:
        fld = ctx.corrector_field()
        gphi = (g_apply_pv(ctx.kernel, fld, x, quad_tol=quad_tol) if use_pv
                else g_apply_jump_form(ctx.kernel, fld, x, quad_tol=quad_tol))
    d = float(_d_coefficient(ctx, x))
    return gphi - d * float(corrector_eval(ctx.params, x, 1))


def source_B(ctx: SourceContext, x, quad_tol=1e-11):
    """B = G[w] + sigma * Lambda * eta: the regular part of the remainder's
    nonlocal action (the jump response is extracted analytically)."""
    x = float(x)
    if x == 0.0:
        raise PreconditionError("B is evaluated off the origin")
    if ctx.kernel.is_zero:
        return 0.0
    fld = ctx.w_field()
    sig = ctx.params.sigma

    def integrand(y):
        return fld.deriv(y) * ctx.kernel.lam(x - y)

    lo, hi = fld.support
    val = quadrature.integrate(integrand, lo, hi, singular=(0.0, x),
                               tol=quad_tol)
    eta = ctx.cutoff.eval(x)
    if eta < 1.0:
        val -= sig * float(ctx.kernel.lam(np.array([x]))[0]) * (1.0 - eta)
    return val


def source_C(ctx: SourceContext, x, path="auto"):
    """C = corrector_t + b * corrector_x + sigma * Lambda * eta.

    ``path='c1'`` uses the expanded closed form whose near-origin
    cancellations are done analytically (valid where the cutoff is 1);
    ``path='direct'`` sums the definition; ``'auto'`` picks c1 on |x| <= 1.
    """
    x = float(x)
    if x == 0.0:
        raise PreconditionError("C is evaluated off the origin")
    if ctx.params.t <= 0.0:
        raise PreconditionError("C needs t > 0 (trace derivatives undefined)")
    if path == "auto":
        path = "c1" if abs(x) <= 1.0 else "direct"
    side = -1 if x < 0 else +1
    xa = np.array([x])
    p = ctx.params
    if path == "direct":
        phi_t = corrector_time_derivative_side(p, xa, side)[0]
        phi_x = corrector_eval_side(p, xa, side, 1)[0]
        lam_eta = (float(p.kernel.lam(xa)[0]) * ctx.cutoff.eval(x)
                   if ctx.cutoff.eval(x) != 0.0 else 0.0)
        return float(phi_t + ctx.b_field(x, side=side) * phi_x + p.sigma * lam_eta)
    if path != "c1":
        raise ValueError(f"unknown C path {path!r}")
    return float(_source_C1_side(ctx, xa, side)[0])


def _source_C1_side(ctx: SourceContext, x, side):
    """Vectorized expanded form of C on one side (cutoff == 1 there)."""
    p = ctx.params
    k = p.kernel
    bs = p.side_speed(side)
    bs_dot = p.side_speed_dot(side)
    sig, sig_dot, t = p.sigma, p.sigma_dot, p.t
    shift = t * bs
    x = np.asarray(x, dtype=float)

    tilde = (sig / bs) * (_phi_pair(k, ctx.cutoff, x, 0.0)
                          - _phi_pair(k, ctx.cutoff, x, -shift))
    q = sig_dot / sig - bs_dot / bs
    phi_x = corrector_eval_side(p, x, side, 1)
    b_here = ctx.flux.eval(ctx.w.eval(x, 0, side=side), 1) - ctx.rh
    lam_shifted = k.lam(x - shift)
    vp1 = p.v_bar.eval(x - shift, 1) if (p.v_bar is not None and not p.v_bar.is_zero) \
        else np.zeros_like(x)
    e_lam = float(k.lam(np.array([-shift]))[0])
    e_v = float(p.v_bar.eval(-shift, 1)) if (p.v_bar is not None and not p.v_bar.is_zero) else 0.0
    E = (bs + t * bs_dot) * ((sig / bs) * e_lam + e_v)
    return (q * tilde + (b_here - bs) * phi_x
            - t * bs_dot * ((sig / bs) * lam_shifted + vp1) + E)


def _phi_pair(kernel, cutoff, x, b):
    return cutoff.eval(x, 0) * (kernel.phi(np.array([b]))[0] - kernel.phi(x + b))


def source_eval(ctx: SourceContext, x, quad_tol=1e-11):
    """F = A + B - C."""
    return (source_A(ctx, x, quad_tol=quad_tol) + source_B(ctx, x, quad_tol=quad_tol)
            - source_C(ctx, x))


def source_eval_ungrouped(ctx: SourceContext, x, quad_tol=1e-11):
    """The defining grouping G[phi] - d phi_x + G[w] - phi_t - b phi_x,
    assembled literally (raw G[w] including its logarithmic jump response)."""
    x = float(x)
    side = -1 if x < 0 else +1
    p = ctx.params
    if ctx.kernel.is_zero:
        graw = 0.0
        gphi = 0.0
    else:
        gphi = g_apply_jump_form(ctx.kernel, ctx.corrector_field(), x,
                                 quad_tol=quad_tol)
        graw = g_apply_jump_form(ctx.kernel, ctx.w_field(), x, quad_tol=quad_tol)
    xa = np.array([x])
    d = float(_d_coefficient(ctx, x))
    phi_x = corrector_eval_side(p, xa, side, 1)[0]
    phi_t = corrector_time_derivative_side(p, xa, side)[0]
    return gphi - d * phi_x + graw - phi_t - ctx.b_field(x, side=side) * phi_x


def source_x(ctx: SourceContext, x, quad_tol=1e-10):
    """dF/dx at x (|x| < 1 required: C is differentiated in its expanded
    form), with the nonlocal derivatives taken under the integral."""
    x = float(x)
    if not 0.0 < abs(x) < 1.0:
        raise PreconditionError("source derivative evaluated on 0 < |x| < 1")
    side = -1 if x < 0 else +1
    p = ctx.params
    xa = np.array([x])
    phi_x = corrector_eval_side(p, xa, side, 1)[0]
    phi_xx = corrector_eval_side(p, xa, side, 2)[0]
    w_val = ctx.w.eval(x, 0, side=side)
    w_x = ctx.w.eval(x, 1, side=side)
    phi_val = corrector_eval_side(p, xa, side, 0)[0]
    d = ctx.flux.eval(w_val + phi_val, 1) - ctx.flux.eval(w_val, 1)
    d_x = (ctx.flux.eval(w_val + phi_val, 2) * (w_x + phi_x)
           - ctx.flux.eval(w_val, 2) * w_x)
    if ctx.kernel.is_zero:
        gphi_x = 0.0
        gw_x = 0.0
        lam = kk = 0.0
    else:
        gphi_x = g_prime_jump_form(ctx.kernel, ctx.corrector_field(), x,
                                   quad_tol=quad_tol)
        gw_x = g_prime_jump_form(ctx.kernel, ctx.w_field(), x, quad_tol=quad_tol)
        lam = float(ctx.kernel.lam(xa)[0])
        kk = float(ctx.kernel.kde(xa, 0)[0])
    A_x = gphi_x - d_x * phi_x - d * phi_xx
    # B = G[w] + sigma Lambda eta, eta == 1 here
    B_x = gw_x + p.sigma * kk
    # C' from the expanded form
    bs = p.side_speed(side)
    bs_dot = p.side_speed_dot(side)
    sig, sig_dot, t = p.sigma, p.sigma_dot, p.t
    shift = t * bs
    q = sig_dot / sig - bs_dot / bs
    tilde_x = (sig / bs) * (
        -_lam_diff(ctx.kernel, x, 0.0) + _lam_diff(ctx.kernel, x, -shift))
    b_here = ctx.flux.eval(w_val, 1) - ctx.rh
    b_here_x = ctx.flux.eval(w_val, 2) * w_x
    vp2 = (p.v_bar.eval(x - shift, 2)
           if (p.v_bar is not None and not p.v_bar.is_zero) else 0.0)
    kk_shift = float(ctx.kernel.kde(np.array([x - shift]), 0)[0]) \
        if not ctx.kernel.is_zero else 0.0
    C_x = (q * tilde_x + b_here_x * phi_x + (b_here - bs) * phi_xx
           - t * bs_dot * ((sig / bs) * kk_shift + vp2))
    return float(A_x + B_x - C_x)


def _lam_diff(kernel, x, b):
    # d/dx [Phi(x + b)] = Lambda(x + b) on the region where eta == 1
    return float(kernel.lam(np.array([x + b]))[0])


# ---------------------------------------------------------------------------
# fast slice evaluator
# ---------------------------------------------------------------------------


class SliceEvaluator:
    """Vectorized F(t, x) on a fixed target set with precomputed quadrature.

    The node tables (targets x quadrature nodes, with kernel values folded
    into the weights) are built once per run; a slice evaluation is then one
    closed-form corrector pass plus two weighted contractions.
    """

    def __init__(self, kernel: Kernel, cutoff: CutoffFunction, flux: Flux,
                 targets, sides, support, quad_order=8, ratio=2.0,
                 depth_floor=1e-8):
        self.kernel = kernel
        self.cutoff = cutoff
        self.flux = flux
        self.targets = np.asarray(targets, dtype=float)
        self.sides = np.asarray(sides, dtype=int)
        self.x_eff = np.where(self.targets == 0.0,
                              self.sides * _ORIGIN_EPS, self.targets)
        self.support = support
        if self.kernel.is_zero:
            self.Y = self.WLam = None
        else:
            fixed = (0.0, -1.0, 1.0, -2.0, 2.0)
            self.Y, W = quadrature.graded_node_table(
                self.targets, support, fixed_breaks=fixed, ratio=ratio,
                depth_floor=depth_floor, order=quad_order,
                pad_value=support[0] - 3.0)
            diff = self.targets[:, None] - self.Y
            diff[diff == 0.0] = _ORIGIN_EPS
            self.WLam = W * kernel.lam(diff)
            self.node_neg = self.Y < 0
            pad = self.Y <= support[0] - 2.0
            self.WLam[pad] = 0.0
        self._inner = np.abs(self.x_eff) <= 1.0
        self._eta = cutoff.eval(self.x_eff, 0)
        self._lam_x = None
        if not self.kernel.is_zero:
            self._lam_x = kernel.lam(self.x_eff)

    def source_slice(self, t, params: CorrectorParams, w_eval, rh):
        """F(t, targets).

        ``w_eval(y, order, side)`` evaluates the current remainder snapshot;
        ``rh`` is its shock speed.  ``params`` must be the corrector data at
        time t (trace derivatives included).
        """
        xs = self.x_eff
        sides = self.sides
        p = params
        neg = sides < 0

        phi = np.empty_like(xs)
        phi_x = np.empty_like(xs)
        phi_t = np.empty_like(xs)
        for mask, side in ((neg, -1), (~neg, +1)):
            if np.any(mask):
                phi[mask] = corrector_eval_side(p, xs[mask], side, 0)
                phi_x[mask] = corrector_eval_side(p, xs[mask], side, 1)
                phi_t[mask] = corrector_time_derivative_side(p, xs[mask], side)

        w_here = np.empty_like(xs)
        for mask, side in ((neg, -1), (~neg, +1)):
            if np.any(mask):
                w_here[mask] = w_eval(xs[mask], 0, side)
        b_here = self.flux.eval(w_here, 1) - rh
        d_here = self.flux.eval(w_here + phi, 1) - self.flux.eval(w_here, 1)

        if self.kernel.is_zero:
            g_phi = np.zeros_like(xs)
            B = np.zeros_like(xs)
        else:
            phi_y = np.empty_like(self.Y)
            nn = self.node_neg
            phi_y[nn] = corrector_eval_side(p, self.Y[nn], -1, 1)
            phi_y[~nn] = corrector_eval_side(p, self.Y[~nn], +1, 1)
            g_phi = np.einsum("ij,ij->i", self.WLam, phi_y)
            w_y = np.empty_like(self.Y)
            w_y[nn] = w_eval(self.Y[nn], 1, -1)
            w_y[~nn] = w_eval(self.Y[~nn], 1, +1)
            B = np.einsum("ij,ij->i", self.WLam, w_y)
            outer = self._eta < 1.0
            if np.any(outer):
                B[outer] -= p.sigma * self._lam_x[outer] * (1.0 - self._eta[outer])

        A = g_phi - d_here * phi_x

        # C: expanded form inside |x| <= 1, direct definition beyond
        C = np.empty_like(xs)
        inner = self._inner
        if np.any(inner):
            C[inner] = self._c1_vals(t, p, xs[inner], sides[inner], b_here[inner])
        if np.any(~inner):
            lam_eta = np.zeros(np.sum(~inner))
            if not self.kernel.is_zero:
                eta_o = self._eta[~inner]
                nzero = eta_o > 0.0
                lam_eta[nzero] = (self._lam_x[~inner][nzero] * eta_o[nzero])
            C[~inner] = (phi_t[~inner] + b_here[~inner] * phi_x[~inner]
                         + p.sigma * lam_eta)
        return A + B - C

    def _c1_vals(self, t, p, xs, sides, b_here):
        k = self.kernel
        out = np.empty_like(xs)
        for side in (-1, 1):
            m = sides == side
            if not np.any(m):
                continue
            x = xs[m]
            bs = p.side_speed(side)
            bs_dot = p.side_speed_dot(side)
            sig, sig_dot = p.sigma, p.sigma_dot
            shift = t * bs
            tilde = (sig / bs) * (
                _phi_xb_inner(k, x, 0.0) - _phi_xb_inner(k, x, -shift))
            q = sig_dot / sig - bs_dot / bs
            phi_x = corrector_eval_side(p, x, side, 1)
            lam_shifted = k.lam(x - shift) if not k.is_zero else np.zeros_like(x)
            vp1 = (p.v_bar.eval(x - shift, 1)
                   if (p.v_bar is not None and not p.v_bar.is_zero)
                   else np.zeros_like(x))
            e_lam = float(k.lam(np.array([-shift]))[0]) if (not k.is_zero and shift != 0.0) else 0.0
            e_v = (float(p.v_bar.eval(-shift, 1))
                   if (p.v_bar is not None and not p.v_bar.is_zero and shift != 0.0) else 0.0)
            E = (bs + t * bs_dot) * ((sig / bs) * e_lam + e_v)
            out[m] = (q * tilde + (b_here[m] - bs) * phi_x
                      - t * bs_dot * ((sig / bs) * lam_shifted + vp1) + E)
        return out


def _phi_xb_inner(kernel, x, b):
    # phi(x, b) on the region where eta == 1
    return kernel.phi(np.array([b]))[0] - kernel.phi(x + b)


# ---------------------------------------------------------------------------
# envelope probe
# ---------------------------------------------------------------------------


def source_bound_check(ctx_at: Callable[[float], SourceContext], grid, t_samples,
                       ell_coefficient=0.0, deltas=(0.05, 0.1, 0.2),
                       quad_tol=1e-9, keep_samples=False):
    """Fit the source envelopes on grid x t_samples.

    ``ell_coefficient`` parameterizes the trace-Lipschitz budget
    l(t) = 2 * ell_coefficient * t^(alpha-1) carried over from the previous
    iterate; the fitted constant of each report is the new budget.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(np.abs(grid) >= 0.25) or np.any(grid == 0.0):
        raise PreconditionError("probe grid must lie in 0 < |x| < 1/4")
    t_samples = np.asarray(t_samples, dtype=float)
    first = ctx_at(t_samples[0])
    alpha = first.params.v_bar.alpha if first.params.v_bar is not None else 0.8
    ax = np.abs(grid)

    def ell(t):
        return 2.0 * ell_coefficient * t ** (alpha - 1.0)

    xs_all, ts_all, f_m, f_e, fx_m, fx_e = [], [], [], [], [], []
    h2_d, h2_t, h2_m, h2_e = [], [], [], []
    for t in t_samples:
        ctx = ctx_at(t)
        F = np.array([source_eval(ctx, x, quad_tol=quad_tol) for x in grid])
        Fx = np.array([source_x(ctx, x, quad_tol=quad_tol) for x in grid])
        xs_all.append(grid)
        ts_all.append(np.full_like(grid, t))
        f_m.append(F)
        f_e.append(ell(t) * (np.abs(ax * np.log(ax)) + t ** alpha)
                   + t ** (alpha - 1.0))
        fx_m.append(Fx)
        fx_e.append(t ** (alpha - 1.5)
                    + (ell(t) + t ** (alpha - 1.0)) * ax ** (alpha - 1.0))
        # H^2 off [-d, d] from a per-side log grid with differenced F_x
        for d in deltas:
            h2_d.append(d)
            h2_t.append(t)
            h2_m.append(_source_h2_off(ctx, d, quad_tol=quad_tol))
            h2_e.append(t ** -0.75 + (t ** (alpha - 1.0) + ell(t)) * d ** -0.75)

    reports = {
        "source_value": BoundReport.fit(
            "source_value", "l(t)(|x ln|x|| + t^a) + t^(a-1)",
            np.concatenate(xs_all), np.concatenate(ts_all),
            np.concatenate(f_m), np.concatenate(f_e), keep_samples=keep_samples),
        "source_dx": BoundReport.fit(
            "source_dx", "t^(a-3/2) + (l(t) + t^(a-1)) |x|^(a-1)",
            np.concatenate(xs_all), np.concatenate(ts_all),
            np.concatenate(fx_m), np.concatenate(fx_e), keep_samples=keep_samples),
        "source_h2": BoundReport.fit(
            "source_h2", "t^(-3/4) + (t^(a-1) + l(t)) delta^(-3/4)",
            h2_d, h2_t, h2_m, h2_e, keep_samples=keep_samples),
    }
    return reports


def _source_h2_off(ctx: SourceContext, delta, outer=0.9, n=24, quad_tol=1e-9):
    total = 0.0
    for side in (-1, 1):
        xs = np.sort(side * np.geomspace(delta, outer, n))
        F = np.array([source_eval(ctx, x, quad_tol=quad_tol) for x in xs])
        Fx = np.array([source_x(ctx, x, quad_tol=quad_tol) for x in xs])
        Fxx = np.gradient(Fx, xs)
        total += np.trapezoid(F * F + Fx * Fx + Fxx * Fxx, xs)
    return math.sqrt(max(total, 0.0))
