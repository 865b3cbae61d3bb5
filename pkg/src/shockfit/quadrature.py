"""Gauss-Legendre quadrature with geometric grading toward singular points.

Integrable endpoint singularities (logarithmic, |x|^(a-1)) are absorbed by
splitting the interval into panels whose widths shrink geometrically toward
each declared singular point, applying a fixed-order Gauss-Legendre rule per
panel, and bisecting panels until an absolute per-panel tolerance is met.
Principal-value integrals are evaluated by symmetric exclusion with
Richardson extrapolation over a halving epsilon sequence.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ConvergenceError

#: default epsilon sequence for principal-value evaluation
PV_EPS0 = 1e-2
PV_TERMS = 8


@lru_cache(maxsize=64)
def leggauss(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _graded_breaks(lo, hi, points, ratio, floor):
    """Breakpoints of [lo, hi] refined geometrically toward each point in
    ``points`` that touches the interval.  ``floor`` is the smallest panel
    width generated next to a singular point."""
    breaks = {lo, hi}
    span = hi - lo
    for p in points:
        if p < lo - 1e-300 or p > hi + 1e-300:
            # grade toward the nearer endpoint if the singularity sits just
            # outside (the integrand is still steep there)
            d = max(lo - p, p - hi)
            if d > 0.1 * span:
                continue
        for side in (-1.0, 1.0):
            d = span
            while d > floor:
                q = p + side * d
                if lo < q < hi:
                    breaks.add(q)
                d /= ratio
        if lo < p < hi:
            breaks.add(p)
    out = np.array(sorted(breaks))
    # keep panels bounded so smooth regions are still resolved
    maxw = 0.5 * span if span < 4.0 else 1.0
    panels = []
    for a, b in zip(out[:-1], out[1:]):
        if b - a <= 1e-15 * max(1.0, abs(a), abs(b)):
            continue
        k = int(np.ceil((b - a) / maxw))
        edges = np.linspace(a, b, k + 1)
        panels.extend(zip(edges[:-1], edges[1:]))
    return panels


def panel_nodes(panels, order):
    """Flatten panels into (nodes, weights) arrays for a fixed GL order."""
    xg, wg = leggauss(order)
    a = np.array([p[0] for p in panels])
    b = np.array([p[1] for p in panels])
    h = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    nodes = (mid[:, None] + h[:, None] * xg[None, :]).ravel()
    weights = (h[:, None] * wg[None, :]).ravel()
    return nodes, weights


def integrate(f, lo, hi, singular=(), tol=1e-10, order=12, ratio=3.0,
              floor_rel=1e-10, max_panels=4000):
    """Adaptive graded Gauss-Legendre integral of ``f`` over [lo, hi].

    ``f`` must accept a vector of abscissae.  ``singular`` lists points toward
    which the initial panels are graded; panels are then bisected until the
    difference between the order-``order`` and half-order rules is below
    ``tol`` on each panel.
    """
    if hi <= lo:
        return 0.0
    span = hi - lo
    floor = max(floor_rel * span, 1e-14)
    panels = _graded_breaks(lo, hi, singular, ratio, floor)

    xg_f, wg_f = leggauss(order)
    xg_c, wg_c = leggauss(max(order // 2, 2))

    def rule(a, b, xg, wg):
        h = 0.5 * (b - a)
        y = 0.5 * (a + b) + h * xg
        return h * float(np.dot(wg, f(y)))

    total = 0.0
    stack = list(panels)
    done = 0
    while stack:
        a, b = stack.pop()
        fine = rule(a, b, xg_f, wg_f)
        coarse = rule(a, b, xg_c, wg_c)
        err = abs(fine - coarse)
        if err <= tol or (b - a) <= floor or done + len(stack) >= max_panels:
            total += fine
            done += 1
        else:
            m = 0.5 * (a + b)
            stack.append((a, m))
            stack.append((m, b))
    return total


def pv_integrate(f, lo, hi, x, epsilons=None, tol=1e-8, quad_tol=1e-10,
                 order=12, breakpoints=()):
    """Principal value of ``f`` over [lo, hi] with the singular point at ``x``.

    Evaluates the symmetrically excluded integral for every epsilon in the
    (decreasing) sequence and extrapolates the O(eps) exclusion error with
    first-order Richardson on consecutive terms.  Raises ConvergenceError if
    the extrapolated values have not settled to ``tol`` by the end of the
    sequence.
    """
    if epsilons is None:
        epsilons = [PV_EPS0 * 0.5 ** j for j in range(PV_TERMS)]
    epsilons = list(epsilons)
    if any(e2 >= e1 for e1, e2 in zip(epsilons, epsilons[1:])) or epsilons[-1] <= 0:
        raise ValueError("epsilons must be positive and strictly decreasing")

    if x <= lo or x >= hi:
        # singularity outside the domain: plain (graded) integral
        return integrate(f, lo, hi, singular=(x,) + tuple(breakpoints),
                         tol=quad_tol, order=order)

    def excluded(eps):
        left = integrate(f, lo, x - eps, singular=(x - eps,) + tuple(breakpoints),
                         tol=quad_tol, order=order)
        right = integrate(f, x + eps, hi, singular=(x + eps,) + tuple(breakpoints),
                          tol=quad_tol, order=order)
        return left + right

    raw = [excluded(e) for e in epsilons]
    # first-order Richardson on a halving sequence: R_j = 2 I_{j+1} - I_j
    extr = [2.0 * b - a for a, b in zip(raw[:-1], raw[1:])]
    for prev, cur in zip(extr[:-1], extr[1:]):
        if abs(cur - prev) <= tol * max(1.0, abs(cur)):
            return cur
    if len(extr) >= 2 and abs(extr[-1] - extr[-2]) <= tol * max(1.0, abs(extr[-1])):
        return extr[-1]
    if len(extr) == 1:
        return extr[0]
    raise ConvergenceError(
        "principal-value extrapolation did not converge: last estimates "
        f"{extr[-2]:.12e}, {extr[-1]:.12e}",
        last_estimates=(extr[-2], extr[-1]),
    )


def graded_node_table(targets, support, fixed_breaks=(), ratio=2.0,
                      depth_floor=1e-8, order=8, pad_value=0.0):
    """Precomputed quadrature nodes for integrals of the form
    ``int_support g(y) * k(x_i - y) dy`` evaluated at many targets ``x_i``.

    For each target the panels are graded toward the target itself and toward
    every fixed breakpoint, so a weakly singular convolution kernel and an
    integrand with integrable blow-up at the breakpoints are both absorbed.
    Returns (Y, W) arrays of shape (n_targets, m) padded with ``pad_value``
    nodes carrying zero weight; the caller multiplies W by kernel values and
    contracts against integrand samples.
    """
    lo, hi = support
    rows_y, rows_w = [], []
    for x in np.atleast_1d(targets):
        sing = tuple(fixed_breaks) + (float(x),)
        panels = _graded_breaks(lo, hi, sing, ratio, depth_floor)
        y, w = panel_nodes(panels, order)
        rows_y.append(y)
        rows_w.append(w)
    m = max(len(r) for r in rows_y)
    Y = np.full((len(rows_y), m), pad_value)
    W = np.zeros((len(rows_y), m))
    for i, (y, w) in enumerate(zip(rows_y, rows_w)):
        Y[i, :len(y)] = y
        W[i, :len(w)] = w
    return Y, W
