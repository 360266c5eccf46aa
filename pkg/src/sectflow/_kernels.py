"""Numba kernels for single-orbit integration.

The numpy engine in flow.py is shape-generic and serves ensembles well, but
a long single orbit (Lyapunov horizons, close-return scans) is sequential
and Python-loop bound.  These kernels run the same Dormand-Prince 5(4) / PI
scheme for the two field families that carry compiled evaluators (the
built-in Lorenz family and polynomial term lists).  The state arithmetic is
shared between the plain and the tangent variant, so the bit-identity of
advance vs tangent_advance holds on this path too.

Everything here is dispatched from flow.py; nothing is public API.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f

        return wrap if not (len(a) == 1 and callable(a[0])) else a[0]


KIND_LORENZ = 0
KIND_POLY = 1

OK = 0
ERR_UNDERFLOW = 1
ERR_BUDGET = 2
ERR_FRAMES = 3
ERR_NONFINITE = 4

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0
_MAX_STEPS = 50_000_000


@njit(cache=True)
def _field(kind, sgn, fp, comp, coef, expo, y, out):
    d = y.shape[0]
    if kind == KIND_LORENZ:
        s = fp[0]
        r = fp[1]
        b = fp[2]
        out[0] = s * (y[1] - y[0])
        out[1] = y[0] * (r - y[2]) - y[1]
        out[2] = y[0] * y[1] - b * y[2]
    else:
        for i in range(d):
            out[i] = 0.0
        for t in range(comp.shape[0]):
            m = coef[t]
            for j in range(d):
                e = expo[t, j]
                for _ in range(e):
                    m *= y[j]
            out[comp[t]] += m
    if sgn < 0.0:
        for i in range(d):
            out[i] = -out[i]


@njit(cache=True)
def _jac_mul(kind, sgn, fp, jcomp, jcoef, jexpo, jvar, y, V, out):
    """out = J(y) @ V with V of shape (d, k)."""
    d = y.shape[0]
    k = V.shape[1]
    if kind == KIND_LORENZ:
        s = fp[0]
        r = fp[1]
        b = fp[2]
        for c in range(k):
            v0 = V[0, c]
            v1 = V[1, c]
            v2 = V[2, c]
            out[0, c] = s * (v1 - v0)
            out[1, c] = (r - y[2]) * v0 - v1 - y[0] * v2
            out[2, c] = y[1] * v0 + y[0] * v1 - b * v2
    else:
        for i in range(d):
            for c in range(k):
                out[i, c] = 0.0
        for t in range(jcomp.shape[0]):
            m = jcoef[t]
            for j in range(d):
                e = jexpo[t, j]
                for _ in range(e):
                    m *= y[j]
            i = jcomp[t]
            jv = jvar[t]
            for c in range(k):
                out[i, c] += m * V[jv, c]
    if sgn < 0.0:
        for i in range(d):
            for c in range(k):
                out[i, c] = -out[i, c]


@njit(cache=True)
def dp5_orbit(kind, sgn, fp, comp, coef, expo, jcomp, jcoef, jexpo, jvar,
              y0, V0, t_end, tol, stops, out_states, out_frames,
              with_tangent, frame_limit, h_max):
    """Integrate to t_end > 0, landing exactly on each stop.

    out_states (n_stops, d) and, with_tangent, out_frames (n_stops, d, k)
    receive the values at the stops.  h_max <= 0 disables the step cap.
    Returns (status, t_fail, y, V).
    """
    d = y0.shape[0]
    k = V0.shape[1]
    y = y0.copy()
    V = V0.copy()
    for i in range(d):
        if not np.isfinite(y[i]):
            return ERR_NONFINITE, 0.0, y, V

    f0 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    k5 = np.empty(d)
    k6 = np.empty(d)
    k7 = np.empty(d)
    yt = np.empty(d)
    ynew = np.empty(d)
    kv1 = np.empty((d, k))
    kv2 = np.empty((d, k))
    kv3 = np.empty((d, k))
    kv4 = np.empty((d, k))
    kv5 = np.empty((d, k))
    kv6 = np.empty((d, k))
    Vt = np.empty((d, k))
    Vnew = np.empty((d, k))

    _field(kind, sgn, fp, comp, coef, expo, y, f0)
    if with_tangent:
        _jac_mul(kind, sgn, fp, jcomp, jcoef, jexpo, jvar, y, V, kv1)

    # initial step size
    d0 = 0.0
    d1 = 0.0
    for i in range(d):
        sc = tol * (1.0 + abs(y[i]))
        a0 = abs(y[i]) / sc
        a1 = abs(f0[i]) / sc
        if a0 > d0:
            d0 = a0
        if a1 > d1:
            d1 = a1
    h0 = 1e-6 if d1 <= 1e-15 else 0.01 * d0 / d1
    if h0 > t_end:
        h0 = t_end
    for i in range(d):
        yt[i] = y[i] + h0 * f0[i]
    _field(kind, sgn, fp, comp, coef, expo, yt, k2)
    d2 = 0.0
    for i in range(d):
        sc = tol * (1.0 + abs(y[i]))
        a2 = abs(k2[i] - f0[i]) / sc
        if a2 > d2:
            d2 = a2
    d2 /= h0
    dm = d1 if d1 > d2 else d2
    h1 = max(1e-6, h0 * 1e-3) if dm <= 1e-15 else (0.01 / dm) ** 0.2
    h = min(100.0 * h0, min(h1, t_end))
    if h_max > 0.0 and h > h_max:
        h = h_max

    t = 0.0
    err_prev = 1.0
    i_stop = 0
    n_stops = stops.shape[0]
    n_steps = 0

    while t < t_end:
        n_steps += 1
        if n_steps > _MAX_STEPS:
            return ERR_BUDGET, t, y, V
        if h_max > 0.0 and h > h_max:
            h = h_max
        t_target = t_end if i_stop >= n_stops else stops[i_stop]
        h_free = h
        hit = False
        if t + h >= t_target:
            h = t_target - t
            hit = True
        else:
            if h < 1e-13 * max(1.0, abs(t)):
                return ERR_UNDERFLOW, t, y, V

        # stages (state part identical with and without tangent)
        for i in range(d):
            yt[i] = y[i] + (h * (1.0 / 5.0)) * f0[i]
        _field(kind, sgn, fp, comp, coef, expo, yt, k2)
        y2 = yt.copy()
        for i in range(d):
            yt[i] = y[i] + h * ((3.0 / 40.0) * f0[i] + (9.0 / 40.0) * k2[i])
        _field(kind, sgn, fp, comp, coef, expo, yt, k3)
        y3 = yt.copy()
        for i in range(d):
            yt[i] = y[i] + h * ((44.0 / 45.0) * f0[i] + (-56.0 / 15.0) * k2[i]
                                + (32.0 / 9.0) * k3[i])
        _field(kind, sgn, fp, comp, coef, expo, yt, k4)
        y4 = yt.copy()
        for i in range(d):
            yt[i] = y[i] + h * ((19372.0 / 6561.0) * f0[i] + (-25360.0 / 2187.0) * k2[i]
                                + (64448.0 / 6561.0) * k3[i] + (-212.0 / 729.0) * k4[i])
        _field(kind, sgn, fp, comp, coef, expo, yt, k5)
        y5 = yt.copy()
        for i in range(d):
            yt[i] = y[i] + h * ((9017.0 / 3168.0) * f0[i] + (-355.0 / 33.0) * k2[i]
                                + (46732.0 / 5247.0) * k3[i] + (49.0 / 176.0) * k4[i]
                                + (-5103.0 / 18656.0) * k5[i])
        _field(kind, sgn, fp, comp, coef, expo, yt, k6)
        y6 = yt.copy()
        for i in range(d):
            ynew[i] = y[i] + h * ((35.0 / 384.0) * f0[i] + (500.0 / 1113.0) * k3[i]
                                  + (125.0 / 192.0) * k4[i] + (-2187.0 / 6784.0) * k5[i]
                                  + (11.0 / 84.0) * k6[i])
        _field(kind, sgn, fp, comp, coef, expo, ynew, k7)

        err = 0.0
        bad = False
        for i in range(d):
            if not np.isfinite(ynew[i]):
                bad = True
                break
            e = h * ((71.0 / 57600.0) * f0[i] + (-71.0 / 16695.0) * k3[i]
                     + (71.0 / 1920.0) * k4[i] + (-17253.0 / 339200.0) * k5[i]
                     + (22.0 / 525.0) * k6[i] + (-1.0 / 40.0) * k7[i])
            ay = abs(y[i])
            an = abs(ynew[i])
            sc = tol * (1.0 + (ay if ay > an else an))
            r = abs(e) / sc
            if r > err:
                err = r

        if bad or err > 1.0:
            factor = _MIN_FACTOR if bad else max(_MIN_FACTOR, _SAFETY * err ** -0.2)
            h *= factor
            if h < 1e-15 * max(1.0, abs(t)):
                return ERR_UNDERFLOW, t, y, V
            continue

        if with_tangent:
            for i in range(d):
                for c in range(k):
                    Vt[i, c] = V[i, c] + (h * (1.0 / 5.0)) * kv1[i, c]
            _jac_mul(kind, sgn, fp, jcomp, jcoef, jexpo, jvar, y2, Vt, kv2)
            for i in range(d):
                for c in range(k):
                    Vt[i, c] = V[i, c] + h * ((3.0 / 40.0) * kv1[i, c]
                                              + (9.0 / 40.0) * kv2[i, c])
            _jac_mul(kind, sgn, fp, jcomp, jcoef, jexpo, jvar, y3, Vt, kv3)
            for i in range(d):
                for c in range(k):
                    Vt[i, c] = V[i, c] + h * ((44.0 / 45.0) * kv1[i, c]
                                              + (-56.0 / 15.0) * kv2[i, c]
                                              + (32.0 / 9.0) * kv3[i, c])
            _jac_mul(kind, sgn, fp, jcomp, jcoef, jexpo, jvar, y4, Vt, kv4)
            for i in range(d):
                for c in range(k):
                    Vt[i, c] = V[i, c] + h * ((19372.0 / 6561.0) * kv1[i, c]
                                              + (-25360.0 / 2187.0) * kv2[i, c]
                                              + (64448.0 / 6561.0) * kv3[i, c]
                                              + (-212.0 / 729.0) * kv4[i, c])
            _jac_mul(kind, sgn, fp, jcomp, jcoef, jexpo, jvar, y5, Vt, kv5)
            for i in range(d):
                for c in range(k):
                    Vt[i, c] = V[i, c] + h * ((9017.0 / 3168.0) * kv1[i, c]
                                              + (-355.0 / 33.0) * kv2[i, c]
                                              + (46732.0 / 5247.0) * kv3[i, c]
                                              + (49.0 / 176.0) * kv4[i, c]
                                              + (-5103.0 / 18656.0) * kv5[i, c])
            _jac_mul(kind, sgn, fp, jcomp, jcoef, jexpo, jvar, y6, Vt, kv6)
            vmax = 0.0
            for i in range(d):
                for c in range(k):
                    Vnew[i, c] = V[i, c] + h * ((35.0 / 384.0) * kv1[i, c]
                                                + (500.0 / 1113.0) * kv3[i, c]
                                                + (125.0 / 192.0) * kv4[i, c]
                                                + (-2187.0 / 6784.0) * kv5[i, c]
                                                + (11.0 / 84.0) * kv6[i, c])
                    av = abs(Vnew[i, c])
                    if not np.isfinite(av) or av > vmax:
                        vmax = av
            if not np.isfinite(vmax) or vmax > frame_limit:
                return ERR_FRAMES, t + h, y, V
            for i in range(d):
                for c in range(k):
                    V[i, c] = Vnew[i, c]
            _jac_mul(kind, sgn, fp, jcomp, jcoef, jexpo, jvar, ynew, V, kv1)

        t = t_target if hit else t + h
        for i in range(d):
            y[i] = ynew[i]
            f0[i] = k7[i]

        if hit and i_stop < n_stops and t == stops[i_stop]:
            for i in range(d):
                out_states[i_stop, i] = y[i]
            if with_tangent:
                for i in range(d):
                    for c in range(k):
                        out_frames[i_stop, i, c] = V[i, c]
            i_stop += 1

        if hit:
            h = h_free
        else:
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * err ** (-_PI_ALPHA) * err_prev ** _PI_BETA
            if factor > _MAX_FACTOR:
                factor = _MAX_FACTOR
            if factor < _MIN_FACTOR:
                factor = _MIN_FACTOR
            h = h * factor
            err_prev = err if err > 1e-10 else 1e-10

    return OK, t, y, V
