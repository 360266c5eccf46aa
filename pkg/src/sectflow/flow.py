"""Flow and tangent-flow integration.

One Dormand-Prince 5(4) engine with PI step-size control drives every code
path: single states, single states with a tangent block (variational
equation), and ensembles of either, all with shared adaptive steps.  Step
control looks only at the state error, so the state output of
:func:`tangent_advance` is bit-identical to :func:`advance` at the same
tolerance.  Accepted steps can be observed through a callback carrying the
endpoint derivatives, which supports cubic Hermite dense output (sampling,
event location, cell registration), and the engine can be asked to land
exactly on a sorted list of stop times.

Backward time integrates the negated field with the same stepper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .fields import VectorFieldSpec

__all__ = [
    "FlowError",
    "OrbitSegment",
    "advance",
    "tangent_advance",
    "advance_ensemble",
    "tangent_advance_ensemble",
    "orbit_sample",
    "hermite_eval",
    "section_crossings",
    "FRAME_LIMIT",
]


class FlowError(RuntimeError):
    pass


#: tangent entries beyond this raise, pointing at QR-based pipelines
FRAME_LIMIT = 1e300

# Dormand-Prince 5(4) coefficients
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71 / 57600,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0
_MAX_STEPS = 50_000_000


def _err_norm(e, y0, y1, tol):
    scale = tol * (1.0 + np.maximum(np.abs(y0), np.abs(y1)))
    return float(np.max(np.abs(e) / scale))


def _initial_step(f, y0, f0, tol, t_end):
    scale = tol * (1.0 + np.abs(y0))
    d0 = float(np.max(np.abs(y0) / scale))
    d1 = float(np.max(np.abs(f0) / scale))
    h0 = 1e-6 if d1 <= 1e-15 else 0.01 * d0 / d1
    h0 = min(h0, t_end)
    y1 = y0 + h0 * f0
    f1 = f(y1)
    d2 = float(np.max(np.abs(f1 - f0) / scale)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, t_end)


def _integrate(field: VectorFieldSpec, y0, V0, t_end, tol,
               stops=None, stop_cb=None, step_cb=None, h_max=None):
    """Core DP5(4) loop over [0, t_end] with t_end > 0.

    y0: (..., d) state block; V0: optional (..., d, k) tangent block whose
    stage derivatives use the Jacobian at the state stages and never enter
    the error estimate.  stops: sorted times in (0, t_end] hit exactly, each
    reported through stop_cb(index, t, y, V).  step_cb(t0, t1, y0, y1, f0,
    f1) fires on every accepted step.
    """
    f = field.field_eval
    jac = field.jacobian_eval if V0 is not None else None
    y = np.array(y0, dtype=float, copy=True)
    V = None if V0 is None else np.array(V0, dtype=float, copy=True)
    if not np.all(np.isfinite(y)):
        raise FlowError("non-finite initial state")
    if t_end == 0.0:
        return y, V

    stops = np.asarray(stops, dtype=float) if stops is not None else np.empty(0)
    i_stop = 0
    t = 0.0
    f0 = f(y)
    kv1 = None if V is None else jac(y) @ V
    h = _initial_step(f, y, f0, tol, t_end)
    if h_max is not None and h > h_max:
        h = h_max
    err_prev = 1.0
    n_steps = 0

    while t < t_end:
        n_steps += 1
        if n_steps > _MAX_STEPS:
            raise FlowError(f"step budget exhausted at t={t:.6g}")
        if h_max is not None and h > h_max:
            h = h_max
        # clamp to the next stop / the end
        t_target = t_end if i_stop >= len(stops) else stops[i_stop]
        h_free = h
        if t + h >= t_target:
            h = t_target - t
            hit_target = True
        else:
            hit_target = False
            if h < 1e-13 * max(1.0, abs(t)):
                raise FlowError(f"step size underflow at t={t:.6g}")

        y2 = y + (h * _A21) * f0
        k2 = f(y2)
        y3 = y + h * (_A31 * f0 + _A32 * k2)
        k3 = f(y3)
        y4 = y + h * (_A41 * f0 + _A42 * k2 + _A43 * k3)
        k4 = f(y4)
        y5 = y + h * (_A51 * f0 + _A52 * k2 + _A53 * k3 + _A54 * k4)
        k5 = f(y5)
        y6 = y + h * (_A61 * f0 + _A62 * k2 + _A63 * k3 + _A64 * k4 + _A65 * k5)
        k6 = f(y6)
        y_new = y + h * (_B1 * f0 + _B3 * k3 + _B4 * k4 + _B5 * k5 + _B6 * k6)
        k7 = f(y_new)
        e = h * (_E1 * f0 + _E3 * k3 + _E4 * k4 + _E5 * k5 + _E6 * k6 + _E7 * k7)
        if not np.all(np.isfinite(y_new)):
            err = np.inf
        else:
            err = _err_norm(e, y, y_new, tol)

        if err > 1.0:
            factor = max(_MIN_FACTOR, _SAFETY * (err ** -0.2)) if np.isfinite(err) else _MIN_FACTOR
            h *= factor
            if h < 1e-15 * max(1.0, abs(t)):
                raise FlowError(f"step size underflow at t={t:.6g}")
            continue

        if V is not None:
            kv2 = jac(y2) @ (V + (h * _A21) * kv1)
            kv3 = jac(y3) @ (V + h * (_A31 * kv1 + _A32 * kv2))
            kv4 = jac(y4) @ (V + h * (_A41 * kv1 + _A42 * kv2 + _A43 * kv3))
            kv5 = jac(y5) @ (V + h * (_A51 * kv1 + _A52 * kv2 + _A53 * kv3 + _A54 * kv4))
            kv6 = jac(y6) @ (V + h * (_A61 * kv1 + _A62 * kv2 + _A63 * kv3
                                      + _A64 * kv4 + _A65 * kv5))
            V = V + h * (_B1 * kv1 + _B3 * kv3 + _B4 * kv4 + _B5 * kv5 + _B6 * kv6)
            if not np.all(np.isfinite(V)) or np.max(np.abs(V)) > FRAME_LIMIT:
                raise FlowError(
                    f"tangent frame overflow at t={t + h:.6g}; "
                    "use a renormalized (QR) propagation for long horizons"
                )
            kv1 = jac(y_new) @ V

        t_new = t_target if hit_target else t + h
        if step_cb is not None:
            step_cb(t, t_new, y, y_new, f0, k7)
        y, f0 = y_new, k7
        t = t_new
        if hit_target and i_stop < len(stops) and t == stops[i_stop]:
            if stop_cb is not None:
                stop_cb(i_stop, t, y, V)
            i_stop += 1

        if hit_target:
            # the clamped step says little about accuracy; keep the free size
            h = h_free
        else:
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * (err ** -_PI_ALPHA) * (err_prev ** _PI_BETA)
            h = h * min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            err_prev = max(err, 1e-10)

    return y, V


def _run(field, y0, V0, t, tol, stops=None, stop_cb=None, step_cb=None, h_max=None):
    """Dispatch on sign of t. For t < 0 the negated field is integrated and
    any stops/callback times are in the backward clock (positive)."""
    if not np.isfinite(t):
        raise FlowError("non-finite integration time")
    if t >= 0:
        return _integrate(field, y0, V0, t, tol, stops, stop_cb, step_cb, h_max)
    return _integrate(field.negated(), y0, V0, -t, tol, stops, stop_cb, step_cb, h_max)


def _kernel_run(field, y0, V0, t, tol, stops=None, h_max=None):
    """Compiled single-orbit path; None when unavailable for this call.

    Falls back to the numpy engine for ensembles, fields without a kernel
    payload, and builds without numba.
    """
    if not _kernels.HAVE_NUMBA or field.kernel is None:
        return None
    y0 = np.asarray(y0, dtype=float)
    if y0.ndim != 1:
        return None
    kind, sgn, fp, comp, coef, expo, jcomp, jcoef, jexpo, jvar = field.kernel
    if t < 0:
        sgn = -sgn
    d = y0.shape[0]
    with_tangent = V0 is not None
    V = np.asarray(V0, dtype=float) if with_tangent else np.zeros((d, 0))
    stops = np.asarray(stops, dtype=float) if stops is not None else np.empty(0)
    out_states = np.empty((len(stops), d))
    out_frames = np.empty((len(stops), d, V.shape[1]))
    status, t_fail, y, W = _kernels.dp5_orbit(
        kind, sgn, fp, comp, coef, expo, jcomp, jcoef, jexpo, jvar,
        y0, V, abs(float(t)), tol, stops, out_states, out_frames,
        with_tangent, FRAME_LIMIT, 0.0 if h_max is None else float(h_max),
    )
    if status == _kernels.ERR_UNDERFLOW:
        raise FlowError(f"step size underflow at t={t_fail:.6g}")
    if status == _kernels.ERR_BUDGET:
        raise FlowError(f"step budget exhausted at t={t_fail:.6g}")
    if status == _kernels.ERR_FRAMES:
        raise FlowError(
            f"tangent frame overflow at t={t_fail:.6g}; "
            "use a renormalized (QR) propagation for long horizons"
        )
    if status == _kernels.ERR_NONFINITE:
        raise FlowError("non-finite initial state")
    return y, (W if with_tangent else None), out_states, out_frames


def advance(field: VectorFieldSpec, x, t: float, tol: float = 1e-9, h_max: float | None = None):
    """State of the flow at time t from x (negative t integrates -X)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not np.isfinite(t):
        raise FlowError("non-finite integration time")
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        return x.copy()
    res = _kernel_run(field, x, None, float(t), tol, h_max=h_max)
    if res is not None:
        return res[0]
    y, _ = _run(field, x, None, float(t), tol, h_max=h_max)
    return y


def tangent_advance(field: VectorFieldSpec, x, V, t: float, tol: float = 1e-9,
                    h_max: float | None = None):
    """Flow the state and a tangent block V (d x k) simultaneously.

    Returns (state, tangent image).  The state component is bit-identical
    to advance() at the same tolerance: the step controller never sees V.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.shape[0] != x.shape[-1]:
        raise ValueError("tangent block must have d rows")
    if t == 0.0:
        return x.copy(), V.copy()
    res = _kernel_run(field, x, V, float(t), tol, h_max=h_max)
    if res is not None:
        return res[0], res[1]
    y, W = _run(field, x, V, float(t), tol, h_max=h_max)
    return y, W


def advance_ensemble(field, X, t, tol=1e-9, stops=None, stop_cb=None, step_cb=None,
                     h_max=None):
    """Advance states X of shape (N, d) together with a shared adaptive step.

    The step error is the max over the ensemble, so every member is
    integrated at least as accurately as alone.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y, _ = _run(field, X, None, float(t), tol, stops=stops, stop_cb=stop_cb,
                step_cb=step_cb, h_max=h_max)
    return Y


def tangent_advance_ensemble(field, X, V, t, tol=1e-9, stops=None, stop_cb=None,
                             h_max=None):
    """Ensemble version of tangent_advance: X (N, d), V (N, d, k)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.asarray(V, dtype=float)
    Y, W = _run(field, X, V, float(t), tol, stops=stops, stop_cb=stop_cb, h_max=h_max)
    return Y, W


def hermite_eval(t0, t1, y0, y1, f0, f1, t):
    """Cubic Hermite interpolant between accepted step endpoints."""
    h = t1 - t0
    s = (np.asarray(t, dtype=float) - t0) / h
    s = s[..., None] if np.ndim(s) else s
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + (h10 * h) * f0 + h01 * y1 + (h11 * h) * f1


@dataclass
class OrbitSegment:
    """Time-stamped states along the flow, optionally with tangent frames.

    frames[i] is the cumulative tangent map from times[0] to times[i]
    (frames[0] is the identity); they are raw products, never
    re-orthonormalized, so long horizons belong to the QR pipelines.
    """

    times: np.ndarray
    states: np.ndarray
    frames: np.ndarray | None = None
    field_ref: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or len(self.times) != len(self.states):
            raise ValueError("times and states must align")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.frames is not None:
            self.frames = np.asarray(self.frames, dtype=float)
            if not np.all(np.isfinite(self.frames)):
                raise ValueError("frames contain non-finite entries")

    @property
    def dimension(self):
        return self.states.shape[1]

    @property
    def dt(self):
        """Uniform sample spacing, or None if non-uniform."""
        d = np.diff(self.times)
        if len(d) == 0:
            return None
        return float(d[0]) if np.allclose(d, d[0], rtol=1e-9, atol=1e-12) else None


def orbit_sample(field: VectorFieldSpec, x0, t_total: float, dt_sample: float,
                 transient: float = 0.0, with_frames: bool = False,
                 tol: float = 1e-9, h_max: float | None = None) -> OrbitSegment:
    """Sample the orbit of x0 every dt_sample over a window of t_total.

    The first sample is the state after the transient; sample times are hit
    exactly by step clamping (no interpolation error).  With frames, the
    cumulative tangent map is carried along raw; overflow past 1e300 raises.
    """
    if dt_sample <= 0:
        raise ValueError("dt_sample must be positive")
    if t_total < dt_sample:
        raise ValueError("t_total must be at least dt_sample")
    x = np.asarray(x0, dtype=float)
    if transient > 0:
        x = advance(field, x, transient, tol=tol)
    m = int(round(t_total / dt_sample))
    if abs(m * dt_sample - t_total) > 1e-9 * max(1.0, t_total):
        m = int(np.floor(t_total / dt_sample))
    stops = dt_sample * np.arange(1, m + 1)
    d = field.dimension
    states = np.empty((m + 1, d))
    states[0] = x
    frames = None
    V0 = None
    if with_frames:
        frames = np.empty((m + 1, d, d))
        frames[0] = np.eye(d)
        V0 = np.eye(d)

    res = _kernel_run(field, x, V0, float(stops[-1]), tol, stops=stops, h_max=h_max)
    if res is not None:
        states[1:] = res[2]
        if with_frames:
            frames[1:] = res[3]
    else:
        def cb(i, t, y, V):
            states[i + 1] = y
            if with_frames:
                frames[i + 1] = V

        _run(field, x, V0, float(stops[-1]), tol, stops=stops, stop_cb=cb, h_max=h_max)
    times = np.concatenate([[0.0], stops])
    return OrbitSegment(times=times, states=states, frames=frames, field_ref=field.name)


def section_crossings(field: VectorFieldSpec, x0, t_span: float, normal, offset: float,
                      direction: int = 0, tol: float = 1e-9):
    """Times and states where the orbit crosses the plane normal.x = offset.

    direction > 0 keeps upward crossings only, < 0 downward, 0 both.
    Crossing times come from dense output: sign changes of the plane
    function over accepted steps, refined on the Hermite cubic by bisection.
    """
    normal = np.asarray(normal, dtype=float)
    hits_t, hits_x = [], []

    def g_of(y):
        return y @ normal - offset

    def cb(t0, t1, y0, y1, f0, f1):
        g0, g1 = g_of(y0), g_of(y1)
        if g0 == 0.0:
            return
        if g0 * g1 > 0:
            return
        if direction > 0 and g1 < g0:
            return
        if direction < 0 and g1 > g0:
            return
        a, b = t0, t1
        ga = g0
        for _ in range(60):
            mid = 0.5 * (a + b)
            gm = g_of(hermite_eval(t0, t1, y0, y1, f0, f1, mid))
            if ga * gm <= 0:
                b = mid
            else:
                a, ga = mid, gm
            if b - a < 1e-12 * max(1.0, abs(t1)):
                break
        tc = 0.5 * (a + b)
        hits_t.append(tc)
        hits_x.append(hermite_eval(t0, t1, y0, y1, f0, f1, tc))

    _run(field, np.asarray(x0, dtype=float), None, float(t_span), tol, step_cb=cb)
    if not hits_t:
        d = field.dimension
        return np.empty(0), np.empty((0, d))
    return np.asarray(hits_t), np.asarray(hits_x)
