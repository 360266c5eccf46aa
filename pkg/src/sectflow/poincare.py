"""Normal-bundle projection, linear Poincare flow, scaled cocycle
exponents, quasi-hyperbolic segment checks, and hyperbolic-time scans.

The normal space at a regular point is the orthogonal complement of the
flow direction; tangent vectors are pushed by the variational flow and
projected back.  The scaled cocycle divides by the flow-speed ratio, which
removes the neutral direction's growth and keeps the cocycle bounded
through slow passages near equilibria.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .fields import VectorFieldSpec
from .flow import OrbitSegment, advance, tangent_advance
from .spectra import window_products

__all__ = [
    "PoincareError",
    "NormalFrame",
    "NormalCocycle",
    "LPFReport",
    "QHReport",
    "normal_frame",
    "project_normal",
    "lpf",
    "scaled_lpf",
    "lpf_exponents",
    "normal_cocycle",
    "normal_splitting",
    "quasi_hyperbolic_check",
    "hyperbolic_time_scan",
    "DEFAULT_TOL_REG",
]

#: default minimum flow speed for normal-frame operations
DEFAULT_TOL_REG = 1e-6

_JCAP = 0.25


class PoincareError(RuntimeError):
    pass


@dataclass
class NormalFrame:
    """Orthonormal basis of the normal space at a regular point.

    basis rows span X(base)^perp; flow is the unit flow direction.
    """

    base: np.ndarray
    flow: np.ndarray
    speed: float
    basis: np.ndarray  # (d-1, d)


def normal_frame(fld: VectorFieldSpec, x, tol_reg: float = DEFAULT_TOL_REG) -> NormalFrame:
    """Deterministic normal frame at x via a Householder reflection."""
    x = np.asarray(x, dtype=float)
    v = fld(x)
    s = float(np.linalg.norm(v))
    if s <= tol_reg:
        raise PoincareError(
            f"normal frame undefined near a singularity (|X| = {s:.3g} <= {tol_reg:.3g})"
        )
    u = v / s
    d = len(u)
    h = u.copy()
    h[0] += 1.0 if u[0] >= 0 else -1.0
    H = np.eye(d) - 2.0 * np.outer(h, h) / (h @ h)
    return NormalFrame(base=x, flow=u, speed=s, basis=H[:, 1:].T.copy())


def project_normal(fld: VectorFieldSpec, x, v, tol_reg: float = DEFAULT_TOL_REG) -> np.ndarray:
    """Orthogonal projection of a tangent vector onto the normal space.

    Returns the (d-1,) coordinates in the frame of normal_frame(x); the
    coordinate norm equals the norm of the ambient projection and is never
    larger than |v|.
    """
    fr = normal_frame(fld, x, tol_reg=tol_reg)
    return fr.basis @ np.asarray(v, dtype=float)


def _lpf_raw(fld, x, v_coords, t, tol, tol_reg):
    fr0 = normal_frame(fld, x, tol_reg=tol_reg)
    v_coords = np.asarray(v_coords, dtype=float)
    if v_coords.shape != (fld.dimension - 1,):
        raise ValueError("normal vector must have d-1 coordinates")
    if t == 0.0:
        return v_coords.copy(), fr0, fr0
    V = fr0.basis.T @ v_coords
    low_speed = [False]

    def watch(t0, t1, y0, y1, f0, f1):
        s = min(float(np.min(np.linalg.norm(f0, axis=-1))),
                float(np.min(np.linalg.norm(f1, axis=-1))))
        if s <= tol_reg:
            low_speed[0] = True

    from .flow import _run  # local import to avoid cycle at module load

    y, W = _run(fld, x, V[:, None], float(t), tol, step_cb=watch)
    fr1 = normal_frame(fld, y, tol_reg=tol_reg)
    if low_speed[0]:
        warnings.warn("orbit passed within tol_reg of a singularity; "
                      "projection is still defined at the endpoints",
                      RuntimeWarning, stacklevel=3)
    return fr1.basis @ W[:, 0], fr0, fr1


def lpf(fld: VectorFieldSpec, x, v_coords, t: float, tol: float = 1e-9,
        tol_reg: float = DEFAULT_TOL_REG) -> np.ndarray:
    """Linear Poincare flow: project the tangent image onto the normal
    space at the endpoint.  Input and output are frame coordinates."""
    out, _, _ = _lpf_raw(fld, x, v_coords, t, tol, tol_reg)
    return out


def scaled_lpf(fld: VectorFieldSpec, x, v_coords, t: float, tol: float = 1e-9,
               tol_reg: float = DEFAULT_TOL_REG) -> np.ndarray:
    """Flow-speed-scaled linear Poincare flow: lpf times |X(x)|/|X(phi_t x)|."""
    out, fr0, fr1 = _lpf_raw(fld, x, v_coords, t, tol, tol_reg)
    return out * (fr0.speed / fr1.speed)


def _transport_rows(rows, flow_unit):
    """Project frame rows off the new flow direction and re-orthonormalize."""
    R = rows - np.outer(rows @ flow_unit, flow_unit)
    Q, Rm = np.linalg.qr(R.T)
    sign = np.sign(np.diag(Rm))
    sign[sign == 0] = 1.0
    return (Q * sign).T


@dataclass
class LPFReport:
    exponents: np.ndarray          # scaled cocycle, sorted descending
    exponents_unscaled: np.ndarray
    horizon: float
    renorm_period: float
    convergence_history: np.ndarray
    history_times: np.ndarray


def lpf_exponents(fld: VectorFieldSpec, x0, horizon: float, renorm_period: float = 0.5,
                  tol: float = 1e-9, transient: float = 0.0,
                  tol_reg: float = DEFAULT_TOL_REG) -> LPFReport:
    """QR exponents of the scaled normal cocycle along the orbit of x0.

    The moving normal frame is transported by projecting the previous
    frame and re-orthonormalizing, which avoids spurious rotation
    exponents.  The unscaled exponents differ by the per-step flow-speed
    log ratios, which telescope to zero on bounded recurrent orbits.
    """
    if horizon < 100 * renorm_period:
        raise ValueError("horizon must be at least 100 renormalization periods")
    d = fld.dimension
    x = np.asarray(x0, dtype=float)
    if transient > 0:
        x = advance(fld, x, transient, tol=tol)
    fr = normal_frame(fld, x, tol_reg=tol_reg)
    W = fr.basis.T  # (d, d-1) orthonormal columns spanning N_x
    speed = fr.speed
    n = int(round(horizon / renorm_period))
    logs = np.zeros(d - 1)
    log_speed_ratio = 0.0
    keep = max(1, n // 1000)
    hist, hist_t = [], []
    for i in range(n):
        J = fld.jac(x)
        cap = _JCAP / float(np.max(np.sum(np.abs(J), axis=-1)))
        x, M = tangent_advance(fld, x, W, renorm_period, tol=tol, h_max=cap)
        fr = normal_frame(fld, x, tol_reg=tol_reg)
        P = M - np.outer(fr.flow, fr.flow @ M)
        Q, R = np.linalg.qr(P)
        diag = np.diag(R)
        if np.any(np.abs(diag) < 1e-280):
            raise PoincareError("QR diagonal underflow; use a smaller renorm_period")
        W = Q * np.sign(diag)
        logs += np.log(np.abs(diag))
        log_speed_ratio += np.log(speed / fr.speed)
        speed = fr.speed
        if (i + 1) % keep == 0:
            t_now = (i + 1) * renorm_period
            hist.append(np.sort((logs + log_speed_ratio) / t_now)[::-1])
            hist_t.append(t_now)
    scaled = np.sort((logs + log_speed_ratio) / horizon)[::-1]
    unscaled = np.sort(logs / horizon)[::-1]
    return LPFReport(
        exponents=scaled,
        exponents_unscaled=unscaled,
        horizon=horizon,
        renorm_period=renorm_period,
        convergence_history=np.asarray(hist),
        history_times=np.asarray(hist_t),
    )


@dataclass
class NormalCocycle:
    """Per-interval scaled normal cocycle matrices along a sampled orbit.

    frames[i] is the transported normal frame (rows) at sample i; A[i] and
    A_scaled[i] map frame coordinates at sample i to sample i+1.
    """

    times: np.ndarray
    frames: np.ndarray     # (m+1, d-1, d)
    speeds: np.ndarray     # (m+1,)
    A: np.ndarray          # (m, d-1, d-1)
    A_scaled: np.ndarray


def normal_cocycle(fld: VectorFieldSpec, segment: OrbitSegment, tol: float = 1e-9,
                   tol_reg: float = DEFAULT_TOL_REG,
                   ops: np.ndarray | None = None) -> NormalCocycle:
    """Build the normal cocycle over a uniformly sampled segment."""
    from .spectra import transfer_operators

    dt = segment.dt
    if dt is None:
        raise PoincareError("normal_cocycle needs uniformly sampled segments")
    if ops is None:
        ops = transfer_operators(fld, segment, tol=tol)
    X = segment.states
    vel = fld(X)
    speeds = np.linalg.norm(vel, axis=-1)
    if np.any(speeds <= tol_reg):
        raise PoincareError("segment passes within tol_reg of a singularity")
    flow = vel / speeds[:, None]
    m = len(ops)
    d = segment.dimension
    frames = np.empty((m + 1, d - 1, d))
    frames[0] = normal_frame(fld, X[0], tol_reg=tol_reg).basis
    for i in range(1, m + 1):
        frames[i] = _transport_rows(frames[i - 1], flow[i])
    # A[i] = frames[i+1] @ M[i] @ frames[i]^T
    A = np.einsum("nad,nde,nbe->nab", frames[1:], ops, frames[:-1])
    A_scaled = A * (speeds[:-1] / speeds[1:])[:, None, None]
    return NormalCocycle(times=segment.times, frames=frames, speeds=speeds,
                         A=A, A_scaled=A_scaled)


def normal_splitting(coc: NormalCocycle, window: float):
    """Finite-time contracting/expanding splitting of the normal cocycle.

    Returns (sample_index, E, F): per-sample orthonormal coordinate bases
    of the most contracted direction(s) of the forward window (E) and its
    orthogonal complement (F).
    """
    dt = float(coc.times[1] - coc.times[0])
    w = int(round(window / dt))
    m = len(coc.A)
    if w < 1 or m < w + 1:
        raise PoincareError("segment too short for the splitting window")
    P = window_products(coc.A_scaled, w)
    _, _, Vt = np.linalg.svd(P)
    idx = np.arange(0, m - w + 1)
    k = coc.A.shape[1]
    E = np.swapaxes(Vt[:, k - 1:, :], -1, -2)   # least-expanded direction
    F = np.swapaxes(Vt[:, : k - 1, :], -1, -2)  # orthogonal complement
    return idx, E, F


@dataclass
class QHReport:
    """Partitioned contraction/expansion/domination products along a segment."""

    partition: np.ndarray
    lam: float
    T0: float
    passed: tuple
    margins: tuple            # worst log-slack per inequality family
    step_log_norm_E: np.ndarray
    step_log_conorm_F: np.ndarray

    @property
    def all_passed(self) -> bool:
        return all(self.passed)


def qh_margins(log_nE, log_mF, lam):
    """Worst log slacks of the three product families at contraction lam.

    Family 1: forward products on E stay below lam^k; family 2: backward
    conorm products on F stay above lam^-(l-k); family 3: per-step
    domination ratio below lam^2.  Nonnegative margins mean pass.
    """
    log_lam = np.log(lam)
    l = len(log_nE)
    pre = np.cumsum(log_nE)
    m1 = np.min(np.arange(1, l + 1) * log_lam - pre)
    suf = np.cumsum(log_mF[::-1])[::-1]
    m2 = np.min(suf + np.arange(l, 0, -1) * log_lam)
    m3 = np.min(2 * log_lam - (log_nE - log_mF))
    return float(m1), float(m2), float(m3)


def quasi_hyperbolic_check(fld: VectorFieldSpec, segment: OrbitSegment,
                           split, lam: float, T0: float,
                           tol: float = 1e-9,
                           tol_reg: float = DEFAULT_TOL_REG,
                           coc: NormalCocycle | None = None,
                           n_grid: int = 10) -> QHReport:
    """Search a partition certifying quasi-hyperbolicity of the segment.

    split is (E, F): coordinate bases of the normal splitting at the first
    sample (E of shape (d-1, kE)).  Partition steps are chosen greedily
    from an n_grid-point grid in [T0, 2 T0], maximizing the per-step worst
    margin; the bundles are transported by the cocycle itself.
    """
    if not 0 < lam < 1:
        raise ValueError("lam must lie in (0, 1)")
    dt = segment.dt
    T = float(segment.times[-1] - segment.times[0])
    if T < T0:
        raise PoincareError("segment shorter than T0")
    if coc is None:
        coc = normal_cocycle(fld, segment, tol=tol, tol_reg=tol_reg)
    E, F = split
    E = np.atleast_2d(np.asarray(E, dtype=float))
    if E.shape[0] != coc.A.shape[1]:
        E = E.T
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if F.shape[0] != coc.A.shape[1]:
        F = F.T

    m = len(coc.A)
    smin = max(1, int(np.ceil(T0 / dt - 1e-9)))
    smax = max(smin, int(np.floor(2 * T0 / dt + 1e-9)))
    cand = np.unique(np.linspace(smin, smax, n_grid).round().astype(int))

    log_lam = np.log(lam)
    cuts = [0]
    lnE, lmF = [], []
    pos = 0
    while pos < m:
        rem = m - pos
        if rem <= smax:
            if rem >= smin:
                steps = [rem]
            else:
                break  # leftover shorter than T0 stays outside the partition
        else:
            # avoid stranding a sub-T0 remainder
            steps = [s for s in cand if (rem - s == 0 or rem - s >= smin)]
            if not steps:
                steps = [int(cand[0])]
        best = None
        P = np.eye(coc.A.shape[1])
        j = 0
        for s in steps:
            while j < s:
                P = coc.A_scaled[pos + j] @ P
                j += 1
            nE = float(np.linalg.svd(P @ E, compute_uv=False)[0])
            mF = float(np.linalg.svd(P @ F, compute_uv=False)[-1])
            mg = min(log_lam - np.log(nE), np.log(mF) + log_lam,
                     2 * log_lam - (np.log(nE) - np.log(mF)))
            if best is None or mg > best[0]:
                best = (mg, s, np.log(nE), np.log(mF), P.copy())
        _, s, le, lf, P = best
        lnE.append(le)
        lmF.append(lf)
        E = np.linalg.qr(P @ E)[0]
        F = np.linalg.qr(P @ F)[0]
        pos += s
        cuts.append(pos)

    if not lnE:
        raise PoincareError("no admissible partition step fits the segment")
    lnE = np.asarray(lnE)
    lmF = np.asarray(lmF)
    m1, m2, m3 = qh_margins(lnE, lmF, lam)
    return QHReport(
        partition=segment.times[np.asarray(cuts)],
        lam=lam,
        T0=T0,
        passed=(m1 >= 0, m2 >= 0, m3 >= 0),
        margins=(m1, m2, m3),
        step_log_norm_E=lnE,
        step_log_conorm_F=lmF,
    )


def contracting_block_starts(block_log_norms, lam) -> np.ndarray:
    """Mask of block starts whose entire forward tail satisfies the
    contraction products (all partial sums of log norm - log lam stay <= 0)."""
    b = np.asarray(block_log_norms, dtype=float) - np.log(lam)
    pre = np.concatenate([[0.0], np.cumsum(b)])
    # condition at i: max_{k>i} pre[k] <= pre[i]
    suffix_max = np.maximum.accumulate(pre[::-1])[::-1]
    return suffix_max[1:] <= pre[:-1] + 1e-12


def hyperbolic_time_scan(fld: VectorFieldSpec, segment: OrbitSegment,
                         lam: float, T0: float, window: float | None = None,
                         direction: str = "forward", tol: float = 1e-9,
                         tol_reg: float = DEFAULT_TOL_REG,
                         coc: NormalCocycle | None = None):
    """Sample times whose forward tail contracts the weak normal bundle.

    Finite-horizon surrogate: products are checked in fixed T0 blocks up
    to the end of the data.  The bundle is the most contracted direction
    of the scaled cocycle over `window` (default 2 T0), estimated per
    block start.  direction="backward" scans the reversed segment under
    the reversed field.
    """
    if direction == "backward":
        rev = OrbitSegment(
            times=segment.times[-1] - segment.times[::-1],
            states=segment.states[::-1].copy(),
            field_ref=segment.field_ref + ":reversed",
        )
        return hyperbolic_time_scan(fld.negated(), rev, lam, T0, window=window,
                                    direction="forward", tol=tol, tol_reg=tol_reg)
    if direction != "forward":
        raise ValueError("direction must be 'forward' or 'backward'")
    dt = segment.dt
    if coc is None:
        coc = normal_cocycle(fld, segment, tol=tol, tol_reg=tol_reg)
    s0 = int(round(T0 / dt))
    if s0 < 1:
        raise PoincareError("T0 must be at least one sample spacing")
    idxE, E, _ = normal_splitting(coc, window or 2 * T0)
    m = len(coc.A)
    n_blocks = m // s0
    if n_blocks < 1:
        raise PoincareError("segment shorter than one T0 block")
    logs = np.empty(n_blocks)
    for j in range(n_blocks):
        P = window_products(coc.A_scaled[j * s0:(j + 1) * s0], s0)[0]
        k = min(j * s0, len(E) - 1)
        logs[j] = np.log(np.linalg.norm(P @ E[k][:, 0]))
    mask = contracting_block_starts(logs, lam)
    return segment.times[np.arange(n_blocks)[mask] * s0]
