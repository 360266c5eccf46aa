"""Lyapunov spectra, splitting frames, cone fields, domination, and
sectional volume expansion.

The QR method provides exponents; finite-time singular vectors of window
propagators provide the contracting/expanding splitting approximation,
which the cone-invariance and domination probes then validate (the
splitting is constructed, never assumed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import VectorFieldSpec
from .flow import OrbitSegment, advance, tangent_advance, tangent_advance_ensemble
from .util import rng_stream

__all__ = [
    "SpectraError",
    "LyapunovReport",
    "SplittingFrame",
    "ConeReport",
    "DominationReport",
    "SectionalReport",
    "lyapunov_qr",
    "transfer_operators",
    "window_products",
    "oseledets_frames",
    "cone_invariance_check",
    "dominated_splitting_probe",
    "sectional_expansion_rate",
]

#: frames whose contracting direction sits closer than this to the
#: expanding block (radians) are flagged invalid
MIN_ANGLE = 1e-3

#: stability margin for tangent steps, h <= _JCAP / |DX|_inf
_JCAP = 0.25


class SpectraError(RuntimeError):
    pass


def _jnorm_cap(fld: VectorFieldSpec, x) -> float:
    J = fld.jac(x)
    n = float(np.max(np.sum(np.abs(J), axis=-1)))
    return _JCAP / n if n > 0 else np.inf


@dataclass
class LyapunovReport:
    """QR-method exponents with their convergence trace."""

    exponents: np.ndarray  # sorted descending, units 1/time
    horizon: float
    renorm_period: float
    convergence_history: np.ndarray  # (n_kept, d) running means, each row sorted
    history_times: np.ndarray
    avg_trace: float

    @property
    def sum_error(self) -> float:
        """Relative gap between exponent sum and the orbit-average trace."""
        s = float(np.sum(self.exponents))
        return abs(s - self.avg_trace) / max(1e-30, abs(self.avg_trace))


def lyapunov_qr(fld: VectorFieldSpec, x0, horizon: float, renorm_period: float = 0.5,
                tol: float = 1e-9, transient: float = 0.0) -> LyapunovReport:
    """Lyapunov exponents of the tangent flow along the orbit of x0.

    Classic QR scheme: propagate an orthonormal frame for renorm_period,
    re-orthonormalize, accumulate log diagonal entries.  The seed frame is
    a fixed generic rotation so that invariant-subspace-aligned starts
    (equilibria) still order the columns by growth rate.
    """
    if horizon < 100 * renorm_period:
        raise ValueError("horizon must be at least 100 renormalization periods")
    d = fld.dimension
    x = np.asarray(x0, dtype=float)
    if transient > 0:
        x = advance(fld, x, transient, tol=tol)
    Q = np.linalg.qr(rng_stream(7, "lyapunov-seed-frame").standard_normal((d, d)))[0]
    n = int(round(horizon / renorm_period))
    logs = np.zeros(d)
    traces = [float(np.trace(fld.jac(x)))]
    keep = max(1, n // 1000)
    hist, hist_t = [], []
    for i in range(n):
        cap = _jnorm_cap(fld, x)
        x, W = tangent_advance(fld, x, Q, renorm_period, tol=tol, h_max=cap)
        Q, R = np.linalg.qr(W)
        diag = np.diag(R)
        if np.any(np.abs(diag) < 1e-280):
            raise SpectraError(
                "QR diagonal underflow; use a smaller renorm_period"
            )
        Q = Q * np.sign(diag)
        logs += np.log(np.abs(diag))
        traces.append(float(np.trace(fld.jac(x))))
        if (i + 1) % keep == 0:
            t_now = (i + 1) * renorm_period
            hist.append(np.sort(logs / t_now)[::-1])
            hist_t.append(t_now)
    exponents = np.sort(logs / horizon)[::-1]
    return LyapunovReport(
        exponents=exponents,
        horizon=horizon,
        renorm_period=renorm_period,
        convergence_history=np.asarray(hist),
        history_times=np.asarray(hist_t),
        avg_trace=float(np.mean(traces)),
    )


def transfer_operators(fld: VectorFieldSpec, segment: OrbitSegment,
                       tol: float = 1e-9) -> np.ndarray:
    """Per-interval tangent propagators M[i] = Dphi_dt(x_i), shape (m, d, d).

    Computed as one ensemble tangent integration over a single sample
    spacing, so the cost is a few hundred vectorized steps total.
    """
    dt = segment.dt
    if dt is None:
        raise SpectraError("transfer_operators needs uniformly sampled segments")
    X = segment.states[:-1]
    d = segment.dimension
    V = np.broadcast_to(np.eye(d), (len(X), d, d)).copy()
    caps = _JCAP / np.max(np.sum(np.abs(fld.jac(X)), axis=-1), axis=-1)
    _, M = tangent_advance_ensemble(fld, X, V, dt, tol=tol, h_max=float(np.min(caps)))
    return M


def window_products(M: np.ndarray, w: int) -> np.ndarray:
    """P[j] = M[j+w-1] @ ... @ M[j] for every admissible window start."""
    m = len(M)
    if not 1 <= w <= m:
        raise ValueError("window length out of range")
    n = m - w + 1
    P = M[:n].copy()
    for s in range(1, w):
        P = M[s:s + n] @ P
    return P


@dataclass
class SplittingFrame:
    """Per-sample orthonormal bases approximating the invariant splitting.

    bases[:, :, :dims[0]] spans the contracting estimate, the remaining
    columns its orthogonal complement aligned with the center-unstable
    estimate.  sample_index maps rows to segment samples.  angles holds the
    separation between the raw contracting direction and the raw expanding
    plane; rows below min_angle are flagged invalid rather than dropped.
    """

    dims: tuple
    sample_index: np.ndarray
    bases: np.ndarray       # (n, d, d)
    es_raw: np.ndarray      # (n, d, dims[0])
    fcu_raw: np.ndarray     # (n, d, dims[1])
    angles: np.ndarray
    valid: np.ndarray
    cone_param: float | None = None
    min_angle: float = MIN_ANGLE

    def orthonormality_defect(self) -> float:
        B = self.bases
        eye = np.eye(B.shape[-1])
        return float(np.max(np.abs(np.swapaxes(B, -1, -2) @ B - eye)))


def oseledets_frames(fld: VectorFieldSpec, segment: OrbitSegment, window: float = 5.0,
                     dims: tuple = (1, 2), tol: float = 1e-9,
                     ops: np.ndarray | None = None,
                     min_angle: float = MIN_ANGLE) -> SplittingFrame:
    """Finite-time splitting estimate from window propagator SVDs.

    For the propagator over [t_i, t_i + window], the least-expanded right
    singular directions approximate the contracting bundle at x_i and the
    dominant left singular directions approximate the center-unstable
    bundle at x_{i+window} (forward iteration refines the complement).
    Frames exist where both windows fit inside the segment.
    """
    dt = segment.dt
    if dt is None:
        raise SpectraError("oseledets_frames needs uniformly sampled segments")
    d = segment.dimension
    ds, df = dims
    if ds + df != d:
        raise ValueError("splitting dimensions must sum to d")
    w = int(round(window / dt))
    m = len(segment.states) - 1
    if w < 1 or m < 2 * w + 1:
        raise SpectraError("segment too short for the requested window")
    if ops is None:
        ops = transfer_operators(fld, segment, tol=tol)
    P = window_products(ops, w)  # P[j] covers [t_j, t_j + window]
    U, _, Vt = np.linalg.svd(P)
    # samples with both a forward window (for E^s) and a backward one (for F^cu)
    idx = np.arange(w, m - w + 1)
    es = np.swapaxes(Vt[idx, d - ds:, :], -1, -2)      # right-singular, smallest
    fcu = U[idx - w, :, :df]                            # left-singular of the ending window
    # separation angle between the raw contracting directions and raw expanding plane
    proj = fcu @ (np.swapaxes(fcu, -1, -2) @ es)
    resid = np.linalg.norm(es - proj, axis=1)          # (n, ds)
    angles = np.arcsin(np.clip(np.min(resid, axis=-1), 0.0, 1.0))
    valid = angles >= min_angle

    stacked = np.concatenate([es, fcu], axis=-1)
    Q, R = np.linalg.qr(stacked)
    sign = np.sign(np.einsum("nii->ni", R))
    sign[sign == 0] = 1.0
    bases = Q * sign[:, None, :]
    return SplittingFrame(
        dims=dims, sample_index=idx, bases=bases, es_raw=es, fcu_raw=fcu,
        angles=angles, valid=valid, min_angle=min_angle,
    )


@dataclass
class ConeReport:
    a: float
    checked: int
    violations: int
    worst_ratio: float
    violation_samples: np.ndarray

    @property
    def passed(self) -> bool:
        return self.violations == 0


def cone_invariance_check(fld: VectorFieldSpec, segment: OrbitSegment,
                          frame: SplittingFrame, a: float, n_test: int = 8,
                          step: float = 1.0, tol: float = 1e-9,
                          ops: np.ndarray | None = None,
                          rng: np.random.Generator | None = None) -> ConeReport:
    """Forward invariance of the center-unstable cone of opening a.

    Cone membership uses the oblique decomposition v = v_E + v_F along the
    raw splitting estimates (the two bundles are transverse, not
    orthogonal).  For each valid sample and n_test random vectors with
    |v_E| = rho |v_F|, rho < a, the time-`step` tangent image is
    decomposed in the splitting one step later; ratios at or above a count
    as violations.
    """
    if not 0 <= a < 1:
        raise ValueError("cone parameter must lie in [0, 1)")
    if a == 0.0:
        return ConeReport(a=a, checked=0, violations=0, worst_ratio=0.0,
                          violation_samples=np.empty(0, dtype=np.int64))
    dt = segment.dt
    s1 = int(round(step / dt))
    if abs(s1 * dt - step) > 1e-9:
        raise SpectraError("step must be a multiple of the sample spacing")
    if ops is None:
        ops = transfer_operators(fld, segment, tol=tol)
    rng = rng or rng_stream(0, "cone-check")
    ds, df = frame.dims

    pos = {int(j): k for k, j in enumerate(frame.sample_index)}
    starts, ends = [], []
    for k, j in enumerate(frame.sample_index):
        if int(j) + s1 in pos:
            starts.append(k)
            ends.append(pos[int(j) + s1])
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    use = frame.valid[starts] & frame.valid[ends]
    starts, ends = starts[use], ends[use]
    n = len(starts)
    if n == 0:
        raise SpectraError("no frame pairs one step apart")

    P = window_products(ops, s1)[frame.sample_index[starts]]

    # unit oblique components: raw E columns and raw F columns are each
    # orthonormal within their own block
    cE = rng.standard_normal((n, n_test, ds))
    cE /= np.linalg.norm(cE, axis=-1, keepdims=True)
    cF = rng.standard_normal((n, n_test, df))
    cF /= np.linalg.norm(cF, axis=-1, keepdims=True)
    rho = a * rng.random((n, n_test, 1))
    vecs = (np.einsum("ndk,ntk->ntd", frame.es_raw[starts], rho * cE)
            + np.einsum("ndk,ntk->ntd", frame.fcu_raw[starts], cF))
    out = np.einsum("nde,nte->ntd", P, vecs)

    M = np.concatenate([frame.es_raw[ends], frame.fcu_raw[ends]], axis=-1)
    Mb = np.broadcast_to(M[:, None], (n, n_test) + M.shape[1:])
    coords = np.linalg.solve(Mb, out[..., None])[..., 0]
    wE = np.einsum("ndk,ntk->ntd", frame.es_raw[ends], coords[..., :ds])
    wF = np.einsum("ndk,ntk->ntd", frame.fcu_raw[ends], coords[..., ds:])
    nE = np.linalg.norm(wE, axis=-1)
    nF = np.linalg.norm(wF, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(nF > 0, nE / np.where(nF > 0, nF, 1.0), np.inf)
    bad = ratio >= a
    return ConeReport(
        a=a,
        checked=int(ratio.size),
        violations=int(np.count_nonzero(bad)),
        worst_ratio=float(np.max(ratio)),
        violation_samples=frame.sample_index[starts[np.any(bad, axis=1)]],
    )


@dataclass
class DominationReport:
    L: float
    worst_ratio: float
    ratios: np.ndarray
    sample_index: np.ndarray

    @property
    def passed(self) -> bool:
        return self.worst_ratio <= 0.5


def dominated_splitting_probe(fld: VectorFieldSpec, segment: OrbitSegment,
                              dims: tuple, L: float,
                              frame: SplittingFrame | None = None,
                              tol: float = 1e-9,
                              ops: np.ndarray | None = None) -> DominationReport:
    """Worst (|Phi_L u|/|u|) / (|Phi_L v|/|v|) over the splitting bundles.

    The extremal ratio per sample is computed exactly from singular values
    of the propagator restricted to the raw bundle estimates (sampling
    u, v could only report something smaller).  Domination at scale L
    means ratio <= 1/2.
    """
    dt = segment.dt
    wL = int(round(L / dt))
    if wL < 1:
        raise SpectraError("L must be at least one sample spacing")
    if ops is None:
        ops = transfer_operators(fld, segment, tol=tol)
    if frame is None:
        frame = oseledets_frames(fld, segment, dims=dims, tol=tol, ops=ops)
    ds, df = frame.dims
    m = len(ops)
    keep = frame.valid & (frame.sample_index + wL <= m)
    idx = frame.sample_index[keep]
    if len(idx) == 0:
        raise SpectraError("no valid frames with room for the L-window")
    P = window_products(ops, wL)[idx]
    E = frame.es_raw[keep]
    F = frame.fcu_raw[keep]
    sE = np.linalg.svd(P @ E, compute_uv=False)[:, 0]        # max stretch on E^s
    sF = np.linalg.svd(P @ F, compute_uv=False)[:, -1]       # conorm on F^cu
    ratios = sE / sF
    return DominationReport(L=L, worst_ratio=float(np.max(ratios)),
                            ratios=ratios, sample_index=idx)


@dataclass
class SectionalReport:
    t_window: float
    infimum: float
    mean: float
    rates: np.ndarray
    sample_index: np.ndarray
    dropped: int


def sectional_expansion_rate(fld: VectorFieldSpec, segment: OrbitSegment,
                             frame: SplittingFrame, t_window: float = 5.0,
                             n_plane: int = 16, tol: float = 1e-9,
                             ops: np.ndarray | None = None,
                             rng: np.random.Generator | None = None) -> SectionalReport:
    """Two-dimensional volume growth rate inside the center-unstable block.

    Per window start the rate is the log area factor of the advected
    plane basis divided by t_window.  When the block is 2-dimensional it
    is the whole (numerically invariant) plane and window log-areas are
    prefix sums of per-interval areas, which stays accurate for any
    window length (a direct long-window Gram determinant would drown the
    small singular value once the area factor's conditioning passes
    1/sqrt(eps)).  For higher-dimensional blocks the infimum additionally
    runs over the frame coordinate pairs plus n_plane random 2-planes,
    via short-window products and singular values.  Degenerate areas drop
    the window (counted, not fatal).
    """
    if frame is None:
        raise SpectraError("sectional_expansion_rate requires a splitting frame")
    ds, df = frame.dims
    if df < 2:
        raise SpectraError("center-unstable block must be at least 2-dimensional")
    dt = segment.dt
    w = int(round(t_window / dt))
    if ops is None:
        ops = transfer_operators(fld, segment, tol=tol)
    m = len(ops)
    if df == 2:
        # per-interval area growth on the invariant plane, then prefix sums
        all_idx = frame.sample_index[frame.valid]
        if len(all_idx) == 0:
            raise SpectraError("no valid frames")
        if np.any(np.diff(all_idx) != 1):
            raise SpectraError("splitting frame must be contiguous over the segment")
        keep = frame.valid & (frame.sample_index + w <= all_idx[-1] + 1)
        idx = frame.sample_index[keep]
        if len(idx) == 0:
            raise SpectraError("no valid frames with room for the window")
        Fall = frame.fcu_raw[frame.valid]
        G = ops[all_idx] @ Fall
        s = np.linalg.svd(G, compute_uv=False)
        with np.errstate(divide="ignore"):
            g = np.sum(np.log(s), axis=-1)
        pref = np.concatenate([[0.0], np.cumsum(g)])
        lo = np.searchsorted(all_idx, idx)
        rates_all = (pref[lo + w] - pref[lo]) / t_window
    else:
        keep = frame.valid & (frame.sample_index + w <= m)
        idx = frame.sample_index[keep]
        if len(idx) == 0:
            raise SpectraError("no valid frames with room for the window")
        P = window_products(ops, w)[idx]
        F = frame.fcu_raw[keep]
        rng = rng or rng_stream(0, "sectional-planes")
        planes = []
        for i in range(df):
            for j in range(i + 1, df):
                p = np.zeros((df, 2))
                p[i, 0] = 1.0
                p[j, 1] = 1.0
                planes.append(p)
        for _ in range(n_plane):
            q, _ = np.linalg.qr(rng.standard_normal((df, 2)))
            planes.append(q)
        rates_all = np.full(len(idx), np.inf)
        for p in planes:
            s = np.linalg.svd(P @ (F @ p), compute_uv=False)
            with np.errstate(divide="ignore"):
                r = np.sum(np.log(s[..., :2]), axis=-1) / t_window
            rates_all = np.minimum(rates_all, r)

    good = np.isfinite(rates_all)
    dropped = int(np.count_nonzero(~good))
    rates = rates_all[good]
    if len(rates) == 0:
        raise SpectraError("all windows dropped (degenerate areas)")
    return SectionalReport(
        t_window=t_window,
        infimum=float(np.min(rates)),
        mean=float(np.mean(rates)),
        rates=rates,
        sample_index=idx[good],
        dropped=dropped,
    )
