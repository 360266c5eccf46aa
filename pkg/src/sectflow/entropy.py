"""Bowen balls, spanning/separated counts, growth-rate fits, disk-volume
expansion, expansiveness probes, and entropy continuity scans.

Block-coding convention: the map iterated is the time-one flow map.  The
working representation is an iterate table, row i holding x_i, f(x_i),
..., f^n(x_i); for points sampled from a long orbit at unit spacing the
table is a sliding window over the stored trajectory, so no per-point
integration is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import VectorFieldSpec
from .flow import advance, advance_ensemble, tangent_advance
from .util import rng_stream

__all__ = [
    "EntropyError",
    "OrbitSampleSet",
    "EntropyEstimate",
    "ExpansivenessProbe",
    "VolumeReport",
    "ContinuityScan",
    "bowen_member",
    "iterate_table",
    "attractor_samples",
    "entropy_table",
    "volume_expansion",
    "tangent_disk",
    "expansiveness_probe",
    "continuity_scan",
]

#: default seeding box for attractor sampling (generic trapping region)
DEFAULT_SAMPLE_BOX = np.array([[-15.0, 15.0], [-20.0, 20.0], [5.0, 40.0]])


class EntropyError(RuntimeError):
    pass


def bowen_member(fld: VectorFieldSpec, x, y, n: int, eps: float,
                 tol: float = 1e-9) -> bool:
    """True iff the first n time-one iterates of y stay eps-close to x's."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    for _ in range(n):
        if np.linalg.norm(x - y) >= eps:
            return False
        x = advance(fld, x, 1.0, tol=tol)
        y = advance(fld, y, 1.0, tol=tol)
    # distances are checked at k = 0 .. n-1; the last advance is discarded
    return True


@dataclass
class OrbitSampleSet:
    """Iterate table under the time-one map.

    iterates[i, k] = f^k(x_i) for k = 0 .. n_iter.  block_id marks which
    contiguous trajectory a row came from (bootstrap resampling unit).
    """

    iterates: np.ndarray
    block_id: np.ndarray
    field_ref: str = ""

    @property
    def points(self) -> np.ndarray:
        return self.iterates[:, 0, :]

    @property
    def n_iter(self) -> int:
        return self.iterates.shape[1] - 1

    def __len__(self):
        return len(self.iterates)

    def subset(self, rows) -> "OrbitSampleSet":
        return OrbitSampleSet(iterates=self.iterates[rows],
                              block_id=self.block_id[rows],
                              field_ref=self.field_ref)


def iterate_table(fld: VectorFieldSpec, points, n_iter: int,
                  tol: float = 1e-9) -> OrbitSampleSet:
    """Iterate table for an arbitrary finite point set (integrates each unit)."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    k, d = P.shape
    it = np.empty((k, n_iter + 1, d))
    it[:, 0] = P
    X = P
    for j in range(1, n_iter + 1):
        X = advance_ensemble(fld, X, 1.0, tol=tol)
        it[:, j] = X
    return OrbitSampleSet(iterates=it, block_id=np.zeros(k, dtype=np.int64),
                          field_ref=fld.name)


def attractor_samples(fld: VectorFieldSpec, k_size: int, n_iter: int,
                      n_traj: int = 100, transient: float = 100.0,
                      tol: float = 1e-7, rng=None,
                      box=None) -> OrbitSampleSet:
    """Sample k_size attractor points at unit spacing with their iterates.

    n_traj independent trajectories are integrated together; each
    contributes a contiguous block of samples, and iterates are the
    later samples of the same block (unit sampling period), so the whole
    table costs one ensemble integration.
    """
    rng = rng or rng_stream(0, "attractor-samples")
    box = DEFAULT_SAMPLE_BOX if box is None else np.asarray(box, dtype=float)
    if fld.dimension != len(box):
        raise ValueError("sampling box dimension mismatch")
    n_traj = min(n_traj, k_size)
    per = int(np.ceil(k_size / n_traj))
    span = per + n_iter
    X0 = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((n_traj, fld.dimension))
    X = advance_ensemble(fld, X0, transient, tol=tol)
    d = fld.dimension
    S = np.empty((n_traj, span + 1, d))
    S[:, 0] = X
    stops = np.arange(1.0, span + 1)

    def cb(i, t, y, V):
        S[:, i + 1] = y

    advance_ensemble(fld, X, float(span), tol=tol, stops=stops, stop_cb=cb)
    win = np.lib.stride_tricks.sliding_window_view(S, n_iter + 1, axis=1)
    # (n_traj, per+1, d, n_iter+1) -> rows of (n_iter+1, d)
    it = np.swapaxes(win, 2, 3)[:, :per].reshape(n_traj * per, n_iter + 1, d)
    blocks = np.repeat(np.arange(n_traj, dtype=np.int64), per)
    keep = slice(0, k_size)
    return OrbitSampleSet(iterates=np.ascontiguousarray(it[keep]),
                          block_id=blocks[keep], field_ref=fld.name)


class _BucketIndex:
    """Grid-bucket spatial index with cell size eps (27-bucket queries)."""

    def __init__(self, points: np.ndarray, eps: float):
        self.eps = eps
        lo = points.min(axis=0)
        cells = np.floor((points - lo) / eps).astype(np.int64)
        spans = cells.max(axis=0) + 3
        mult = np.ones(points.shape[1], dtype=np.int64)
        for j in range(points.shape[1] - 2, -1, -1):
            mult[j] = mult[j + 1] * spans[j + 1]
        self.mult = mult
        codes = (cells + 1) @ mult
        self.order = np.argsort(codes, kind="stable")
        self.codes_sorted = codes[self.order]
        self.cell_of = codes
        offs = np.array(np.meshgrid(*([[-1, 0, 1]] * points.shape[1]),
                                    indexing="ij")).reshape(points.shape[1], -1).T
        self.neighbor_offsets = offs @ mult

    def query(self, i: int) -> np.ndarray:
        """Indices of points in the 27 buckets around point i (incl. i)."""
        targets = self.cell_of[i] + self.neighbor_offsets
        lo = np.searchsorted(self.codes_sorted, targets, side="left")
        hi = np.searchsorted(self.codes_sorted, targets, side="right")
        picks = [self.order[a:b] for a, b in zip(lo, hi) if b > a]
        return np.concatenate(picks) if picks else np.empty(0, dtype=np.int64)


def _separation_times(it: np.ndarray, i: int, cand: np.ndarray, eps: float,
                      n_max: int) -> np.ndarray:
    """First iterate k where each candidate leaves the eps-tube of row i,
    capped at n_max (n_max means: together through the whole horizon)."""
    t_sep = np.full(len(cand), n_max, dtype=np.int64)
    alive = np.arange(len(cand))
    e2 = eps * eps
    for k in range(n_max):
        diff = it[cand[alive], k, :] - it[i, k, :]
        d2 = np.einsum("ij,ij->i", diff, diff)
        dead = d2 >= e2
        if np.any(dead):
            t_sep[alive[dead]] = k
            alive = alive[~dead]
            if len(alive) == 0:
                break
    return t_sep


def _nested_nets(samples: OrbitSampleSet, eps: float, n_grid) -> np.ndarray:
    """Greedy maximal Bowen-separated nets, nested across block lengths.

    The net at block length n extends the net at n-1 (a separated set
    stays separated when the block grows), so counts are nondecreasing in
    n by construction.  Every net is simultaneously an (n, eps)-spanning
    set of the samples, which gives the upper bound read-out for r_n.
    """
    it = samples.iterates
    k = len(it)
    n_max = int(max(n_grid))
    if n_max > samples.n_iter:
        raise EntropyError("iterate table shorter than the largest block length")
    index = _BucketIndex(samples.points, eps)
    is_center = np.zeros(k, dtype=bool)
    cover_center = np.full(k, -1, dtype=np.int64)
    cover_sep = np.zeros(k, dtype=np.int64)
    counts = np.empty(len(n_grid), dtype=np.int64)
    for lvl, n in enumerate(sorted(int(v) for v in n_grid)):
        todo = np.nonzero((~is_center) & (cover_sep < n))[0]
        for i in todo:
            cand = index.query(int(i))
            cand = cand[is_center[cand]]
            if len(cand) > 0:
                t_sep = _separation_times(it, int(i), cand, eps, n_max)
                j = int(np.argmax(t_sep))
                if t_sep[j] >= n:
                    cover_center[i] = cand[j]
                    cover_sep[i] = t_sep[j]
                    continue
            is_center[i] = True
            cover_center[i] = i
            cover_sep[i] = n_max + 1
        counts[lvl] = int(np.count_nonzero(is_center))
    return counts


def _fit_slope(ns: np.ndarray, logc: np.ndarray, usable: np.ndarray):
    """Least-squares growth rate on the longest near-linear usable window.

    A window qualifies when every log count sits within 10% of the fitted
    line, measured against the line's rise over the window (so saturation
    bends are cut, while exactly flat tables, zero rise and zero residual,
    still qualify); saturated cells are excluded beforehand.  Returns
    (slope, (n_lo, n_hi)) or (nan, None) when no 3-point window exists.
    """
    best = None
    idx = np.nonzero(usable)[0]
    for a in range(len(idx)):
        for b in range(a + 2, len(idx)):
            sel = idx[a:b + 1]
            if not np.all(np.diff(sel) == 1):
                continue
            x, y = ns[sel].astype(float), logc[sel]
            A = np.stack([x, np.ones_like(x)], axis=1)
            coef, *_ = np.linalg.lstsq(A, y, rcond=None)
            fit = A @ coef
            rise = abs(coef[0]) * (x[-1] - x[0])
            dev = float(np.max(np.abs(y - fit)))
            if dev <= 0.10 * rise + 1e-9:
                key = (len(sel), -dev)
                if best is None or key > best[0]:
                    best = (key, float(coef[0]), (int(ns[sel[0]]), int(ns[sel[-1]])))
    if best is None:
        return float("nan"), None
    return best[1], best[2]


@dataclass
class EntropyEstimate:
    """Spanning/separated count tables with fitted growth slopes.

    span_counts[e, j] is the greedy net size at (eps_grid[e], n_grid[j]);
    the same nets are maximal separated sets, reported as sep_counts.
    saturated flags cells at the sample-count ceiling (slope-unusable).
    """

    eps_grid: np.ndarray
    n_grid: np.ndarray
    span_counts: np.ndarray
    sep_counts: np.ndarray
    saturated: np.ndarray
    slopes: dict
    slope_windows: dict
    k_size: int

    def validate(self):
        sc = self.span_counts
        if np.any(np.diff(sc, axis=1) < 0):
            raise EntropyError("span counts must be nondecreasing in n")
        if np.any(np.diff(sc, axis=0) < 0):
            raise EntropyError("span counts must be nonincreasing in eps")
        eps = self.eps_grid
        for a, e2 in enumerate(eps):
            for b, e1 in enumerate(eps):
                if abs(e2 - 2 * e1) <= 1e-12 * e1:
                    if np.any(self.sep_counts[a] > self.span_counts[b]):
                        raise EntropyError("sandwich violated: s_n(2e) > r_n(e)")
                    if np.any(self.span_counts[b] > self.sep_counts[b]):
                        raise EntropyError("sandwich violated: r_n(e) > s_n(e)")
        return self

    def slope(self, eps: float) -> float:
        return self.slopes[float(eps)]

    def csv(self) -> str:
        lines = ["eps,n,r_n,s_n"]
        for a, e in enumerate(self.eps_grid):
            for j, n in enumerate(self.n_grid):
                lines.append(f"{e!r},{n},{self.span_counts[a, j]},{self.sep_counts[a, j]}")
        return "\n".join(lines) + "\n"


def entropy_table(fld: VectorFieldSpec | None, samples, eps_grid, n_grid,
                  tol: float = 1e-9) -> EntropyEstimate:
    """Spanning/separated tables over the eps and block-length grids.

    samples may be an OrbitSampleSet or a raw (k, d) point array (then fld
    integrates the iterates).  eps values are processed in decreasing
    order; grids with consecutive ratios >= 2 make every monotonicity and
    sandwich relation a theorem, and validate() asserts them all.
    """
    eps_grid = np.sort(np.asarray(eps_grid, dtype=float))[::-1]
    n_grid = np.sort(np.asarray(n_grid, dtype=np.int64))
    if len(eps_grid) == 0 or len(n_grid) == 0:
        raise ValueError("grids must be nonempty")
    if not isinstance(samples, OrbitSampleSet):
        if fld is None:
            raise ValueError("raw point sets need the field to build iterates")
        samples = iterate_table(fld, samples, int(n_grid[-1]), tol=tol)
    k = len(samples)
    span = np.empty((len(eps_grid), len(n_grid)), dtype=np.int64)
    for a, eps in enumerate(eps_grid):
        span[a] = _nested_nets(samples, float(eps), n_grid)
    saturated = span >= k
    slopes, windows = {}, {}
    for a, eps in enumerate(eps_grid):
        sl, win = _fit_slope(n_grid, np.log(span[a].astype(float)), ~saturated[a])
        slopes[float(eps)] = sl
        windows[float(eps)] = win
    return EntropyEstimate(
        eps_grid=eps_grid, n_grid=n_grid, span_counts=span, sep_counts=span.copy(),
        saturated=saturated, slopes=slopes, slope_windows=windows, k_size=k,
    ).validate()


def tangent_disk(center, plane, radius: float, n_rings: int = 6) -> np.ndarray:
    """Triangle soup (n, 3, d) meshing a disk tangent to a 2-plane.

    plane is a (2, d) orthonormal basis; the fan/ring construction keeps
    triangles well shaped.
    """
    center = np.asarray(center, dtype=float)
    plane = np.asarray(plane, dtype=float)
    rings = [np.zeros((1, 2))]
    for r in range(1, n_rings + 1):
        k = 6 * r
        ang = 2 * np.pi * np.arange(k) / k
        rad = radius * r / n_rings
        rings.append(np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1))
    tris2 = []
    for r in range(1, n_rings + 1):
        inner, outer = rings[r - 1], rings[r]
        ki, ko = len(inner), len(outer)
        for j in range(ko):
            a, b = outer[j], outer[(j + 1) % ko]
            c = inner[int(round(j * ki / ko)) % ki]
            tris2.append([a, b, c])
            if ki > 1:
                c2 = inner[int(round((j + 1) * ki / ko)) % ki]
                if not np.allclose(c, c2):
                    tris2.append([b, c2, c])
    tris2 = np.asarray(tris2)
    return center + tris2 @ plane


def _soup_areas(tris: np.ndarray) -> np.ndarray:
    u = tris[:, 1] - tris[:, 0]
    v = tris[:, 2] - tris[:, 0]
    if tris.shape[-1] == 3:
        return 0.5 * np.linalg.norm(np.cross(u, v), axis=-1)
    g11 = np.einsum("ij,ij->i", u, u)
    g22 = np.einsum("ij,ij->i", v, v)
    g12 = np.einsum("ij,ij->i", u, v)
    return 0.5 * np.sqrt(np.maximum(g11 * g22 - g12 * g12, 0.0))


def _split_long_edges(tris: np.ndarray, edge_max: float, max_rounds: int = 8):
    """4-way midpoint splits until every edge is at most edge_max."""
    for _ in range(max_rounds):
        e0 = np.linalg.norm(tris[:, 1] - tris[:, 0], axis=-1)
        e1 = np.linalg.norm(tris[:, 2] - tris[:, 1], axis=-1)
        e2 = np.linalg.norm(tris[:, 0] - tris[:, 2], axis=-1)
        long = np.maximum(np.maximum(e0, e1), e2) > edge_max
        if not np.any(long):
            return tris
        keep = tris[~long]
        t = tris[long]
        m01 = 0.5 * (t[:, 0] + t[:, 1])
        m12 = 0.5 * (t[:, 1] + t[:, 2])
        m20 = 0.5 * (t[:, 2] + t[:, 0])
        quads = np.concatenate([
            np.stack([t[:, 0], m01, m20], axis=1),
            np.stack([m01, t[:, 1], m12], axis=1),
            np.stack([m20, m12, t[:, 2]], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ])
        tris = np.concatenate([keep, quads])
    raise EntropyError("edge refinement did not converge (fold-over?)")


@dataclass
class VolumeReport:
    log_growth: np.ndarray   # per-step log area ratios
    rate: float              # tail mean per step
    areas: np.ndarray
    n_triangles: int
    degenerate: int

    @property
    def tail(self) -> np.ndarray:
        return self.log_growth[len(self.log_growth) // 2:]


def volume_expansion(fld: VectorFieldSpec, disk, n_steps: int,
                     edge_max: float = 1.0, tol: float = 1e-7) -> VolumeReport:
    """Advect a triangulated surface by the time-one map and track area.

    disk is a triangle soup (n, 3, d).  After each step, triangles with an
    edge beyond edge_max are midpoint-split (shared vertices are advected
    once through an exact-duplicate index, so copies stay bitwise equal
    and the soup stays crack-free for area purposes).  The reported rate
    is the mean of the later half of the per-step log growths.
    """
    tris = np.asarray(disk, dtype=float)
    if tris.ndim != 3 or tris.shape[1] != 3:
        raise ValueError("disk must be a triangle soup of shape (n, 3, d)")
    areas = [float(np.sum(_soup_areas(tris)))]
    if areas[0] <= 0:
        raise ValueError("disk has zero area")
    degenerate = 0
    for step in range(n_steps):
        flat = tris.reshape(-1, tris.shape[-1])
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        adv = advance_ensemble(fld, uniq, 1.0, tol=tol)
        tris = adv[inv].reshape(tris.shape)
        if not np.all(np.isfinite(tris)):
            raise EntropyError(f"surface advection lost finiteness at step {step + 1}")
        tris = _split_long_edges(tris, edge_max)
        a = _soup_areas(tris)
        degenerate += int(np.count_nonzero(a <= 1e-14))
        areas.append(float(np.sum(a)))
    areas = np.asarray(areas)
    logg = np.diff(np.log(areas))
    return VolumeReport(
        log_growth=logg,
        rate=float(np.mean(logg[len(logg) // 2:])),
        areas=areas,
        n_triangles=len(tris),
        degenerate=degenerate,
    )


@dataclass
class ExpansivenessProbe:
    """Survivors of the two-sided Bowen filter around a reference point.

    center is the N-step forward image of the probe seed (the two-sided
    window is realized as a forward window at the seed; the survivor set
    at the center is identical to the two-sided ball there).  Ladder
    arrays are indexed by half-width N' = 0 .. horizon.
    """

    center: np.ndarray
    delta: float
    horizon: int
    tube_time: float
    survivor_counts: np.ndarray
    transverse_by_n: np.ndarray
    transverse_diameter: float
    in_plane_spread: float
    off_plane_spread: float
    survivor_states: np.ndarray
    n_candidates: int


def _orbit_arc(fld, x0, s_values, tol=1e-12):
    """phi_s(x0) for each s (any signs), by sequential integration."""
    s_values = np.asarray(s_values, dtype=float)
    out = np.empty((len(s_values), len(x0)))
    order = np.argsort(s_values)
    s_sorted = s_values[order]
    pos = s_sorted[s_sorted >= 0]
    neg = -s_sorted[s_sorted < 0][::-1]
    cur, prev = np.asarray(x0, dtype=float), 0.0
    row = np.count_nonzero(s_sorted < 0)
    for i, s in enumerate(pos):
        if s > prev:
            cur = advance(fld, cur, float(s - prev), tol=tol)
            prev = s
        out[order[row + i]] = cur
    cur, prev = np.asarray(x0, dtype=float), 0.0
    for i, s in enumerate(neg):
        if s > prev:
            cur = advance(fld, cur, -float(s - prev), tol=tol)
            prev = s
        out[order[row - 1 - i]] = cur
    return out


def _fcu_plane(fld, x, tol, window=5.0):
    """Flow direction plus dominant forward-singular direction at x."""
    J = fld.jac(x)
    cap = 0.25 / float(np.max(np.sum(np.abs(J), axis=-1)))
    _, W = tangent_advance(fld, x, np.eye(fld.dimension), window, tol=tol, h_max=cap)
    _, _, Vt = np.linalg.svd(W)
    u = fld(x)
    u = u / np.linalg.norm(u)
    v1 = Vt[0]
    v1 = v1 - (v1 @ u) * u
    n = np.linalg.norm(v1)
    if n < 1e-12:
        v1 = Vt[1] - (Vt[1] @ u) * u
        n = np.linalg.norm(v1)
    return np.stack([u, v1 / n])


def expansiveness_probe(fld: VectorFieldSpec, x, delta: float, horizon: int,
                        n_candidates: int = 10000, tol: float = 1e-9,
                        rng=None, kill_factor: float = 10.0) -> ExpansivenessProbe:
    """Two-sided Bowen-ball survivors at scale delta around f^horizon(x).

    Candidates are drawn in the delta-ball at the seed x, stratified over
    the ambient ball, the local center-unstable plane, and the local orbit
    arc (the curved part of the cu-leaf, where the survivors of a long
    two-sided window live).  One forward pass of 2*horizon unit steps
    yields every sub-window's survivor set; the reported statistics sit at
    the window center f^horizon(x), where the ball B_(+-N) lives.
    Candidates wandering beyond kill_factor*delta are dropped early; a
    re-entry into some short sub-window after such an excursion would be
    missed (never observed on tested systems).
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if delta <= 0:
        raise ValueError("delta must be positive")
    rng = rng or rng_stream(0, "expansiveness-probe")
    x = np.asarray(x, dtype=float)
    d = fld.dimension

    n_arc = n_candidates // 3
    n_pl = n_candidates // 3
    n_amb = n_candidates - n_arc - n_pl

    # ambient ball
    dirs = rng.standard_normal((n_amb, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amb = x + dirs * (delta * rng.random((n_amb, 1)) ** (1.0 / d))
    # local cu plane disc
    plane = _fcu_plane(fld, x, tol)
    ang = 2 * np.pi * rng.random(n_pl)
    rad = delta * np.sqrt(rng.random(n_pl))
    pl = x + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1) @ plane
    # local orbit arc (the curved flow sub-direction of the cu-leaf)
    speed0 = fld.speed(x)
    tube0 = min(1.0, delta / max(speed0, 1e-12))
    s_arc = tube0 * (2 * rng.random(n_arc) - 1)
    arc = _orbit_arc(fld, x, s_arc)

    cands = np.concatenate([x[None, :], amb, pl, arc])
    n_tot = len(cands)

    width = 2 * horizon
    dist = np.zeros((n_tot, width + 1))
    dist[:, 0] = np.linalg.norm(cands - x, axis=1)
    kill = kill_factor * delta
    alive = np.nonzero(dist[:, 0] <= kill)[0]
    dist[np.setdiff1d(np.arange(n_tot), alive), 1:] = np.inf
    base = x.copy()
    Y = cands[alive]
    center_states = np.full((n_tot, d), np.nan)
    if horizon == 0:
        center_states[:] = cands
    for k in range(1, width + 1):
        base = advance(fld, base, 1.0, tol=tol)
        if len(alive):
            Y = advance_ensemble(fld, Y, 1.0, tol=tol)
            dk = np.linalg.norm(Y - base, axis=1)
            dist[alive, k] = dk
            if k == horizon:
                center_states[alive] = Y
            keep = dk <= kill
            if not np.all(keep):
                dead = alive[~keep]
                dist[dead, k + 1:] = np.inf
                alive = alive[keep]
                Y = Y[keep]

    center = center_states[0] if horizon > 0 else cands[0]

    # survivor ladder: window [horizon - N', horizon + N']
    counts = np.empty(horizon + 1, dtype=np.int64)
    surv_mask = None
    run_max = dist[:, horizon].copy()
    masks = []
    for npr in range(horizon + 1):
        if npr > 0:
            lo, hi = horizon - npr, horizon + npr
            run_max = np.maximum(run_max, np.maximum(dist[:, lo], dist[:, hi]))
        m = run_max < delta
        counts[npr] = int(np.count_nonzero(m))
        masks.append(m)
    surv_mask = masks[-1]
    surv = center_states[surv_mask]

    # local orbit tube at the center and transverse distances; the tube
    # time is delta over the minimum speed along the local orbit, capped
    speed_c = fld.speed(center)
    tube = min(1.0, delta / max(speed_c, 1e-12))
    probe_pts = _orbit_arc(fld, center, np.linspace(-tube, tube, 33))
    v_min = float(np.min(np.linalg.norm(fld(probe_pts), axis=1)))
    tube = min(1.0, delta / max(v_min, 1e-12))
    n_tube = 400
    s_grid = np.linspace(-tube, tube, n_tube)
    tube_pts = _orbit_arc(fld, center, s_grid)
    v_tube = fld(tube_pts)
    sp_tube = np.linalg.norm(v_tube, axis=1, keepdims=True)
    u_tube = v_tube / np.maximum(sp_tube, 1e-300)

    def transverse(pts):
        if len(pts) == 0:
            return 0.0
        diff = pts[:, None, :] - tube_pts[None, :, :]
        d2 = np.einsum("abd,abd->ab", diff, diff)
        jn = np.argmin(d2, axis=1)
        dv = pts - tube_pts[jn]
        dv = dv - np.einsum("ad,ad->a", dv, u_tube[jn])[:, None] * u_tube[jn]
        return float(np.max(np.linalg.norm(dv, axis=1)))

    trans = np.array([transverse(center_states[m]) for m in masks])

    plane_c = _fcu_plane(fld, center, tol)
    rel = surv - center
    inp = rel @ plane_c.T
    off = rel - inp @ plane_c
    in_spread = float(np.max(np.linalg.norm(inp, axis=1))) if len(rel) else 0.0
    off_spread = float(np.max(np.linalg.norm(off, axis=1))) if len(rel) else 0.0

    return ExpansivenessProbe(
        center=center, delta=delta, horizon=horizon, tube_time=tube,
        survivor_counts=counts, transverse_by_n=trans,
        transverse_diameter=float(trans[-1]),
        in_plane_spread=in_spread, off_plane_spread=off_spread,
        survivor_states=surv, n_candidates=n_tot,
    )


@dataclass
class ContinuityScan:
    param: str
    values: np.ndarray
    slopes: np.ndarray
    noise: np.ndarray        # subsample spread per parameter point
    adjacent_diffs: np.ndarray
    excluded: list
    tables: list


def continuity_scan(make_field, param: str, values, eps_grid, n_grid,
                    k_size: int = 60000, n_traj: int = 60,
                    eps_read: float = 0.5, n_boot: int = 10,
                    tol: float = 1e-7, seed: int = 0,
                    validate_cones: bool = True, threads: int = 1) -> ContinuityScan:
    """Entropy growth slopes over a parameter grid with noise bars.

    make_field(value) builds the field at each grid point.  Points failing
    the cone-invariance probe are excluded from the adjacent-difference
    statistic.  Noise bars are the spread of slopes over n_boot half-size
    block subsamples (trajectory blocks are the resampling unit).
    """
    from .spectra import cone_invariance_check, oseledets_frames, transfer_operators
    from .flow import orbit_sample
    from .util import parallel_map

    values = np.asarray(values, dtype=float)

    def one(iv):
        i, v = iv
        fld = make_field(float(v))
        rng = rng_stream(seed, f"scan-{param}-{i}")
        samples = attractor_samples(fld, k_size, int(max(n_grid)),
                                    n_traj=n_traj, tol=tol, rng=rng)
        table = entropy_table(fld, samples, eps_grid, n_grid)
        boots = []
        blocks = np.unique(samples.block_id)
        for b in range(n_boot):
            pick = rng_stream(seed, f"scan-{param}-{i}-boot-{b}").choice(
                blocks, size=max(1, len(blocks) // 2), replace=False)
            rows = np.isin(samples.block_id, pick)
            boots.append(entropy_table(fld, samples.subset(rows),
                                       eps_grid, n_grid).slope(eps_read))
        ok = True
        if validate_cones:
            seg = orbit_sample(fld, [1.0, 1.0, 1.0], 400.0, 0.1, transient=50.0, tol=1e-9)
            ops = transfer_operators(fld, seg, tol=1e-9)
            frame = oseledets_frames(fld, seg, window=5.0, ops=ops)
            rep = cone_invariance_check(fld, seg, frame, a=0.3, ops=ops,
                                        rng=rng_stream(seed, f"scan-cone-{i}"))
            ok = rep.violations == 0
        return table, np.asarray(boots), ok

    results = parallel_map(one, list(enumerate(values)), threads=threads)
    slopes = np.array([r[0].slope(eps_read) for r in results])
    noise = np.array([float(np.std(r[1])) if len(r[1]) else 0.0 for r in results])
    ok = np.array([r[2] for r in results])
    excluded = [float(values[i]) for i in np.nonzero(~ok)[0]]
    good = np.nonzero(ok)[0]
    diffs = np.abs(np.diff(slopes[good])) if len(good) > 1 else np.empty(0)
    return ContinuityScan(
        param=param, values=values, slopes=slopes, noise=noise,
        adjacent_diffs=diffs, excluded=excluded, tables=[r[0] for r in results],
    )
