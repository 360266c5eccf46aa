"""Vector field definitions and equilibrium analysis.

A field is described by a :class:`VectorFieldSpec` carrying the velocity map
and its exact Jacobian, both vectorized over a leading batch axis.  The
Lorenz system is built in; user fields are polynomial term lists (so the
Jacobian is exact by term differentiation) loaded from a small text format.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

HYPERBOLIC = "hyperbolic"
NON_HYPERBOLIC = "non-hyperbolic"

#: real parts closer to zero than this count as non-hyperbolic
TOL_SPEC = 1e-8


class FieldError(RuntimeError):
    pass


@dataclass(frozen=True)
class VectorFieldSpec:
    """A smooth vector field with analytic Jacobian.

    field_eval maps states of shape (..., d) to velocities of the same
    shape; jacobian_eval maps (..., d) to (..., d, d).  kernel, when
    present, is the compiled-evaluator payload consumed by the numba
    fast path in flow.py (built-in and polynomial fields carry one).
    """

    name: str
    dimension: int
    params: dict
    field_eval: callable
    jacobian_eval: callable
    kernel: tuple | None = None

    def __call__(self, x):
        return self.field_eval(np.asarray(x, dtype=float))

    def jac(self, x):
        return self.jacobian_eval(np.asarray(x, dtype=float))

    def speed(self, x):
        return float(np.linalg.norm(self(x)))

    def negated(self) -> "VectorFieldSpec":
        f, j = self.field_eval, self.jacobian_eval
        ker = None
        if self.kernel is not None:
            kind, sgn, *rest = self.kernel
            ker = (kind, -sgn, *rest)
        return replace(
            self,
            name=self.name + ":reversed",
            field_eval=lambda x: -f(x),
            jacobian_eval=lambda x: -j(x),
            kernel=ker,
        )


def lorenz_field(sigma: float = 10.0, r: float = 28.0, b: float = 8.0 / 3.0) -> VectorFieldSpec:
    """Classical Lorenz system.

    dx/dt = sigma (y - x),  dy/dt = x (r - z) - y,  dz/dt = x y - b z.
    The Jacobian trace is the constant -(sigma + 1 + b).
    """

    def f(x):
        x = np.asarray(x, dtype=float)
        u, v, w = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([sigma * (v - u), u * (r - w) - v, u * v - b * w], axis=-1)

    def jac(x):
        x = np.asarray(x, dtype=float)
        u, v, w = x[..., 0], x[..., 1], x[..., 2]
        J = np.zeros(x.shape[:-1] + (3, 3))
        J[..., 0, 0] = -sigma
        J[..., 0, 1] = sigma
        J[..., 1, 0] = r - w
        J[..., 1, 1] = -1.0
        J[..., 1, 2] = -u
        J[..., 2, 0] = v
        J[..., 2, 1] = u
        J[..., 2, 2] = -b
        return J

    e0 = np.zeros(0, dtype=np.int64)
    e2 = np.zeros((0, 3), dtype=np.int64)
    kernel = (0, 1.0, np.array([sigma, r, b]), e0, np.zeros(0), e2, e0, np.zeros(0), e2, e0)
    return VectorFieldSpec(
        name=f"lorenz(sigma={sigma:g},r={r:g},b={b:g})",
        dimension=3,
        params={"sigma": sigma, "r": r, "b": b},
        field_eval=f,
        jacobian_eval=jac,
        kernel=kernel,
    )


def polynomial_field(terms, dimension: int, name: str = "poly") -> VectorFieldSpec:
    """Field whose components are sums of monomial terms.

    terms: iterable of (component, coefficient, exponents) with component in
    0..d-1 and exponents a length-d integer tuple.  The Jacobian comes from
    term-by-term differentiation, so it is exact.
    """
    terms = [(int(c), float(a), np.asarray(e, dtype=np.int64)) for c, a, e in terms]
    d = int(dimension)
    for c, _, e in terms:
        if not 0 <= c < d or e.shape != (d,) or np.any(e < 0):
            raise FieldError(f"bad polynomial term: component {c}, exponents {e}")

    comp = np.array([t[0] for t in terms], dtype=np.int64)
    coef = np.array([t[1] for t in terms])
    expo = np.array([t[2] for t in terms]) if terms else np.zeros((0, d), dtype=np.int64)

    def f(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (d,))
        mono = np.prod(x[..., None, :] ** expo, axis=-1)  # (..., nterms)
        for k in range(d):
            sel = comp == k
            if np.any(sel):
                out[..., k] = np.sum(coef[sel] * mono[..., sel], axis=-1)
        return out

    # d/dx_j of a*x^e = a*e_j*x^(e - delta_j); rows with e_j = 0 vanish
    dcomp, dcoef, dexpo, dvar = [], [], [], []
    for c, a, e in terms:
        for j in range(d):
            if e[j] > 0:
                e2 = e.copy()
                e2[j] -= 1
                dcomp.append(c)
                dcoef.append(a * e[j])
                dexpo.append(e2)
                dvar.append(j)
    dcomp = np.array(dcomp, dtype=np.int64)
    dcoef = np.array(dcoef)
    dexpo = np.array(dexpo) if dexpo else np.zeros((0, d), dtype=np.int64)
    dvar = np.array(dvar, dtype=np.int64)

    def jac(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (d, d))
        if len(dcomp) == 0:
            return out
        mono = np.prod(x[..., None, :] ** dexpo, axis=-1)
        for k in range(d):
            for j in range(d):
                sel = (dcomp == k) & (dvar == j)
                if np.any(sel):
                    out[..., k, j] = np.sum(dcoef[sel] * mono[..., sel], axis=-1)
        return out

    kernel = (1, 1.0, np.zeros(3), comp, coef, expo.astype(np.int64),
              dcomp, dcoef, dexpo.astype(np.int64), dvar)
    return VectorFieldSpec(
        name=name, dimension=d, params={"n_terms": len(terms)},
        field_eval=f, jacobian_eval=jac, kernel=kernel,
    )


def linear_field(A, name: str = "linear") -> VectorFieldSpec:
    """Linear field x' = A x expressed through the polynomial machinery."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    terms = []
    for i in range(d):
        for j in range(d):
            if A[i, j] != 0.0:
                e = np.zeros(d, dtype=np.int64)
                e[j] = 1
                terms.append((i, A[i, j], e))
    return polynomial_field(terms, d, name=name)


def parse_polynomial_field(text: str, name: str = "poly") -> VectorFieldSpec:
    """Parse the term-list text format.

    One term per line: `component coefficient e1 e2 ... ed`, components
    1-based, blank lines and `#` comments ignored.  The dimension is the
    number of exponent columns.
    """
    terms = []
    d = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 3:
            raise FieldError(f"line {ln}: expected `component coefficient e1 ... ed`")
        this_d = len(parts) - 2
        if d is None:
            d = this_d
        elif this_d != d:
            raise FieldError(f"line {ln}: inconsistent dimension {this_d} (expected {d})")
        c = int(parts[0]) - 1
        if c < 0:
            raise FieldError(f"line {ln}: components are 1-based")
        terms.append((c, float(parts[1]), [int(p) for p in parts[2:]]))
    if d is None:
        raise FieldError("empty polynomial field definition")
    return polynomial_field(terms, d, name=name)


def load_polynomial_field(path: str, name: str | None = None) -> VectorFieldSpec:
    with open(path) as fh:
        text = fh.read()
    return parse_polynomial_field(text, name=name or path)


def jacobian_fd_error(fld: VectorFieldSpec, points, h: float = 1e-6) -> float:
    """Max relative deviation of central differences from the Jacobian.

    Consistency check of field_eval against jacobian_eval; the two agree to
    ~1e-5 relative for properly paired definitions.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = fld.dimension
    worst = 0.0
    for x in points:
        J = fld.jac(x)
        scale = max(1.0, float(np.max(np.abs(J))))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            col = (fld(x + e) - fld(x - e)) / (2 * h)
            worst = max(worst, float(np.max(np.abs(col - J[:, j]))) / scale)
    return worst


@dataclass
class Equilibrium:
    """A zero of the field with its linearization spectrum."""

    point: np.ndarray
    eigenvalues: np.ndarray  # sorted by descending real part
    classification: str = ""
    lorenz_like: bool = False
    residual: float = np.nan

    def as_row(self):
        return (
            list(map(float, self.point))
            + list(map(float, self.eigenvalues.real))
            + list(map(float, self.eigenvalues.imag))
            + [int(self.classification == HYPERBOLIC), int(self.lorenz_like)]
        )


def default_seed_grid(region, per_axis: int = 5) -> np.ndarray:
    """Coarse lattice of Newton seeds over an axis-aligned box."""
    region = np.asarray(region, dtype=float)
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in region]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _newton_root(fld: VectorFieldSpec, x0, tol_eq: float, max_iter: int = 50):
    """Damped Newton for X(x) = 0. Returns the root or None."""
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(max_iter):
        v = fld(x)
        r = np.linalg.norm(v)
        if not np.isfinite(r):
            return None
        if r <= tol_eq:
            return x
        try:
            step = np.linalg.solve(fld.jac(x), -v)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(fld.jac(x), -v, rcond=None)
        lam = 1.0
        for _ in range(20):
            xn = x + lam * step
            rn = np.linalg.norm(fld(xn))
            if np.isfinite(rn) and rn < r:
                break
            lam *= 0.5
        else:
            return None
        x = xn
    return x if np.linalg.norm(fld(x)) <= tol_eq else None


def find_equilibria(fld: VectorFieldSpec, seeds, tol_eq: float = 1e-10) -> list[Equilibrium]:
    """Newton-refine each seed to a zero of the field.

    Non-convergent seeds are dropped (and logged), duplicates within 1e-6
    merged.  Each returned equilibrium carries the spectrum of the Jacobian
    at its point and is classified.
    """
    if tol_eq <= 0:
        raise ValueError("tol_eq must be positive")
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    roots = []
    dropped = 0
    for s in seeds:
        x = _newton_root(fld, s, tol_eq)
        if x is None:
            dropped += 1
            continue
        if not any(np.linalg.norm(x - r) <= 1e-6 for r in roots):
            roots.append(x)
    if dropped:
        logger.info("find_equilibria: dropped %d non-convergent seed(s)", dropped)
    out = []
    for x in sorted(roots, key=lambda p: tuple(np.round(p, 9))):
        eq = Equilibrium(point=x, eigenvalues=np.zeros(fld.dimension, dtype=complex),
                         residual=float(np.linalg.norm(fld(x))))
        out.append(classify_equilibrium(fld, eq))
    return out


def classify_equilibrium(fld: VectorFieldSpec, eq: Equilibrium,
                         tol_spec: float = TOL_SPEC) -> Equilibrium:
    """Fill in spectrum, hyperbolicity, and the Lorenz-like flag.

    Lorenz-like means the two leading directions form a weak-stable /
    unstable pair whose rates sum positive (area growth on their plane)
    while every other direction contracts strictly faster: with eigenvalues
    sorted by descending real part, Re l1 > 0 > Re l2, Re l1 + Re l2 > 0,
    and Re l_i < Re l2 for i >= 3.  Equivalently the time-one linearization
    restricted to the leading 2-plane has exactly one eigenvalue of norm
    less than one.
    """
    try:
        ev = np.linalg.eigvals(fld.jac(eq.point))
    except np.linalg.LinAlgError as exc:
        raise FieldError(f"eigen-solver failed at equilibrium {eq.point}") from exc
    order = np.argsort(-ev.real, kind="stable")
    ev = ev[order]
    hyperbolic = bool(np.all(np.abs(ev.real) > tol_spec))
    lorenz_like = False
    if len(ev) >= 2:
        l1, l2 = ev[0].real, ev[1].real
        rest_ok = bool(np.all(ev[2:].real < l2)) if len(ev) > 2 else True
        lorenz_like = bool(l2 < 0.0 < l1 and l1 + l2 > 0.0 and rest_ok)
    eq.eigenvalues = ev
    eq.classification = HYPERBOLIC if hyperbolic else NON_HYPERBOLIC
    eq.lorenz_like = lorenz_like
    return eq


def equilibria_csv(equilibria: list[Equilibrium], dimension: int) -> str:
    """CSV per the interchange format: states, Re/Im spectrum, flags."""
    cols = (
        [f"x{i+1}" for i in range(dimension)]
        + [f"re_l{i+1}" for i in range(dimension)]
        + [f"im_l{i+1}" for i in range(dimension)]
        + ["hyperbolic", "lorenz_like"]
    )
    lines = [",".join(cols)]
    for eq in equilibria:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in eq.as_row()))
    return "\n".join(lines) + "\n"
