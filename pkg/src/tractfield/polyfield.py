"""Divergence-free polynomial vector fields and constrained least-squares fits.

A field of order n evaluates as ``v(u) = coeffs @ monomials(u)`` in a
normalized coordinate frame ``u = (p - offset) / scale`` that maps the region
of interest into roughly [-1, 1]^3.  Divergence freedom is a set of linear
equality constraints on the coefficients, enforced exactly by solving the
least-squares problem in the constraint null space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import (
    ConditioningError,
    DomainError,
    FormatError,
    UnderdeterminedError,
)
from .grids import Mask, _fmt, same_geometry

_RCOND_MAX = 1e12


def term_count(order: int) -> int:
    """Number of trivariate monomials of total degree <= order."""
    n = int(order)
    if n < 0:
        raise ValueError("order must be >= 0")
    return (n + 1) * (n + 2) * (n + 3) // 6


def monomial_exponents(order: int) -> np.ndarray:
    """Exponent triples (i, j, k) of the canonical monomial ordering.

    The x exponent i varies slowest, then j, then k; total degree <= order.
    For order 1 the monomials are [1, z, y, x].
    """
    n = int(order)
    if n < 0:
        raise ValueError("order must be >= 0")
    rows = [
        (i, j, k)
        for i in range(n + 1)
        for j in range(n + 1 - i)
        for k in range(n + 1 - i - j)
    ]
    return np.array(rows, dtype=np.int64).reshape(len(rows), 3)


def _power_table(vals: np.ndarray, order: int) -> np.ndarray:
    out = np.ones((len(vals), order + 1))
    for p in range(1, order + 1):
        out[:, p] = out[:, p - 1] * vals
    return out


def basis_matrix(points: np.ndarray, order: int) -> np.ndarray:
    """Monomial design matrix: row s holds every monomial of point s."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    exps = monomial_exponents(order)
    px = _power_table(pts[:, 0], order)
    py = _power_table(pts[:, 1], order)
    pz = _power_table(pts[:, 2], order)
    # fancy indexing along axis 1 can hand back an F-layout product, and
    # einsum sums in memory order; a fixed C layout keeps every downstream
    # reduction order independent of the batch shape
    return np.ascontiguousarray(px[:, exps[:, 0]] * py[:, exps[:, 1]] * pz[:, exps[:, 2]])


def _term_index(order: int):
    exps = monomial_exponents(order)
    return {tuple(e): idx for idx, e in enumerate(exps)}


def divergence_constraints(order: int) -> np.ndarray:
    """Linear constraints C @ vec(coeffs) = 0 equivalent to zero divergence.

    vec(coeffs) concatenates the x, y, z coefficient rows.  One constraint
    row exists per monomial of degree <= order - 1; an order-0 field has no
    constraints (shape (0, 3)).
    """
    n = int(order)
    m = term_count(n)
    lookup = _term_index(n)
    if n == 0:
        return np.zeros((0, 3 * m))
    low = monomial_exponents(n - 1)
    rows = np.zeros((len(low), 3 * m))
    for r, (p, q, s) in enumerate(low):
        rows[r, lookup[(p + 1, q, s)]] = p + 1
        rows[r, m + lookup[(p, q + 1, s)]] = q + 1
        rows[r, 2 * m + lookup[(p, q, s + 1)]] = s + 1
    return rows


@dataclass(frozen=True, eq=False)
class PolyField:
    """Polynomial vector field with an affine domain normalization.

    ``coeffs`` is (3, M) with M = term_count(order); evaluation maps a world
    point p to u = (p - offset) / scale and returns coeffs @ monomials(u).
    """

    order: int
    coeffs: np.ndarray
    offset: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        n = int(self.order)
        if n < 0:
            raise ValueError("order must be >= 0")
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != (3, term_count(n)):
            raise ValueError(
                f"coeffs must have shape (3, {term_count(n)}) for order {n}"
            )
        offset = self.offset
        scale = self.scale
        offset = np.zeros(3) if offset is None else np.asarray(offset, dtype=float)
        scale = np.ones(3) if scale is None else np.asarray(scale, dtype=float)
        if offset.shape != (3,) or scale.shape != (3,):
            raise ValueError("offset and scale must be 3-vectors")
        if not (scale > 0).all():
            raise ValueError("scale must be positive")
        object.__setattr__(self, "order", n)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "scale", scale)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.offset) / self.scale

    def evaluate(self, point) -> np.ndarray:
        return self.evaluate_many([point])[0]

    def evaluate_many(self, points) -> np.ndarray:
        """Field vectors at each world point, one row per point.

        Uses a fixed-order einsum contraction so each output row depends
        only on its own input row; results are invariant under batching.
        """
        design = basis_matrix(self.normalize(points), self.order)
        return np.einsum("sm,cm->sc", design, self.coeffs, optimize=False)

    def divergence_many(self, points) -> np.ndarray:
        """Divergence with respect to the normalized coordinates u."""
        u = self.normalize(points)
        m = term_count(self.order)
        cvec = np.concatenate([self.coeffs[0], self.coeffs[1], self.coeffs[2]])
        if self.order == 0:
            return np.zeros(len(u))
        low = basis_matrix(u, self.order - 1)
        cons = divergence_constraints(self.order)
        per_term = cons @ cvec
        return np.einsum("sm,m->s", low, per_term, optimize=False)

    def divergence_coefficients(self) -> np.ndarray:
        """Coefficients of the divergence polynomial in the order-1 basis."""
        cvec = np.concatenate([self.coeffs[0], self.coeffs[1], self.coeffs[2]])
        return divergence_constraints(self.order) @ cvec


def domain_from_mask(mask: Mask) -> tuple:
    """Offset (bounding-box center) and scale (half-extent, floored at half a
    voxel per axis) mapping the mask foreground into [-1, 1]^3.
    """
    pts = mask.foreground_points()
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    offset = 0.5 * (lo + hi)
    floor = 0.5 * np.asarray(mask.grid.spacing)
    scale = np.maximum(0.5 * (hi - lo), floor)
    return offset, scale


def fit_objective(
    field_: PolyField, points, targets, ridge: float = 0.0
) -> float:
    """Sum of squared residuals plus ridge * sum of squared coefficients."""
    res = field_.evaluate_many(points) - np.atleast_2d(np.asarray(targets, float))
    return float((res ** 2).sum() + float(ridge) * (field_.coeffs ** 2).sum())


def fit_objective_gradient(
    field_: PolyField, points, targets, ridge: float = 0.0
) -> np.ndarray:
    """Gradient of ``fit_objective`` with respect to the (3, M) coefficients."""
    design = basis_matrix(field_.normalize(points), field_.order)
    res = design @ field_.coeffs.T - np.atleast_2d(np.asarray(targets, float))
    return 2.0 * (res.T @ design + float(ridge) * field_.coeffs)


def fit_field(
    points,
    targets,
    order: int,
    offset=None,
    scale=None,
    ridge: float = 0.0,
) -> PolyField:
    """Least-squares divergence-free fit of target vectors at world points.

    Solves min ||D a - t||^2 + ridge ||a||^2 subject to the exact divergence
    constraints, by reducing to the constraint null space.  Raises
    UnderdeterminedError when there are fewer samples than free parameters
    and ConditioningError when the reduced system is numerically singular.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tgt = np.atleast_2d(np.asarray(targets, dtype=float))
    if pts.shape != tgt.shape or pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points and targets must both be (n, 3) arrays")
    ridge = float(ridge)
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    probe = PolyField(order, np.zeros((3, term_count(order))), offset, scale)
    cons = divergence_constraints(order)
    null = linalg.null_space(cons) if len(cons) else np.eye(3 * term_count(order))
    free = null.shape[1]
    if 3 * len(pts) < free:
        raise UnderdeterminedError(
            f"{len(pts)} samples give {3 * len(pts)} equations, fewer than "
            f"the {free} free parameters at order {order}; add samples or "
            "lower the order"
        )
    design = basis_matrix(probe.normalize(pts), order)
    m = term_count(order)
    # Reduced design: rows are samples per component, columns the null basis.
    reduced = np.vstack(
        [
            design @ null[:m],
            design @ null[m:2 * m],
            design @ null[2 * m:],
        ]
    )
    rhs = np.concatenate([tgt[:, 0], tgt[:, 1], tgt[:, 2]])
    if ridge > 0:
        # null basis is orthonormal, so ridge on the reduced coordinates
        # equals ridge on the full coefficient vector
        reduced = np.vstack([reduced, np.sqrt(ridge) * np.eye(free)])
        rhs = np.concatenate([rhs, np.zeros(free)])
    sol, _, rank, svals = np.linalg.lstsq(reduced, rhs, rcond=None)
    if rank < free:
        raise ConditioningError(
            f"reduced system is rank deficient ({rank} < {free}); the sample "
            "geometry does not constrain the fit"
        )
    if svals[0] > 0 and svals[0] / svals[-1] > _RCOND_MAX:
        raise ConditioningError(
            f"reduced system condition number {svals[0] / svals[-1]:.3e} "
            "exceeds the stability limit; add samples or raise ridge"
        )
    cvec = null @ sol
    coeffs = np.vstack([cvec[:m], cvec[m:2 * m], cvec[2 * m:]])
    return PolyField(order, coeffs, probe.offset, probe.scale)


RIDGE_PER_SAMPLE = 1e-8


def fit_bundle_field(prior, mask: Mask, order: int = 4, ridge=None) -> PolyField:
    """Divergence-free fit of the selected voxel directions inside the mask.

    Samples are the voxel centers that are both mask foreground and valid in
    the prior; the domain normalization comes from the mask bounding box.
    Requires at least term_count(order) usable voxels.  ridge=None picks
    RIDGE_PER_SAMPLE per sample, a floor against rank deficiency in thin
    tubes; pass 0.0 for an unregularized fit.
    """
    if not same_geometry(prior, mask.grid):
        raise DomainError("prior grid does not match the mask grid")
    keep = np.asarray(prior.valid, dtype=bool) & mask.foreground
    usable = int(keep.sum())
    m = term_count(order)
    if usable < m:
        raise UnderdeterminedError(
            f"{usable} usable voxels cannot support {m} basis terms at order "
            f"{order}; lower the order or widen the prior"
        )
    idx = np.argwhere(keep)
    pts = np.asarray(mask.grid.origin) + idx * np.asarray(mask.grid.spacing)
    tgt = np.asarray(prior.directions, dtype=float)[idx[:, 0], idx[:, 1], idx[:, 2]]
    offset, scale = domain_from_mask(mask)
    if ridge is None:
        ridge = RIDGE_PER_SAMPLE * usable
    return fit_field(pts, tgt, order, offset, scale, ridge)


def save_field(field_: PolyField, path):
    """Write a field as a small ASCII text file."""
    m = term_count(field_.order)
    lines = [
        f"order: {field_.order}",
        f"terms: {m}",
        "offset: " + " ".join(_fmt(v) for v in field_.offset),
        "scale: " + " ".join(_fmt(v) for v in field_.scale),
        "",
    ]
    for row in field_.coeffs:
        lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_field(path) -> PolyField:
    """Read a field written by ``save_field``."""
    with open(path, "r", encoding="ascii", newline="\n") as fh:
        text = fh.read()
    parts = text.split("\n\n", 1)
    if len(parts) != 2:
        raise FormatError(f"{path}: missing blank line after the header")
    fields = {}
    for line in parts[0].splitlines():
        key, sep, value = line.partition(": ")
        if not sep or key in fields:
            raise FormatError(f"{path}: malformed header line {line!r}")
        fields[key] = value
    for key in ("order", "terms", "offset", "scale"):
        if key not in fields:
            raise FormatError(f"{path}: missing header key {key!r}")
    try:
        order = int(fields["order"])
        terms = int(fields["terms"])
        offset = np.array([float(v) for v in fields["offset"].split()])
        scale = np.array([float(v) for v in fields["scale"].split()])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if order < 0 or terms != term_count(order):
        raise FormatError(
            f"{path}: terms {terms} does not match order {order}"
        )
    rows = [line for line in parts[1].splitlines() if line.strip()]
    if len(rows) != 3:
        raise FormatError(f"{path}: expected 3 coefficient rows, found {len(rows)}")
    try:
        coeffs = np.array([[float(v) for v in row.split()] for row in rows])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if coeffs.shape != (3, terms):
        raise FormatError(f"{path}: coefficient rows must hold {terms} values")
    try:
        return PolyField(order, coeffs, offset, scale)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
