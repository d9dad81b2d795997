"""Regularized multiplicative-chaos measures: quantum area and boundary length.

Cell masses follow eps^{gamma^2/2} e^{gamma h(z)} |cell| in the bulk and
eps^{gamma^2/4} e^{(gamma/2) h(x)} |arc| on the boundary, with the field
evaluated at cell/arc centers.  Within 3 eps of an insertion the divergent
log profile is integrated instead of sampled: exactly (in closed form) for
the grid-centered interior insertion, and with the distance capped at eps
otherwise, matching the circle-average identity
avg_{|w - z| = eps} log|w| = log max(|z|, eps).

Adding a constant c to the field multiplies area masses by e^{gamma c} and
boundary masses by e^{gamma c / 2} exactly; these scalings are algebraic,
not statistical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import FieldSample


@dataclass
class ChaosMeasure:
    """Weighted cells (area) or arcs (boundary) of one chaos realization."""

    kind: str  # "area" | "boundary"
    ids: np.ndarray
    locations: np.ndarray
    sizes: np.ndarray
    masses: np.ndarray
    eps: float
    gamma: float

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def to_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("id,x,y,size,mass\n")
            for i, z, s, m in zip(self.ids, self.locations, self.sizes, self.masses):
                f.write(f"{i},{z.real:.12g},{z.imag:.12g},{s:.12g},{m:.12g}\n")


def _power_integral(r0: float, r1: float, p: float) -> float:
    """integral of r^p dr over [r0, r1] (log case at p = -1)."""
    if abs(p + 1.0) < 1e-12:
        return math.log(r1 / r0)
    return (r1 ** (p + 1.0) - r0 ** (p + 1.0)) / (p + 1.0)


def _capped_radial_integral(r0: float, r1: float, q: float, eps: float) -> float:
    """integral of max(r, eps)^{-q} r dr over [r0, r1]."""
    if r1 <= eps:
        return eps**-q * 0.5 * (r1**2 - r0**2)
    out = 0.0
    if r0 < eps:
        out += eps**-q * 0.5 * (eps**2 - r0**2)
        r0 = eps
    return out + _power_integral(r0, r1, 1.0 - q)


def area_measure(fieldsample: FieldSample, gamma: float | None = None) -> ChaosMeasure:
    """Quantum area of one field realization on its grid cells.

    When the sample carries a center scale-ladder and a centered interior
    insertion, the disk of radius eps around the insertion is carved out of
    the grid cells and measured instead as a stack of annuli at their own
    local scales, each weighted by the ladder's circle average there.  This
    restores the scale-supremum mechanism that gives the total area its
    power tail, which no fixed-scale field can produce.
    """
    g = fieldsample.grid
    if g.cell_areas is None:
        raise ValueError("grid carries no interior cells")
    if gamma is None:
        if fieldsample.params is None:
            raise ValueError("gamma unknown: pass it or attach params to the field")
        gamma = fieldsample.params.gamma
    eps = g.eps
    nodes = g.nodes
    areas = g.cell_areas
    base = fieldsample.gaussian + fieldsample.constant
    ladder_s = fieldsample.metadata.get("center_ladder_s")
    profile_factors = np.ones(nodes.size)
    sing = np.zeros(nodes.size)
    center_alpha = None
    for k, ins in enumerate(fieldsample.insertions):
        coeff = ins.alpha if not ins.boundary else ins.alpha / 2.0
        d1 = np.abs(nodes - ins.location)
        if g.domain == "disk":
            d2 = np.maximum(np.abs(1 - nodes * np.conj(ins.location)), eps)
            regular = -coeff * np.log(d2)
        else:
            regular = np.zeros(nodes.size)
        near = d1 < 3.0 * eps
        sing = sing + regular
        if ins.location == 0 and g.radii is not None and not ins.boundary:
            # Exact annulus-sector integral around the centered insertion;
            # with a ladder the sub-eps core belongs to the ladder annuli.
            center_alpha = coeff
            q = gamma * coeff
            floor = eps if ladder_s is not None else 0.0
            dr = g.radii[1] - g.radii[0] if g.radii.size > 1 else 2 * g.radii[0]
            far = ~near
            sing = sing - np.where(far, coeff * np.log(np.maximum(d1, 1e-300)), 0.0)
            rows = np.unique(np.rint((np.abs(nodes[near]) - g.radii[0]) / dr).astype(int))
            scale = {}
            for row in rows:
                r_c = g.radii[row]
                r0, r1 = max(r_c - dr / 2, 0.0), r_c + dr / 2
                if ladder_s is not None:
                    r0 = max(r0, floor)
                    cell_int = _power_integral(r0, r1, 1.0 - q) if r1 > r0 else 0.0
                else:
                    cell_int = _capped_radial_integral(r0, r1, q, eps)
                scale[row] = cell_int / (0.5 * ((r_c + dr / 2) ** 2 - max(r_c - dr / 2, 0.0) ** 2))
            idx = np.flatnonzero(near)
            rows_idx = np.rint((np.abs(nodes[idx]) - g.radii[0]) / dr).astype(int)
            profile_factors[idx] *= np.array([scale[r] for r in rows_idx])
        else:
            # Capped center evaluation (integrable exponents only).
            sing = sing - coeff * np.log(np.maximum(d1, np.where(near, eps, 0.0)))
    vals = base + sing
    masses = eps ** (gamma**2 / 2.0) * np.exp(gamma * vals) * areas * profile_factors
    ids = np.arange(nodes.size)
    locations = nodes
    sizes = areas
    if ladder_s is not None and center_alpha is not None:
        x_mid = fieldsample.metadata["center_ladder_x"]
        reg0 = fieldsample.constant
        for ins in fieldsample.insertions:
            if ins.location == 0 and not ins.boundary:
                continue  # own regular part -log|1 - 0| vanishes at the center
            coeff = ins.alpha if not ins.boundary else ins.alpha / 2.0
            reg0 += -coeff * math.log(max(abs(ins.location), eps))
        a_out = np.exp(-ladder_s[:-1])
        a_in = np.exp(-ladder_s[1:])
        s_mid = 0.5 * (ladder_s[:-1] + ladder_s[1:])
        delta_mid = np.exp(-s_mid)
        ann = (
            delta_mid ** (gamma**2 / 2.0)
            * np.exp(gamma * (x_mid + center_alpha * s_mid + reg0))
            * math.pi
            * (a_out**2 - a_in**2)
        )
        # Frozen-walk closure below the ladder: the remaining integral of
        # r^{gamma^2/2 - gamma alpha} 2 pi r dr has exponent gamma (Q - alpha).
        p_tail = 2.0 + gamma**2 / 2.0 - gamma * center_alpha
        tail = 0.0
        if p_tail > 0:
            tail = math.exp(gamma * (x_mid[-1] + reg0)) * 2.0 * math.pi * a_in[-1] ** p_tail / p_tail
        core_mass = float(np.sum(ann) + tail)
        masses = np.concatenate([masses, [core_mass]])
        ids = np.concatenate([ids, [-1]])
        locations = np.concatenate([locations, [0.0 + 0.0j]])
        sizes = np.concatenate([sizes, [math.pi * eps**2]])
    if not np.all(np.isfinite(masses)):
        raise ValueError("non-finite chaos mass; field value diverged at a cell center")
    return ChaosMeasure(
        kind="area",
        ids=ids,
        locations=locations,
        sizes=sizes,
        masses=masses,
        eps=eps,
        gamma=gamma,
    )


def boundary_measure(
    fieldsample: FieldSample, arcs: np.ndarray | None = None, gamma: float | None = None
) -> ChaosMeasure:
    """Quantum boundary length over the grid's boundary arcs.

    ``arcs`` selects a subset of boundary-node indices (default: all).  Arc
    masses within 3 eps of a boundary insertion integrate the log profile
    along the boundary (arc-length distance, capped at eps).
    """
    g = fieldsample.grid
    if g.arc_lengths is None or g.n_boundary == 0:
        raise ValueError("grid carries no boundary arcs")
    if gamma is None:
        if fieldsample.params is None:
            raise ValueError("gamma unknown: pass it or attach params to the field")
        gamma = fieldsample.params.gamma
    eps = g.eps
    idx = np.arange(g.n_boundary) if arcs is None else np.asarray(arcs, dtype=int)
    x = g.boundary_nodes[idx]
    lengths = g.arc_lengths[idx]
    base = fieldsample.gaussian_boundary[idx] + fieldsample.constant
    sing = np.zeros(idx.size)
    profile = np.ones(idx.size)
    for ins in fieldsample.insertions:
        coeff = ins.alpha if not ins.boundary else ins.alpha / 2.0
        if not ins.boundary:
            d1 = np.maximum(np.abs(x - ins.location), eps)
            d2 = np.maximum(np.abs(1 - x * np.conj(ins.location)), eps)
            sing = sing - coeff * (np.log(d1) + np.log(d2))
            continue
        # Boundary insertion: G restricted to the circle is -2 log|x - s|.
        q = gamma * coeff  # boundary mass profile exponent |x - s|^{-q}
        if q >= 1.0:
            raise ValueError(f"non-integrable boundary insertion (gamma*beta/2 = {q} >= 1)")
        ang_s = math.atan2(ins.location.imag, ins.location.real)
        ang_x = np.angle(x)
        sep = np.angle(np.exp(1j * (ang_x - ang_s)))  # signed arc distance
        near = np.abs(sep) < 3.0 * eps
        far = ~near
        sing = sing - np.where(far, 2.0 * coeff * np.log(np.maximum(np.abs(x - ins.location), 1e-300)), 0.0)
        for j in np.flatnonzero(near):
            half = lengths[j] / 2.0
            a0, a1 = sep[j] - half, sep[j] + half
            # integral of max(|u|, eps)^{-q} du over [a0, a1]
            def seg(lo, hi):
                if hi <= lo:
                    return 0.0
                out = 0.0
                if lo < eps:
                    cap_hi = min(hi, eps)
                    out += (cap_hi - lo) * eps**-q
                    lo = cap_hi
                if hi > lo:
                    out += _power_integral(lo, hi, -q)
                return out

            if a0 >= 0:
                total = seg(a0, a1)
            elif a1 <= 0:
                total = seg(-a1, -a0)
            else:
                total = seg(0.0, -a0) + seg(0.0, a1)
            profile[j] *= total / lengths[j]
    vals = base + sing
    masses = eps ** (gamma**2 / 4.0) * np.exp(0.5 * gamma * vals) * lengths * profile
    if not np.all(np.isfinite(masses)):
        raise ValueError("non-finite boundary mass")
    return ChaosMeasure(
        kind="boundary",
        ids=idx,
        locations=x,
        sizes=lengths,
        masses=masses,
        eps=eps,
        gamma=gamma,
    )


def arc_split(measure: ChaosMeasure, p1: complex, p2: complex):
    """Chaos lengths of the two complementary boundary arcs between p1, p2.

    Returns (ccw from p1 to p2, ccw from p2 to p1); the two parts sum to the
    total mass exactly.  End arcs are split by linear fraction.
    """
    if measure.kind != "boundary":
        raise ValueError("arc_split needs a boundary measure")
    a1 = math.atan2(p1.imag, p1.real) % (2 * math.pi)
    a2 = math.atan2(p2.imag, p2.real) % (2 * math.pi)
    if abs(np.abs(p1) - 1) > 1e-6 or abs(np.abs(p2) - 1) > 1e-6:
        raise ValueError("split points must lie on the unit circle")
    if p1 == p2:
        raise ValueError("split points must differ")
    centers = np.mod(np.angle(measure.locations), 2 * math.pi)
    halfw = measure.sizes / 2.0

    def mass_ccw(lo: float, hi: float) -> float:
        """Mass of the ccw arc from angle lo to angle hi."""
        span = (hi - lo) % (2 * math.pi)
        if span == 0:
            return 0.0
        # overlap of [lo, lo+span] with each node arc, on the circle
        rel = np.mod(centers - lo, 2 * math.pi)
        starts = rel - halfw
        ends = rel + halfw
        overlap = np.zeros(centers.size)
        for shift in (-2 * math.pi, 0.0, 2 * math.pi):
            s = np.clip(starts + shift, 0.0, span)
            e = np.clip(ends + shift, 0.0, span)
            overlap += np.maximum(e - s, 0.0)
        frac = overlap / (2 * halfw)
        return float(np.sum(frac * measure.masses))

    first = mass_ccw(a1, a2)
    return first, measure.total - first


def two_eps_consistency(grid_fn, seed: int, gamma: float, eps: float):
    """Total-area ratio of the same noise sampled at eps and eps/2.

    ``grid_fn(eps) -> (grid, factorization)``; the same Philox stream drives
    both resolutions, so the ratio isolates the regularization dependence.
    Returned as total(eps/2) / total(eps).
    """
    from .field import sample_gff

    totals = []
    for e in (eps, eps / 2.0):
        grid, fact = grid_fn(e)
        f = sample_gff(grid, fact, seed)
        totals.append(area_measure(f, gamma=gamma).total)
    return totals[1] / totals[0]
