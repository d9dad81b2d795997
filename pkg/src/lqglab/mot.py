"""Boundary-length processes: correlated Brownian samplers and extraction.

The tree-coordinate pair (X_t, Y_t) is two-dimensional Brownian motion with
per-unit-time covariance a_sq * [[1, corr], [corr, 1]].  Its sum X + Y is
Brownian with variance rate 2 a_sq (1 + corr), whose first passage to
-ell0 follows InverseGamma(1/2, ell0^2 / (2 sigma^2)); first-passage
detection uses the exact Brownian-bridge hit probability per step,
exp(-2 d0 d1 / (sigma^2 h)), so the hitting law carries no O(sqrt(step))
barrier bias at any step size.  Crossing positions within a step are placed
by linear interpolation.

The extraction pipeline reads (X, Y, L) off a simulated field/chain pair: at
each scheduled capacity time the field is pushed through the centered map
(tip to 1, interior fixed point preserved) onto a fresh boundary grid, the
total boundary chaos gives L, and the split at the tip image and at the
image of a tracked reference point gives the two arc lengths whose
increments define dX and dY.  The reference point is reset whenever it is
swallowed: at the absorption time the vanishing arc is on a known side, so
increments chain continuously across resets and the identity
L = ell0 + X + Y holds exactly by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .field import FieldSample, GridSpec
from .gmc import arc_split, boundary_measure
from .loewner import (
    DiagnosticError,
    LoewnerChain,
    RadialFlowState,
    _forward_map_and_derivative,
    _phi_arr,
)
from .params import LqgParams
from .rng import sample_rng


@dataclass
class CrtPath:
    """Correlated Brownian pair on a time grid, X_0 = Y_0 = 0."""

    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    params: LqgParams
    stopped: bool = False
    censored: bool = False

    @property
    def tau(self) -> float:
        return float(self.times[-1])


@dataclass
class BoundaryLengthProcess:
    """(X, Y, L) sampled at quantum-area times."""

    area_times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    L: np.ndarray
    ell0: float
    terminated: bool
    capacity_times: np.ndarray | None = None
    tolerance: float = 0.0
    metadata: dict = field(default_factory=dict)

    def identity_residual(self) -> np.ndarray:
        return self.L - (self.ell0 + self.X + self.Y)

    def to_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("area_time,X,Y,L,tolerance\n")
            for t, x, y, l in zip(self.area_times, self.X, self.Y, self.L):
                f.write(f"{t:.12g},{x:.12g},{y:.12g},{l:.12g},{self.tolerance:.3g}\n")


@dataclass
class SpherePair:
    """Excursion L >= 0 with companion Brownian path Z on [0, tau]."""

    times: np.ndarray
    L: np.ndarray
    Z: np.ndarray
    params: LqgParams
    censored: bool = False

    @property
    def tau(self) -> float:
        return float(self.times[-1])

    def qv_rates(self, barrier_margin: float = 8.0):
        """(L_rate, Z_rate) from increments away from the absorbing barrier.

        Steps are kept only when the step-start level L_k exceeds
        ``barrier_margin`` standard deviations of one increment -- a
        predictable selection, so the kept increments keep their Brownian
        rates, while survival conditioning (a factor 1 - exp(-2 L_k L_{k+1}
        / (sigma^2 h))) is negligible at this margin.  The margin also
        excludes every adaptive step (sized at 5 sigma sqrt(h) = L_k), whose
        size-level coupling would otherwise bias the selection.
        """
        dts = np.diff(self.times)
        dL = np.diff(self.L)
        dZ = np.diff(self.Z)
        sig = math.sqrt(self.params.sum_var_rate)
        keep = self.L[:-1] > barrier_margin * sig * np.sqrt(dts)
        if not np.any(keep):
            return math.nan, math.nan
        tt = np.sum(dts[keep])
        return float(np.sum(dL[keep] ** 2) / tt), float(np.sum(dZ[keep] ** 2) / tt)

    def to_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("t,L,Z\n")
            for t, l, z in zip(self.times, self.L, self.Z):
                f.write(f"{t:.12g},{l:.12g},{z:.12g}\n")


def sample_crt(params: LqgParams, T: float, step: float, seed: int) -> CrtPath:
    """Correlated 2D Brownian motion with the tree covariance."""
    if T <= 0 or step <= 0:
        raise ValueError("T and step must be positive")
    n = int(math.ceil(T / step - 1e-12))
    times = np.concatenate([[0.0], np.minimum(step * np.arange(1, n + 1), T)])
    dts = np.diff(times)
    rng = sample_rng(seed)
    sig = math.sqrt(params.a_sq)
    rho = params.corr
    xi = rng.standard_normal((n, 2))
    dx = sig * np.sqrt(dts) * xi[:, 0]
    dy = sig * np.sqrt(dts) * (rho * xi[:, 0] + math.sqrt(1 - rho**2) * xi[:, 1])
    return CrtPath(
        times=times,
        X=np.concatenate([[0.0], np.cumsum(dx)]),
        Y=np.concatenate([[0.0], np.cumsum(dy)]),
        params=params,
    )


def stopped_crt_disk(
    params: LqgParams,
    ell0: float,
    step: float,
    seed: int,
    T_guard: float | None = None,
) -> CrtPath:
    """Correlated pair run until ell0 + X + Y first hits zero.

    The sum process is checked for within-step hits with the exact bridge
    probability; at the crossing the pair is linearly interpolated so that
    ell0 + X_tau + Y_tau = 0 exactly.  Paths that survive past T_guard
    (default 1000 * ell0^2) are censored and flagged.
    """
    if ell0 <= 0:
        raise ValueError("initial boundary length must be positive")
    if T_guard is None:
        T_guard = 1000.0 * ell0**2
    rng = sample_rng(seed)
    sig = math.sqrt(params.a_sq)
    rho = params.corr
    sig_sum2 = params.sum_var_rate
    times = [0.0]
    X = [0.0]
    Y = [0.0]
    t, x, y = 0.0, 0.0, 0.0
    while t < T_guard:
        d0 = ell0 + x + y
        h = step * max(1.0, (d0 / (4.0 * math.sqrt(sig_sum2 * step))) ** 2)
        h = min(h, T_guard - t) if T_guard - t > step else (T_guard - t)
        h = max(h, 1e-15)
        g1, g2 = rng.standard_normal(2)
        dx = sig * math.sqrt(h) * g1
        dy = sig * math.sqrt(h) * (rho * g1 + math.sqrt(1 - rho**2) * g2)
        d1 = d0 + dx + dy
        if d1 <= 0.0:
            frac = d0 / (d0 - d1)
            times.append(t + frac * h)
            X.append(x + frac * dx)
            Y.append(y + frac * dy)
            return CrtPath(np.array(times), np.array(X), np.array(Y), params, stopped=True)
        if rng.uniform() < math.exp(-2.0 * d0 * d1 / (sig_sum2 * h)):
            # Bridge dipped to the barrier inside the step: place the hit at
            # mid-step and balance the pair so the level is exactly zero.
            corr_shift = -(ell0 + x + 0.5 * dx + y + 0.5 * dy) / 2.0
            times.append(t + 0.5 * h)
            X.append(x + 0.5 * dx + corr_shift)
            Y.append(y + 0.5 * dy + corr_shift)
            return CrtPath(np.array(times), np.array(X), np.array(Y), params, stopped=True)
        t += h
        x += dx
        y += dy
        times.append(t)
        X.append(x)
        Y.append(y)
    return CrtPath(np.array(times), np.array(X), np.array(Y), params, stopped=False, censored=True)


def stopped_crt_taus(
    params: LqgParams,
    ell0: float,
    step: float,
    master_seed: int,
    n: int,
    T_guard: float | None = None,
) -> tuple:
    """Vectorized hitting times of the stopped pair across ``n`` samples.

    Returns (taus, censored_mask); censored entries hold T_guard.  Same
    dynamics as :func:`stopped_crt_disk` restricted to the sum process.
    """
    if T_guard is None:
        T_guard = 1000.0 * ell0**2
    sig2 = params.sum_var_rate
    taus = np.full(n, T_guard)
    censored = np.ones(n, dtype=bool)
    block = 20000
    for s0 in range(0, n, block):
        s1 = min(s0 + block, n)
        m = s1 - s0
        rngs = [sample_rng(master_seed, i) for i in range(s0, s1)]
        t = np.zeros(m)
        d = np.full(m, ell0)
        alive = np.arange(m)
        tau_blk = np.full(m, T_guard)
        while alive.size:
            h = step * np.maximum(1.0, (d[alive] / (4.0 * math.sqrt(sig2 * step))) ** 2)
            h = np.minimum(h, np.maximum(T_guard - t[alive], 1e-15))
            xi = np.array([rngs[i].standard_normal() for i in alive])
            dd = np.sqrt(sig2 * h) * xi
            d1 = d[alive] + dd
            uu = np.array([rngs[i].uniform() for i in alive])
            crossed = d1 <= 0.0
            pbridge = np.exp(np.minimum(-2.0 * d[alive] * np.maximum(d1, 0.0) / (sig2 * h), 0.0))
            bridged = (~crossed) & (uu < pbridge)
            frac = np.where(crossed, d[alive] / np.maximum(d[alive] - d1, 1e-300), 0.5)
            hit = crossed | bridged
            tau_blk[alive[hit]] = t[alive[hit]] + frac[hit] * h[hit]
            t[alive] += h
            d[alive] = d1
            keep = (~hit) & (t[alive] < T_guard - 1e-12)
            alive = alive[keep]
        taus[s0:s1] = tau_blk
        censored[s0:s1] = tau_blk >= T_guard - 1e-9
    return taus, censored


class InverseGamma:
    """Shape-1/2 inverse gamma: density sqrt(b / (pi a^3)) e^{-b/a}."""

    def __init__(self, b: float):
        if b <= 0:
            raise ValueError("scale parameter must be positive")
        self.b = b

    def pdf(self, a):
        a = np.asarray(a, dtype=float)
        out = np.zeros_like(a)
        pos = a > 0
        out[pos] = np.sqrt(self.b / (math.pi * a[pos] ** 3)) * np.exp(-self.b / a[pos])
        return out if out.shape else float(out)

    def cdf(self, a):
        a = np.asarray(a, dtype=float)
        out = np.zeros_like(a)
        pos = a > 0
        out[pos] = erfc(np.sqrt(self.b / a[pos]))
        return out if out.shape else float(out)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(n)
        return 2.0 * self.b / z**2


def inverse_gamma(b: float) -> InverseGamma:
    return InverseGamma(b)


def first_passage_taus_from(params: LqgParams, ell: float) -> InverseGamma:
    """Hitting-time law of the sum process from level ``ell``."""
    return InverseGamma(ell**2 / (2.0 * params.sum_var_rate))


def conditioned_first_passage_marginal(
    params: LqgParams,
    ell: float,
    t_mark: float,
    master_seed: int,
    n: int,
    horizon: float = 1.0,
    step: float = 1e-3,
    max_attempts: int | None = None,
) -> np.ndarray:
    """Level values at ``t_mark`` of sum-rate Brownian motion from ``ell``
    conditioned (by rejection) to stay positive through ``horizon``."""
    sig2 = params.sum_var_rate
    n_steps = int(round(horizon / step))
    mark_idx = int(round(t_mark / step))
    out = np.empty(n)
    got = 0
    attempt = 0
    batch = max(2000, int(n / max(4 * _survival_estimate(ell, sig2, horizon), 1e-6) // 8 + 1))
    batch = min(batch, 500_000)
    if max_attempts is None:
        max_attempts = 400 * n / max(_survival_estimate(ell, sig2, horizon), 1e-7)
    while got < n:
        if attempt > max_attempts:
            raise DiagnosticError("rejection budget exceeded in conditioned first-passage sampling")
        rng = sample_rng(master_seed, attempt)
        m = batch
        attempt += 1
        d = np.full(m, ell)
        mark = np.full(m, np.nan)
        alive = np.ones(m, dtype=bool)
        for k in range(n_steps):
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            xi = rng.standard_normal(idx.size)
            uu = rng.uniform(size=idx.size)
            d1 = d[idx] + math.sqrt(sig2 * step) * xi
            p = np.exp(np.minimum(-2.0 * d[idx] * np.maximum(d1, 0.0) / (sig2 * step), 0.0))
            dead = (d1 <= 0.0) | (uu < p)
            d[idx] = d1
            alive[idx[dead]] = False
            if k + 1 == mark_idx:
                mark[idx[~dead]] = d1[~dead]
        surv = alive & ~np.isnan(mark)
        vals = mark[surv]
        take = min(vals.size, n - got)
        out[got : got + take] = vals[:take]
        got += take
    return out


def _survival_estimate(ell, sig2, horizon):
    return math.erf(math.sqrt(ell**2 / (2 * sig2 * horizon)))


def sample_sphere_pair(
    params: LqgParams,
    step: float,
    seed: int,
    ell_min: float = 1e-3,
    duration_min: float = 1.0,
    tau_guard: float = 1e4,
    max_attempts: int = 5_000_000,
) -> SpherePair:
    """Excursion pair via the small-start first-passage construction.

    L is Brownian motion with rate (2 a sin(pi gamma^2 / 8))^2 started at
    ``ell_min``, absorbed at 0, conditioned on duration >= ``duration_min``
    by rejection; Z is an independent Brownian path with rate
    (2 a cos(pi gamma^2 / 8))^2 on the same grid.  After the conditioning
    horizon the step grows quadratically with the level (the bridge hit test
    stays exact), capping path length; the rare excursions outliving
    ``tau_guard`` are censored and resampled by the ensemble samplers.
    """
    sig2_L = params.sum_var_rate  # = (2 a sin(pi gamma^2/8))^2
    sig2_Z = params.diff_var_rate  # = (2 a cos(pi gamma^2/8))^2
    rng = sample_rng(seed)
    n_h = int(round(duration_min / step))
    attempt = 0
    while True:
        attempt += 1
        if attempt > max_attempts:
            raise DiagnosticError("excursion rejection budget exceeded")
        times = [0.0]
        L = [ell_min]
        t, level = 0.0, ell_min
        dead = False
        for _ in range(n_h):
            d1 = level + math.sqrt(sig2_L * step) * rng.standard_normal()
            if d1 <= 0.0 or rng.uniform() < math.exp(
                -2.0 * level * max(d1, 0.0) / (sig2_L * step)
            ):
                dead = True
                break
            t += step
            level = d1
            times.append(t)
            L.append(level)
        if dead:
            continue
        censored = False
        while True:
            h = step * max(1.0, (level / (5.0 * math.sqrt(sig2_L * step))) ** 2)
            d1 = level + math.sqrt(sig2_L * h) * rng.standard_normal()
            if d1 <= 0.0:
                frac = level / (level - d1)
                times.append(t + frac * h)
                L.append(0.0)
                break
            if rng.uniform() < math.exp(-2.0 * level * d1 / (sig2_L * h)):
                times.append(t + 0.5 * h)
                L.append(0.0)
                break
            t += h
            level = d1
            times.append(t)
            L.append(level)
            if t > tau_guard:
                censored = True
                break
        times = np.array(times)
        L = np.array(L)
        Z = np.concatenate(
            [[0.0], np.cumsum(np.sqrt(sig2_Z * np.diff(times)) * rng.standard_normal(times.size - 1))]
        )
        return SpherePair(times=times, L=L, Z=Z, params=params, censored=censored)


def sample_sphere_pairs(params: LqgParams, step: float, master_seed: int, n: int) -> list:
    """Ensemble of uncensored excursion pairs (censored draws resampled)."""
    out = []
    i = 0
    while len(out) < n:
        p = sample_sphere_pair(params, step, master_seed + 7919 * i)
        i += 1
        if not p.censored:
            out.append(p)
    return out


# -- extraction --------------------------------------------------------------


def _boundary_only_grid(n_nodes: int) -> GridSpec:
    angles = (np.arange(n_nodes) + 0.5) * (2 * math.pi / n_nodes)
    return GridSpec(
        domain="disk",
        nodes=np.zeros(0, dtype=complex),
        boundary_nodes=np.exp(1j * angles),
        eps=math.pi / n_nodes,
        arc_lengths=np.full(n_nodes, 2 * math.pi / n_nodes),
    )


def _pushed_boundary_measure_disk(fieldsample, driving, k_idx, bgrid):
    """Boundary chaos of the field pushed through the centered map at grid
    index ``k_idx``, in pushforward form.

    Preimages of the fresh boundary nodes and arc edges are computed with the
    exact-step slit maps (nodes between the slit base points land on the
    curve instead of degenerating at the driving singularity).  Each arc's
    mass is the source-scale chaos of its preimage segment,

        exp((gamma/2) val_j - (gamma^2/8) V_j) * |segment_j|,

    where V_j is the exact variance of the sampled Gaussian value at the
    preimage: on the untouched boundary arc this is the standard
    eps^{gamma^2/4} boundary convention, and on the curve it keeps the
    expected quantum length per unit Euclidean length exact.  Replacing the
    pointwise inverse-map derivative by segment lengths integrates the
    multifractal stretching instead of sampling it.
    """
    from .gmc import ChaosMeasure
    from .loewner import slit_invert

    gamma = fieldsample.params.gamma
    t = driving.times[k_idx]
    u_t = driving.values[k_idx]
    M = bgrid.n_boundary
    # arc j spans angles [j, j+1] * 2 pi / M; nodes sit at the midpoints.
    # Edge preimages at half-arc resolution give a two-chord polyline per arc.
    edges = np.exp(1j * np.arange(2 * M) * (math.pi / M))
    targets = u_t * np.concatenate([bgrid.boundary_nodes, edges])
    z_all, _ = slit_invert(driving, t, targets)
    r = np.abs(z_all)
    z_all = np.where(r > 1.0, z_all / r, z_all)
    z = z_all[:M]
    ze = z_all[M:]
    chords = np.abs(np.roll(ze, -1) - ze)  # chord from edge k to edge k+1
    seg = chords[0::2] + chords[1::2]
    vals = (
        fieldsample.interp_gaussian(z)
        + fieldsample.singular_part(z, cap_eps=fieldsample.grid.eps)
        + fieldsample.constant
    )
    var = fieldsample.interp_variance(z)
    masses = np.exp(0.5 * gamma * vals - (gamma**2 / 8.0) * var) * seg
    meas = ChaosMeasure(
        kind="boundary",
        ids=np.arange(M),
        locations=bgrid.boundary_nodes,
        sizes=bgrid.arc_lengths,
        masses=masses,
        eps=bgrid.eps,
        gamma=gamma,
    )
    return meas, 0.0


def _arc_range_mass(meas, lo: float, hi: float) -> float:
    """Mass of the pushed measure over image angles in [lo, hi] (ccw)."""
    span = (hi - lo) % (2 * math.pi)
    if span <= 0:
        return 0.0
    centers = np.mod(np.angle(meas.locations), 2 * math.pi)
    halfw = meas.sizes / 2.0
    rel = np.mod(centers - lo, 2 * math.pi)
    overlap = np.zeros(centers.size)
    for shift in (-2 * math.pi, 0.0, 2 * math.pi):
        s = np.clip(rel - halfw + shift, 0.0, span)
        e = np.clip(rel + halfw + shift, 0.0, span)
        overlap += np.maximum(e - s, 0.0)
    return float(np.sum(overlap / (2 * halfw) * meas.masses))


def extract_boundary_process(
    fieldsample: FieldSample,
    chain: LoewnerChain,
    schedule,
    n_boundary: int = 256,
    ref_offset: float = 2.5,
    internal_dt: float | None = None,
) -> BoundaryLengthProcess:
    """Read the boundary-length process off a field/chain pair.

    The frontier quantum length is maintained as a ledger of atoms, each a
    fixed mass carried by a marker point evolving under the chain: the
    initial atoms are the source boundary arcs, and at every scheduled time
    two junction atoms are born carrying the pushed-measure mass of the
    newly created frontier (the image arcs between the tip and the nearest
    surviving markers on either side).  An atom's side -- X clockwise of the
    tip, Y counterclockwise, relative to the running reference marker --
    is fixed while the reference lives, because the flow preserves circular
    order; increments are then exact atom deaths plus the measured junction
    births, so the shared frontier cancels identically and
    L = ell0 + X + Y holds to rounding.  The reference marker is re-seeded
    at ``ref_offset`` radians from the tip whenever it is swallowed.
    Quantum-area time is the chaos mass of the source cells swallowed so
    far.

    Junction sweeps run at the finer cadence ``internal_dt`` (default a
    quarter of the angular mixing time 1/kappa): a chaos-measurement error
    in an atom's recorded mass lives only as long as the atom, so frequent
    small junctions keep the transient error of the reported increments at
    the scale of the short-lived tip region rather than the whole frontier
    turnover.
    """
    if fieldsample.params is None:
        raise ValueError("field carries no parameter family")
    from .gmc import area_measure
    from .loewner import slit_tip_trajectory

    gamma = fieldsample.params.gamma
    driving = chain.driving
    schedule = np.asarray(sorted(schedule), dtype=float)
    if schedule[0] > 1e-12:
        schedule = np.concatenate([[0.0], schedule])
    if schedule[-1] > driving.horizon + 1e-9:
        raise ValueError("schedule exceeds the chain horizon")
    h = driving.step
    grid_idx = np.rint(schedule / h).astype(int)
    kappa = driving.kappa
    report_at = set(grid_idx.tolist())
    k_max = grid_idx[-1]

    # Swallowing sweep for the area clock: all grid cells, one pass.
    g0 = fieldsample.grid
    cell_state = RadialFlowState(kappa, h, chain.swallow_tol, exterior=False,
                                 bridge_rng=sample_rng(driving.seed, 1, tag=3))
    cell_state.add_points(g0.nodes, complex(driving.values[0]))
    masses = area_measure(fieldsample).masses[: g0.n_nodes]
    blk = 512
    k = 0
    while k < k_max:
        m = min(blk, k_max - k)
        dts = np.diff(driving.times[k : k + m + 1])
        dbs = np.diff(driving.brownian[k : k + m + 1])
        cell_state.advance(driving.times[k], dts, driving.values[k : k + m], dbs)
        k += m
    cell_tau = cell_state.swallow

    # Trace polyline, chunked at the chord scale of the source regularization
    # so curve-side masses pair ~eps-coarse geometry with ~eps-scale values.
    tips = slit_tip_trajectory(driving)
    chunk_len = 2.0 * g0.eps
    chunk_bounds = [0]
    last = tips[0]
    for k in range(1, k_max + 1):
        if abs(tips[k] - last) >= chunk_len or k == k_max:
            chunk_bounds.append(k)
            last = tips[k]
    chunk_bounds = np.array(chunk_bounds)
    mids = tips[(chunk_bounds[:-1] + chunk_bounds[1:]) // 2]
    rmid = np.abs(mids)
    mids = np.where(rmid > 1.0, mids / rmid, mids)
    chords = np.abs(tips[chunk_bounds[1:]] - tips[chunk_bounds[:-1]])
    mvals = (
        fieldsample.interp_gaussian(mids)
        + fieldsample.singular_part(mids, cap_eps=g0.eps)
        + fieldsample.constant
    )
    mvar = fieldsample.interp_variance(mids)
    chunk_mass = np.exp(0.5 * gamma * mvals - (gamma**2 / 8.0) * mvar) * chords

    state = RadialFlowState(kappa, h, chain.swallow_tol, exterior=False,
                            bridge_rng=sample_rng(driving.seed, 2, tag=3))
    bm0 = boundary_measure(fieldsample)
    L0 = bm0.total
    u0 = complex(driving.values[0])
    src_ids = state.add_points(g0.boundary_nodes, u0)
    cap = g0.n_boundary + 2 * (chunk_bounds.size + 4) + 256
    mass_arr = np.zeros(cap)
    side_arr = np.zeros(cap, dtype=np.int8)  # +1 = X, -1 = Y, 0 = not an atom
    booked = np.zeros(cap, dtype=bool)
    accounted = np.zeros(cap, dtype=bool)  # death already processed
    mass_arr[src_ids] = bm0.masses
    booked[src_ids] = True

    def angles_of(idx, u):
        pos = state.positions(u)[idx] / u
        return np.mod(np.angle(pos), 2 * math.pi)

    def inject(angle, u):
        nonlocal mass_arr, side_arr, booked, accounted, cap
        i = int(state.add_points([u * np.exp(1j * angle)], u)[0])
        if i >= cap:
            grow = cap
            mass_arr = np.concatenate([mass_arr, np.zeros(grow)])
            side_arr = np.concatenate([side_arr, np.zeros(grow, dtype=np.int8)])
            booked = np.concatenate([booked, np.zeros(grow, dtype=bool)])
            accounted = np.concatenate([accounted, np.zeros(grow, dtype=bool)])
            cap += grow
        return i

    ref = inject(ref_offset, u0)

    def relabel(u):
        n = state.g.size
        live = booked[:n] & np.isnan(state.swallow)
        qa = angles_of(np.array([ref]), u)[0]
        idx = np.flatnonzero(live)
        ang = angles_of(idx, u)
        side_arr[idx] = np.where(ang < qa, -1, 1)

    relabel(u0)
    X_acc = Y_acc = 0.0
    X_out, Y_out, L_out = [0.0], [0.0], [L0]
    atoms_alive_total = L0
    delta0 = 1e-3  # edge-marker offset inside the forming chunk's image arc
    # Pending chunk markers: chunk c spans [bounds[c], bounds[c+1]); its two
    # side markers are injected when the chunk opens and its mass is booked
    # when it closes (markers already eaten by then stay unbooked).
    next_open = 0
    next_close = 0
    pending = {}  # chunk index -> (marker_plus, marker_minus)
    k_now = 0
    while k_now < k_max:
        u_now = complex(driving.values[k_now])
        while next_open < len(chunk_bounds) - 1 and chunk_bounds[next_open] == k_now:
            pending[next_open] = (inject(delta0, u_now), inject(2 * math.pi - delta0, u_now))
            next_open += 1
        dt = driving.times[k_now + 1] - driving.times[k_now]
        db = driving.brownian[k_now + 1] - driving.brownian[k_now]
        state.advance(driving.times[k_now], [dt], [driving.values[k_now]], [db])
        k_now += 1
        u = complex(driving.values[k_now])
        n = state.g.size
        newly_dead = booked[:n] & ~accounted[:n] & ~np.isnan(state.swallow)
        if np.any(newly_dead):
            accounted[:n] |= newly_dead
            dm = mass_arr[:n][newly_dead]
            ds = side_arr[:n][newly_dead]
            atoms_alive_total -= dm.sum()
            X_acc -= dm[ds > 0].sum()
            Y_acc -= dm[ds < 0].sum()
        if not np.isnan(state.swallow[ref]):
            ref = inject(ref_offset, u)
            relabel(u)
        closing = []
        while next_close < len(chunk_bounds) - 1 and chunk_bounds[next_close + 1] == k_now:
            closing.append(next_close)
            next_close += 1
        if closing:
            qa = angles_of(np.array([ref]), u)[0]
            for c in closing:
                mk_pair = pending.pop(c)
                for mk in mk_pair:
                    if np.isnan(state.swallow[mk]):
                        m = float(chunk_mass[c])
                        mass_arr[mk] = m
                        booked[mk] = True
                        ang = angles_of(np.array([mk]), u)[0]
                        side_arr[mk] = -1 if ang < qa else 1
                        atoms_alive_total += m
                        if side_arr[mk] > 0:
                            X_acc += m
                        else:
                            Y_acc += m
        if k_now in report_at:
            X_out.append(X_acc)
            Y_out.append(Y_acc)
            L_out.append(atoms_alive_total)
    cell_t = cell_tau[: g0.n_nodes]
    swallowed = ~np.isnan(cell_t)
    area_times = np.array(
        [masses[swallowed & (cell_t <= t + 1e-12)].sum() for t in schedule]
    )
    X_arr, Y_arr, L_arr = map(np.array, (X_out, Y_out, L_out))
    resid = float(np.max(np.abs(L_arr - (L0 + X_arr + Y_arr))))
    return BoundaryLengthProcess(
        area_times=area_times,
        X=X_arr,
        Y=Y_arr,
        L=L_arr,
        ell0=L0,
        terminated=bool(L_arr[-1] <= 1e-9),
        capacity_times=schedule,
        tolerance=resid,
        metadata={"identity_residual": resid, "n_atoms": int(np.sum(booked))},
    )
