"""Discretized Loewner-evolution solvers.

Four flows share the Mobius vector field Phi(u, z) = z (u + z) / (u - z):

* forward radial: dg_t(z) = Phi(U_t, g_t(z)) dt on the unit disk, driven by
  U_t = exp(i sqrt(kappa) B_t); the capacity parametrization gives
  g_t'(0) = e^t.
* centered reverse radial: the evaluation f_t(z) of the centered reverse map
  satisfies, in the log coordinate y = log f,

      dy = -i sqrt(kappa) dB - (1 + e^y) / (1 - e^y) dt,

  where the noise is additive and the Ito correction from the composition of
  infinitesimal maps has cancelled against the drift of the rotation.  The
  derivative at the origin is exp(-i sqrt(kappa) B_t - t), so |f_t'(0)| =
  e^{-t}.
* reverse chordal with a force point: dg(z) = -2 dt / (g(z) - W_t) with the
  driving drift Re(rho / (W_t - g_t(z0))).
* whole-plane: the same radial vector field on the exterior of the unit
  disk, truncated at capacity time -T0 from the initial map g(z) = e^{T0} z
  and driven by a uniformly rotated Brownian driving, which makes the
  truncated law exactly rotation invariant.

Integration is explicit Euler on a piecewise-constant driving grid, with two
local models that resolve the singularity at the driving point:

* radial approach: near u the complex square s = (u - g)^2 moves with
  constant velocity, s -> s - 4 u^2 dt, which is the exact leading-order
  flow; |s| <= tol^2 is a direct hit.
* circle riding: once a point is within ``ride_gate`` of the unit circle its
  absorption is decided by the relative angle theta = arg(g / U).  Between
  driving jumps theta follows the exact constant-driving flow
  cos(theta_new/2) = cos(theta/2) e^{-dt/2}; at each jump the angle moves by
  -sqrt(kappa) dB and the point is swallowed when the jump crosses zero or
  when a Brownian-bridge hit fires, exp(-2 theta theta' / (kappa dt)) > U.
  Without this rule the discrete driving would step over points that the
  continuous driving path sweeps through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import sample_rng


class SingularityError(ValueError):
    """Vector field evaluated at its pole (caller treats as swallowing)."""


class DiagnosticError(RuntimeError):
    """Numerical failure that should abort an experiment with a diagnosis."""


DEFAULT_STEP = 1e-4
DEFAULT_SWALLOW_TOL = 1e-4


def mobius_vector_field(u: complex, z: complex) -> complex:
    """Phi(u, z) = z (u + z) / (u - z)."""
    d = u - z
    if d == 0:
        raise SingularityError(f"vector field singular at z = u = {u}")
    return z * (u + z) / d


def _phi_arr(u, g):
    """Vectorized Phi(u, g); caller guarantees u != g."""
    return g * (u + g) / (u - g)


@dataclass(frozen=True)
class DrivingPath:
    """Sampled driving process on a uniform capacity grid.

    ``values`` are unit-modulus complex samples for radial/whole-plane
    geometry and real samples for chordal geometry.  ``brownian`` is the
    underlying standard Brownian path, so the unwrapped driving argument is
    sqrt(kappa) * brownian (plus the initial angle) in the radial case.
    """

    times: np.ndarray
    values: np.ndarray
    kappa: float
    seed: int
    brownian: np.ndarray

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


def _time_grid(T: float, step: float) -> np.ndarray:
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if T < 0:
        raise ValueError(f"horizon must be nonnegative, got {T}")
    n = int(math.ceil(T / step - 1e-12))
    times = step * np.arange(n + 1)
    if n > 0:
        times[-1] = T
    return times


def sample_radial_driving(kappa: float, T: float, step: float, seed: int) -> DrivingPath:
    """Unit-circle driving exp(i sqrt(kappa) B_t) on [0, T]."""
    times = _time_grid(T, step)
    rng = sample_rng(seed)
    increments = rng.standard_normal(times.size - 1) * np.sqrt(np.diff(times))
    brownian = np.concatenate([[0.0], np.cumsum(increments)])
    values = np.exp(1j * math.sqrt(kappa) * brownian)
    return DrivingPath(times=times, values=values, kappa=kappa, seed=seed, brownian=brownian)


@dataclass
class TrackedPoint:
    initial: complex
    trajectory: np.ndarray | None
    swallow_time: float | None

    @property
    def swallowed(self) -> bool:
        return self.swallow_time is not None


@dataclass
class LoewnerChain:
    """A realized conformal-map flow with per-point tracking."""

    driving: DrivingPath
    direction: str  # "forward" | "reverse"
    geometry: str  # "radial" | "chordal" | "whole-plane"
    tracked: list
    step: float
    swallow_tol: float
    log_deriv0: np.ndarray | None = None  # log-derivative path at the interior fixed point
    time_offset: float = 0.0  # whole-plane chains start at capacity time -T0
    metadata: dict = field(default_factory=dict)

    def swallow_times(self) -> np.ndarray:
        return np.array(
            [np.nan if p.swallow_time is None else p.swallow_time for p in self.tracked]
        )


class RadialFlowState:
    """Resumable hitting-time tracker for radial-type flows.

    Holds one flat family of points (the caller may reshape indices as
    simulations x points) and advances them against driving segments.  Each
    point is either FLOAT (full vector field, square-law near the driving
    singularity) or RIDE (circle-riding angle process); swallowed points keep
    their absorption time.
    """

    def __init__(
        self,
        kappa: float,
        step: float,
        swallow_tol: float,
        exterior: bool,
        bridge_rng: np.random.Generator,
    ):
        self.kappa = kappa
        self.sqk = math.sqrt(kappa)
        self.tol = swallow_tol
        self.exterior = exterior
        self.near_gap = max(10.0 * swallow_tol, 3.0 * math.sqrt(4.0 * step))
        self.ride_gate = max(10.0 * swallow_tol, 2.0 * math.sqrt(step))
        self.bridge_rng = bridge_rng
        self.g = np.zeros(0, dtype=complex)
        self.riding = np.zeros(0, dtype=bool)
        self.theta = np.zeros(0)
        self.delta = np.zeros(0)
        self.swallow = np.zeros(0)
        self.pinned = np.zeros(0, dtype=bool)  # fixed points of the flow (the origin)
        self.death_side = np.zeros(0)  # sign of the riding angle at absorption

    def add_points(self, values, u_current: complex) -> np.ndarray:
        """Register new tracked points (positions in map coordinates)."""
        vals = np.asarray(values, dtype=complex).ravel()
        n0 = self.g.size
        self.g = np.concatenate([self.g, vals])
        self.riding = np.concatenate([self.riding, np.zeros(vals.size, dtype=bool)])
        self.theta = np.concatenate([self.theta, np.zeros(vals.size)])
        self.delta = np.concatenate([self.delta, np.zeros(vals.size)])
        self.swallow = np.concatenate([self.swallow, np.full(vals.size, np.nan)])
        self.pinned = np.concatenate([self.pinned, vals == 0.0])
        self.death_side = np.concatenate([self.death_side, np.zeros(vals.size)])
        idx = np.arange(n0, n0 + vals.size)
        self._promote(idx, u_current)
        return idx

    def _radial_gap(self, g):
        return np.abs(g) - 1.0 if self.exterior else 1.0 - np.abs(g)

    def _promote(self, idx, u: complex):
        """Move near-circle points into the riding state."""
        if idx.size == 0:
            return
        g = self.g[idx]
        gap = self._radial_gap(g)
        sel = (gap < self.ride_gate) & ~self.riding[idx] & ~self.pinned[idx]
        if np.any(sel):
            j = idx[sel]
            rel = np.angle(self.g[j] / u)
            self.theta[j] = rel
            self.delta[j] = np.maximum(self._radial_gap(self.g[j]), 0.0)
            self.riding[j] = True

    def positions(self, u: complex) -> np.ndarray:
        """Current map-coordinate positions (riding points reconstructed)."""
        g = self.g.copy()
        ride = self.riding & np.isnan(self.swallow)
        if np.any(ride):
            radius = 1.0 + self.delta[ride] if self.exterior else 1.0 - self.delta[ride]
            g[ride] = radius * u * np.exp(1j * self.theta[ride])
        return g

    def advance(self, t0: float, dts, u_prev, dbs) -> None:
        """Advance through steps with driving values ``u_prev`` on each step
        and Brownian increments ``dbs`` applied at the step ends."""
        t = t0
        tol2 = self.tol * self.tol
        for j in range(len(dts)):
            dt = float(dts[j])
            u = complex(u_prev[j])
            db = float(dbs[j])
            alive = np.isnan(self.swallow) & ~self.pinned
            fl = np.flatnonzero(alive & ~self.riding)
            if fl.size:
                g = self.g[fl]
                d = u - g
                near = np.abs(d) < self.near_gap
                if np.any(~near):
                    sub = fl[~near]
                    self.g[sub] = self.g[sub] + dt * _phi_arr(u, self.g[sub])
                if np.any(near):
                    sub = fl[near]
                    dn = u - self.g[sub]
                    s = dn * dn
                    u2 = u * u
                    ratio = s / u2
                    a, b = ratio.real, ratio.imag
                    root_arg = tol2 * tol2 - b * b
                    root = np.sqrt(np.maximum(root_arg, 0.0))
                    hit = (root_arg >= 0) & (a >= -root) & (a - 4 * dt <= root)
                    frac = np.clip((a - root) / (4 * dt), 0.0, 1.0)
                    self.swallow[sub[hit]] = t + frac[hit] * dt
                    move = ~hit
                    if np.any(move):
                        r = np.sqrt(s[move] - 4 * u2 * dt)
                        r = np.where(np.real(r * np.conj(dn[move])) < 0, -r, r)
                        self.g[sub[move]] = u - r
                # Euler landings inside the tolerance disk count as hits.
                still = fl[np.isnan(self.swallow[fl])]
                landed = np.abs(self.g[still] - u) < self.tol
                self.swallow[still[landed]] = t + dt
            rd = np.flatnonzero(alive & self.riding & np.isnan(self.swallow))
            if rd.size:
                th = self.theta[rd]
                sign = np.where(th >= 0, 1.0, -1.0)
                c = np.cos(np.abs(th) / 2.0) * math.exp(-dt / 2.0)
                th_d = sign * 2.0 * np.arccos(np.clip(c, -1.0, 1.0))
                th_new = th_d - self.sqk * db
                crossed = (th_d > 0) != (th_new > 0)
                wrapped = np.abs(th_d) + np.abs(th_new) > 1.0  # jump via +-pi, not through 0
                hit = crossed & ~wrapped
                prod = th_d * th_new
                cand = (~crossed) & (prod / (self.kappa * dt) < 14.0) & (np.abs(th_d) < 0.5)
                if np.any(cand):
                    p = np.exp(-2.0 * prod[cand] / (self.kappa * dt))
                    draw = self.bridge_rng.uniform(size=int(np.sum(cand)))
                    bh = np.zeros_like(hit)
                    bh[np.flatnonzero(cand)] = draw < p
                    hit = hit | bh
                frac = np.where(
                    crossed,
                    np.abs(th_d) / np.maximum(np.abs(th_d) + np.abs(th_new), 1e-300),
                    0.5,
                )
                self.swallow[rd[hit]] = t + frac[hit] * dt
                self.death_side[rd[hit]] = np.where(th_d[hit] >= 0, 1.0, -1.0)
                ok = ~hit
                j_ok = rd[ok]
                self.theta[j_ok] = np.mod(th_new[ok] + math.pi, 2.0 * math.pi) - math.pi
                gap_rate = 0.5 / np.maximum(np.sin(th_d[ok] / 2.0) ** 2, 1e-12)
                self.delta[j_ok] = self.delta[j_ok] * np.exp(-dt * np.minimum(gap_rate, 1e6) )
            u_next = u * np.exp(1j * self.sqk * db)
            live = np.flatnonzero(np.isnan(self.swallow) & ~self.pinned & ~self.riding)
            self._promote(live, u_next)
            bad = np.flatnonzero(~np.isfinite(self.g) & np.isnan(self.swallow) & ~self.riding)
            if bad.size:
                raise DiagnosticError(f"flow diverged for point index {bad[0]}")
            t += dt


def evolve_forward_radial(
    driving: DrivingPath,
    points: Sequence[complex],
    swallow_tol: float = DEFAULT_SWALLOW_TOL,
    record_trajectories: bool = True,
) -> LoewnerChain:
    """Integrate the forward radial Loewner flow for the given points.

    Points must lie in the closed unit disk.  The origin is a fixed point and
    is never swallowed; the boundary seed 1 is absorbed immediately.  The
    log-derivative at the origin accumulates log(1 + dt) per Euler step and
    is recorded so capacity errors |log g_t'(0) - t| can be measured.
    """
    pts = np.asarray(points, dtype=complex)
    if np.any(np.abs(pts) > 1 + 1e-12):
        raise ValueError("points must lie in the closed unit disk")
    times = driving.times
    state = RadialFlowState(
        driving.kappa, driving.step or 1e-4, swallow_tol, exterior=False,
        bridge_rng=sample_rng(driving.seed, 0, tag=2),
    )
    state.add_points(pts, complex(driving.values[0]))
    at_seed = pts == 1.0 + 0.0j
    state.swallow[np.flatnonzero(at_seed)] = 0.0
    n_steps = times.size - 1
    traj = np.full((times.size, pts.size), np.nan + 0j) if record_trajectories else None
    if record_trajectories:
        traj[0] = pts
    logd = np.zeros(times.size)
    for k in range(n_steps):
        dt = times[k + 1] - times[k]
        db = driving.brownian[k + 1] - driving.brownian[k]
        state.advance(times[k], [dt], [driving.values[k]], [db])
        logd[k + 1] = logd[k] + math.log1p(dt)
        if record_trajectories:
            pos = state.positions(complex(driving.values[k + 1]))
            live = np.isnan(state.swallow)
            traj[k + 1, live] = pos[live]
            traj[k + 1, state.pinned] = 0.0
    tracked = [
        TrackedPoint(
            initial=pts[i],
            trajectory=traj[:, i].copy() if record_trajectories else None,
            swallow_time=None if np.isnan(state.swallow[i]) else float(state.swallow[i]),
        )
        for i in range(pts.size)
    ]
    return LoewnerChain(
        driving=driving,
        direction="forward",
        geometry="radial",
        tracked=tracked,
        step=driving.step,
        swallow_tol=swallow_tol,
        log_deriv0=logd,
    )


def _nearest_time_index(times: np.ndarray, t: float) -> int:
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 0.51 * max(np.max(np.diff(times)), 1e-300):
        raise ValueError(f"time {t} not on the chain grid")
    return k


def invert_many(driving: DrivingPath, t: float, w, newton_iters: int = 2):
    """Numerically evaluate g_t^{-1} at the points ``w``.

    Reverse-time integration of the forward vector field is exactly the
    inverse flow; Newton corrections against the forward discrete map polish
    the result.  Returns (z, residual) arrays.
    """
    times = driving.times
    kk = _nearest_time_index(times, t)
    z = np.asarray(w, dtype=complex).copy()
    for k in range(kk - 1, -1, -1):
        dt = times[k + 1] - times[k]
        u = driving.values[k]
        z = z - dt * _phi_arr(u, z)
    target = np.asarray(w, dtype=complex)
    best = z.copy()
    gz, _ = _forward_map_and_derivative(driving, kk, best)
    best_res = np.abs(gz - target)
    for _ in range(newton_iters):
        gz, dgz = _forward_map_and_derivative(driving, kk, z)
        update = (gz - target) / dgz
        z = z - np.where(np.isfinite(update), update, 0.0)
        gz, _ = _forward_map_and_derivative(driving, kk, z)
        res = np.abs(gz - target)
        better = np.isfinite(res) & (res < best_res)
        best[better] = z[better]
        best_res[better] = res[better]
        z = best.copy()
    return best, best_res


def _forward_map_and_derivative(driving: DrivingPath, k_stop: int, z):
    """Evaluate the discrete forward map and its z-derivative at ``z``."""
    g = np.asarray(z, dtype=complex).copy()
    dg = np.ones_like(g)
    times = driving.times
    for k in range(k_stop):
        dt = times[k + 1] - times[k]
        u = driving.values[k]
        denom = u - g
        dg = dg * (1 + dt * ((u + 2 * g) / denom + g * (u + g) / denom**2))
        g = g + dt * _phi_arr(u, g)
    return g, dg


def invert_chain_at(chain: LoewnerChain, t: float, w: complex, tol: float = 1e-9) -> complex:
    """g_t^{-1}(w) for a forward radial chain, to residual below ``tol``."""
    if chain.direction != "forward":
        raise ValueError("inversion is defined for forward chains")
    z, res = invert_many(chain.driving, t, np.array([w]))
    if res[0] > tol:
        raise DiagnosticError(f"inverse Newton residual {res[0]:.3e} exceeds {tol:.1e} at t={t}")
    return complex(z[0])


def _slit_phi(w):
    """Conserved coordinate of the constant-driving radial flow: phi(w_t) =
    e^t phi(w_0) where phi(w) = w / (1 + w)^2."""
    return w / (1 + w) ** 2


def _slit_phi_inv(q, interior: bool, im_hint=None):
    """Invert phi choosing the interior (|w| <= 1) or exterior branch.

    The two preimages are w and 1/w; on the unit circle (q real >= 1/4) they
    are conjugate and the branch follows the sign of ``im_hint``.
    """
    s = np.sqrt(1 - 4 * q)
    r1 = (1 - 2 * q + s) / (2 * q)
    r2 = 1.0 / r1
    a1, a2 = np.abs(r1), np.abs(r2)
    small = np.where(a1 <= a2, r1, r2)
    large = np.where(a1 <= a2, r2, r1)
    w = small if interior else large
    if im_hint is not None:
        tie = np.abs(np.abs(w) - 1.0) < 1e-9
        flip = tie & (np.sign(w.imag) != np.sign(im_hint)) & (im_hint != 0)
        w = np.where(flip, np.conj(w), w)
    return w


def slit_invert(driving: DrivingPath, t: float, targets, exterior: bool = False):
    """Exact-step inverse map: g_t^{-1} at ``targets`` via per-step slit maps.

    Each backward step applies the closed-form constant-driving solution, so
    boundary points near the driving angle land on the slit instead of
    blowing up (which the Euler backward flow would do).  Returns
    (preimages, log|dg_t^{-1}|).
    """
    times = driving.times
    kk = _nearest_time_index(times, t)
    z = np.asarray(targets, dtype=complex).copy()
    logd = np.zeros(z.shape, dtype=float)
    tiny = 1e-300
    for k in range(kk - 1, -1, -1):
        dt = times[k + 1] - times[k]
        u = driving.values[k]
        w = z / u
        q_new = _slit_phi(w)
        q_old = q_new * math.exp(-dt)
        w_old = _slit_phi_inv(q_old, interior=not exterior, im_hint=w.imag)
        # d w_old / d w_new = e^{-dt} phi'(w_new) / phi'(w_old)
        num = (1 - w) / (1 + w) ** 3
        den = (1 - w_old) / (1 + w_old) ** 3
        logd += -dt + np.log(np.maximum(np.abs(num), tiny)) - np.log(np.maximum(np.abs(den), tiny))
        z = u * w_old
    return z, logd


def slit_tip_trajectory(driving: DrivingPath) -> np.ndarray:
    """Trace points z(t_k) = g_{t_k}^{-1}(U_{t_k}) on the driving grid.

    One backward pass with the exact-step slit maps; targets join the active
    set as the sweep passes their time, so the total cost is ~ n^2/2 cheap
    vectorized step applications.
    """
    times = driving.times
    n = times.size
    z = driving.values.astype(complex).copy()
    for k in range(n - 2, -1, -1):
        dt = times[k + 1] - times[k]
        u = driving.values[k]
        w = z[k + 1 :] / u
        q_old = _slit_phi(w) * math.exp(-dt)
        z[k + 1 :] = u * _slit_phi_inv(q_old, interior=True, im_hint=w.imag)
    return z


def _reverse_log_drift(y):
    f = np.exp(y)
    return (1 + f) / (1 - f)


def evolve_reverse_radial(
    kappa: float,
    T: float,
    step: float,
    seed: int,
    points: Sequence[complex],
    swallow_tol: float = DEFAULT_SWALLOW_TOL,
    record_trajectories: bool = True,
) -> LoewnerChain:
    """Integrate the centered reverse radial flow in log coordinates.

    Each point z evolves through y = log f with additive rotation noise
    -i sqrt(kappa) dB and the singular drift -(1 + e^y)/(1 - e^y); the step
    is halved locally while |f - 1| < 10 * swallow_tol.  The origin stays
    fixed, and log f'(0) = -i sqrt(kappa) B_t - t is accumulated exactly in
    the same scheme.
    """
    pts = np.asarray(points, dtype=complex)
    if np.any(np.abs(pts) > 1 + 1e-12):
        raise ValueError("points must lie in the closed unit disk")
    driving = sample_radial_driving(kappa, T, step, seed)
    times = driving.times
    n_steps = times.size - 1
    sq = math.sqrt(kappa)
    at_origin = pts == 0
    y = np.where(at_origin, 0.0, np.log(np.where(at_origin, 1.0, pts)))
    alive = ~at_origin
    swallow = np.full(pts.size, np.nan)
    traj = np.full((times.size, pts.size), np.nan + 0j) if record_trajectories else None
    if record_trajectories:
        traj[0] = pts
    logd = np.zeros(times.size, dtype=complex)
    near_gap = 10.0 * swallow_tol
    for k in range(n_steps):
        dt = times[k + 1] - times[k]
        db = driving.brownian[k + 1] - driving.brownian[k]
        logd[k + 1] = logd[k] - 1j * sq * db - dt
        idx = np.flatnonzero(alive)
        if idx.size:
            yk = y[idx]
            f = np.exp(yk)
            near = np.abs(f - 1) < near_gap
            far = ~near
            if np.any(far):
                yk[far] = yk[far] - 1j * sq * db - _reverse_log_drift(yk[far]) * dt
            for j in np.flatnonzero(near):
                yj = yk[j]
                n_sub = 1
                while n_sub < 1024:
                    gap = abs(np.exp(yj) - 1)
                    if gap < swallow_tol or abs(_reverse_log_drift(yj)) * dt / n_sub < 0.2 * gap:
                        break
                    n_sub *= 2
                h = dt / n_sub
                for _ in range(n_sub):
                    if abs(np.exp(yj) - 1) < swallow_tol:
                        break
                    yj = yj - 1j * sq * db * (h / dt) - _reverse_log_drift(yj) * h
                yk[j] = yj
            y[idx] = yk
            zipped = np.abs(np.exp(y[idx]) - 1) < swallow_tol
            swallow[idx[zipped]] = times[k + 1]
            alive[idx[zipped]] = False
        if record_trajectories:
            traj[k + 1, at_origin] = 0.0
            live = alive & ~at_origin
            traj[k + 1, live] = np.exp(y[live])
    tracked = [
        TrackedPoint(
            initial=pts[i],
            trajectory=traj[:, i].copy() if record_trajectories else None,
            swallow_time=None if np.isnan(swallow[i]) else float(swallow[i]),
        )
        for i in range(pts.size)
    ]
    chain = LoewnerChain(
        driving=driving,
        direction="reverse",
        geometry="radial",
        tracked=tracked,
        step=step,
        swallow_tol=swallow_tol,
        log_deriv0=logd,
    )
    chain.metadata["final_values"] = np.where(at_origin, 0.0 + 0.0j, np.exp(y))
    return chain


def reverse_radial_endpoints(
    kappa: float, T: float, step: float, master_seed: int, z0: complex, n: int
) -> np.ndarray:
    """Vectorized f_T(z0) across ``n`` independent reverse radial flows."""
    times = _time_grid(T, step)
    sq = math.sqrt(kappa)
    y = np.full(n, np.log(complex(z0)), dtype=complex)
    rngs = [sample_rng(master_seed, i) for i in range(n)]
    n_steps = times.size - 1
    block = 512
    k = 0
    while k < n_steps:
        m = min(block, n_steps - k)
        dts = np.diff(times[k : k + m + 1])
        dbs = np.empty((n, m))
        for i, rng in enumerate(rngs):
            dbs[i] = rng.standard_normal(m)
        dbs *= np.sqrt(dts)[None, :]
        for j in range(m):
            y = y - 1j * sq * dbs[:, j] - _reverse_log_drift(y) * dts[j]
        k += m
    return np.exp(y)


def forward_inverse_endpoints(
    kappa: float, T: float, step: float, master_seed: int, z0: complex, n: int
) -> np.ndarray:
    """Vectorized g_T^{-1}(U_T z0) across ``n`` independent forward flows."""
    times = _time_grid(T, step)
    n_steps = times.size - 1
    sq = math.sqrt(kappa)
    brown = np.zeros((n, times.size))
    for i in range(n):
        rng = sample_rng(master_seed, i)
        incr = rng.standard_normal(n_steps) * np.sqrt(np.diff(times))
        brown[i, 1:] = np.cumsum(incr)
    u = np.exp(1j * sq * brown)
    z = u[:, -1] * z0
    for k in range(n_steps - 1, -1, -1):
        dt = times[k + 1] - times[k]
        z = z - dt * _phi_arr(u[:, k], z)
    target = u[:, -1] * z0
    for _ in range(2):
        g = z.copy()
        dg = np.ones_like(z)
        for k in range(n_steps):
            dt = times[k + 1] - times[k]
            uk = u[:, k]
            denom = uk - g
            dg = dg * (1 + dt * ((uk + 2 * g) / denom + g * (uk + g) / denom**2))
            g = g + dt * _phi_arr(uk, g)
        z = z - (g - target) / dg
    return z


def evolve_reverse_chordal_rho(
    kappa: float,
    rho: float,
    z0: complex,
    T: float,
    step: float,
    seed: int,
    extra_points: Sequence[complex] = (),
    swallow_tol: float = DEFAULT_SWALLOW_TOL,
) -> LoewnerChain:
    """Centered reverse chordal flow with a force point at ``z0``.

    The driving solves dW = sqrt(kappa) dB + Re(rho / (W - q)) dt where
    q = g_t(z0) is the force-point trajectory under the reverse map flow
    dg(z) = -2 dt / (g(z) - W).  The force point gains imaginary part
    monotonically; a force point reaching the real axis signals a step-size
    failure and raises ``DiagnosticError``.
    """
    if z0.imag <= 0:
        raise ValueError("force point must lie in the open upper half-plane")
    times = _time_grid(T, step)
    rng = sample_rng(seed)
    increments = rng.standard_normal(times.size - 1) * np.sqrt(np.diff(times))
    brownian = np.concatenate([[0.0], np.cumsum(increments)])
    sq = math.sqrt(kappa)
    pts = np.concatenate([[complex(z0)], np.asarray(extra_points, dtype=complex)])
    g = pts.copy()
    w = 0.0
    wpath = np.zeros(times.size)
    traj = np.zeros((times.size, pts.size), dtype=complex)
    traj[0] = g
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        db = brownian[k + 1] - brownian[k]
        q = g[0]
        if abs(q - w) < swallow_tol or q.imag <= 0:
            raise DiagnosticError(
                f"force point collided with the driving at t={times[k]:.4f}; reduce the step"
            )
        w_new = w + sq * db + (rho / (w - q)).real * dt
        g = g - 2 * dt / (g - w)
        w = w_new
        wpath[k + 1] = w
        traj[k + 1] = g
    driving = DrivingPath(times=times, values=wpath, kappa=kappa, seed=seed, brownian=brownian)
    tracked = [
        TrackedPoint(initial=pts[i], trajectory=traj[:, i].copy(), swallow_time=None)
        for i in range(pts.size)
    ]
    chain = LoewnerChain(
        driving=driving,
        direction="reverse",
        geometry="chordal",
        tracked=tracked,
        step=step,
        swallow_tol=swallow_tol,
    )
    chain.metadata["rho"] = rho
    chain.metadata["force_trajectory"] = traj[:, 0].copy()
    return chain


def sample_whole_plane_driving(
    kappa: float, T0: float, T: float, step: float, seed: int
) -> DrivingPath:
    """Two-sided driving on capacity times [-T0, T], rotation-randomized.

    The initial angle is uniform, so the truncated law is exactly invariant
    under rotations (and under conjugation, jointly with the Brownian
    symmetry).  Times are stored shifted to [0, T0 + T].
    """
    if T0 <= 0:
        raise ValueError("truncation depth T0 must be positive")
    times = _time_grid(T0 + T, step)
    rng = sample_rng(seed)
    theta0 = rng.uniform(0.0, 2.0 * math.pi)
    increments = rng.standard_normal(times.size - 1) * np.sqrt(np.diff(times))
    brownian = np.concatenate([[0.0], np.cumsum(increments)])
    values = np.exp(1j * (theta0 + math.sqrt(kappa) * brownian))
    return DrivingPath(times=times, values=values, kappa=kappa, seed=seed, brownian=brownian)


def simulate_whole_plane(
    kappa: float,
    T0: float,
    T: float,
    step: float,
    seed: int,
    points: Sequence[complex],
    swallow_tol: float = DEFAULT_SWALLOW_TOL,
    record_trajectories: bool = False,
) -> LoewnerChain:
    """Truncated whole-plane flow; swallowing times are hitting times in the
    space-filling regime.

    The exterior flow starts at capacity time -T0 from g(z) = e^{T0} z (the
    initial hull approximated by the disk of radius e^{-T0}).  Points not
    swallowed by the horizon T are censored (swallow_time None).
    """
    pts = np.asarray(points, dtype=complex)
    if np.any(np.abs(pts) <= math.exp(-T0)):
        raise ValueError("points must lie outside the initial hull radius exp(-T0)")
    driving = sample_whole_plane_driving(kappa, T0, T, step, seed)
    times = driving.times
    state = RadialFlowState(
        kappa, step, swallow_tol, exterior=True, bridge_rng=sample_rng(seed, 0, tag=2)
    )
    state.add_points(pts * math.exp(T0), complex(driving.values[0]))
    traj = np.full((times.size, pts.size), np.nan + 0j) if record_trajectories else None
    if record_trajectories:
        traj[0] = pts * math.exp(T0)
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        db = driving.brownian[k + 1] - driving.brownian[k]
        state.advance(times[k], [dt], [driving.values[k]], [db])
        if record_trajectories:
            pos = state.positions(complex(driving.values[k + 1]))
            live = np.isnan(state.swallow)
            traj[k + 1, live] = pos[live]
    swallow = state.swallow - T0
    tracked = [
        TrackedPoint(
            initial=pts[i],
            trajectory=traj[:, i].copy() if record_trajectories else None,
            swallow_time=None if np.isnan(swallow[i]) else float(swallow[i]),
        )
        for i in range(pts.size)
    ]
    chain = LoewnerChain(
        driving=driving,
        direction="forward",
        geometry="whole-plane",
        tracked=tracked,
        step=step,
        swallow_tol=swallow_tol,
        time_offset=-T0,
    )
    chain.metadata["T0"] = T0
    chain.metadata["censored"] = int(np.sum(np.isnan(swallow)))
    return chain


def whole_plane_swallow_times_batch(
    kappa: float,
    T0: float,
    T: float,
    step: float,
    master_seed: int,
    n_sims: int,
    points: Sequence[complex],
    swallow_tol: float = DEFAULT_SWALLOW_TOL,
) -> np.ndarray:
    """Swallowing times of ``points`` across independent truncated whole-plane
    flows, vectorized over simulations.

    Returns an (n_sims, n_points) array with NaN marking censored entries.
    Driving and bridge draws are counter-seeded per simulation, so results do
    not depend on batching or worker counts.
    """
    pts = np.asarray(points, dtype=complex)
    n_pts = pts.size
    if np.any(np.abs(pts) <= math.exp(-T0)):
        raise ValueError("points must lie outside the initial hull radius exp(-T0)")
    times = _time_grid(T0 + T, step)
    n_steps = times.size - 1
    sq = math.sqrt(kappa)
    out = np.full((n_sims, n_pts), np.nan)
    sim_block = 1024
    for s0 in range(0, n_sims, sim_block):
        s1 = min(s0 + sim_block, n_sims)
        ns = s1 - s0
        rngs = [sample_rng(master_seed, i) for i in range(s0, s1)]
        bridge = [sample_rng(master_seed, i, tag=2) for i in range(s0, s1)]
        theta0 = np.array([r.uniform(0.0, 2.0 * math.pi) for r in rngs])
        sw = _batch_hitting_sweep(
            kappa, sq, times, n_steps, theta0, rngs, bridge, pts, step, swallow_tol, T0
        )
        out[s0:s1] = sw
    return out


def _batch_hitting_sweep(
    kappa, sq, times, n_steps, theta0, rngs, bridge, pts, step, swallow_tol, T0
):
    """Vectorized (sims x points) exterior hitting sweep."""
    ns = theta0.size
    n_pts = pts.size
    tol = swallow_tol
    tol2 = tol * tol
    near_gap = max(10.0 * tol, 3.0 * math.sqrt(4.0 * step))
    ride_gate = max(10.0 * tol, 2.0 * math.sqrt(step))
    g = np.tile(pts * math.exp(T0), (ns, 1))
    u_ang = theta0.copy()
    riding = np.zeros((ns, n_pts), dtype=bool)
    theta = np.zeros((ns, n_pts))
    swallow = np.full((ns, n_pts), np.nan)
    t_block = 4096
    k = 0
    while k < n_steps:
        m = min(t_block, n_steps - k)
        dts = np.diff(times[k : k + m + 1])
        dbs = np.empty((ns, m))
        for i, rng in enumerate(rngs):
            dbs[i] = rng.standard_normal(m)
        dbs *= np.sqrt(dts)[None, :]
        for j in range(m):
            dt = float(dts[j])
            u = np.exp(1j * u_ang)[:, None]
            active = np.isnan(swallow)
            fl = active & ~riding
            if np.any(fl):
                d = u - g
                near = fl & (np.abs(d) < near_gap)
                far = fl & ~near
                if np.any(far):
                    g = np.where(far, g + dt * _phi_arr(u, np.where(far, g, 10.0)), g)
                if np.any(near):
                    u2 = u * u
                    s = d * d
                    ratio = s / u2
                    a, b = ratio.real, ratio.imag
                    root_arg = tol2 * tol2 - b * b
                    root = np.sqrt(np.maximum(root_arg, 0.0))
                    hit = near & (root_arg >= 0) & (a >= -root) & (a - 4 * dt <= root)
                    frac = np.clip((a - root) / (4 * dt), 0.0, 1.0)
                    swallow = np.where(hit, times[k + j] + frac * dt - T0, swallow)
                    move = near & ~hit
                    if np.any(move):
                        r = np.sqrt(s - 4 * u2 * dt)
                        r = np.where(np.real(r * np.conj(d)) < 0, -r, r)
                        g = np.where(move, u - r, g)
                landed = fl & np.isnan(swallow) & (np.abs(g - u) < tol)
                swallow = np.where(landed, times[k + j + 1] - T0, swallow)
            rd = active & riding
            db_col = dbs[:, j][:, None]
            if np.any(rd):
                th = theta
                sign = np.where(th >= 0, 1.0, -1.0)
                c = np.cos(np.abs(th) / 2.0) * math.exp(-dt / 2.0)
                th_d = sign * 2.0 * np.arccos(np.clip(c, -1.0, 1.0))
                th_new = th_d - sq * db_col
                crossed = rd & ((th_d > 0) != (th_new > 0)) & (np.abs(th_d) + np.abs(th_new) <= 1.0)
                prod = th_d * th_new
                cand = rd & ~crossed & (prod / (kappa * dt) < 14.0) & (np.abs(th_d) < 0.5)
                bh = np.zeros_like(crossed)
                if np.any(cand):
                    p = np.exp(-2.0 * prod / (kappa * dt))
                    rows = np.flatnonzero(cand.any(axis=1))
                    for i in rows:
                        cols = np.flatnonzero(cand[i])
                        draws = bridge[i].uniform(size=cols.size)
                        bh[i, cols] = draws < p[i, cols]
                hit = crossed | bh
                frac = np.where(
                    crossed,
                    np.abs(th_d) / np.maximum(np.abs(th_d) + np.abs(th_new), 1e-300),
                    0.5,
                )
                swallow = np.where(hit, times[k + j] + frac * dt - T0, swallow)
                keep = rd & ~hit
                theta = np.where(keep, np.mod(th_new + math.pi, 2 * math.pi) - math.pi, theta)
            u_ang = u_ang + sq * dbs[:, j]
            # Promote near-circle floaters to the riding state.
            u_next = np.exp(1j * u_ang)[:, None]
            fl = np.isnan(swallow) & ~riding
            gap = np.abs(g) - 1.0
            promote = fl & (gap < ride_gate)
            if np.any(promote):
                rel = np.angle(g * np.conj(u_next))
                theta = np.where(promote, rel, theta)
                riding = riding | promote
        if not np.isnan(swallow).any():
            break
        k += m
    return swallow
