"""Gaussian free fields with exact grid covariance, and Liouville fields.

Covariance convention on the disk.  All kernels are built from the single
regularized log factor

    s(d) = -log d                      for d >= 2 eps,
    s(d) = -log(2 eps) + log 2 * (2 eps - d) / (2 eps)   below,

so that interior pairs get  s(|z-w|) + s(|1 - z conj(w)|)  (the Green
function  -log|z-w| - log|1-z conj(w)|  whenever both factors exceed 2 eps),
the interior diagonal is the circle-average variance -log(eps) - log(1-|z|^2),
and boundary pairs automatically get  -2 log|x-y|  with diagonal -2 log(eps),
the semicircle-average variance that makes eps^{gamma^2/4} the correct
boundary-length normalization.

On polar product grids the covariance is block-circulant in the angle index,
so the factorization is per angular mode: a dense Cholesky of each
(radial-levels x radial-levels) block after projecting out the boundary-mean
direction in mode zero.  This reproduces the full dense factorization exactly
while staying linear in the number of angles.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .params import LqgParams
from .rng import sample_rng


class DivergenceError(ValueError):
    """Green function evaluated on its diagonal."""


class DiagnosticError(RuntimeError):
    pass


def green_disk(z, w):
    """Free-boundary disk Green function -log|z-w| - log|1 - z conj(w)|."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    d = np.abs(z - w)
    if np.any(d == 0):
        raise DivergenceError("green_disk diverges on the diagonal")
    return -np.log(d) - np.log(np.abs(1 - z * np.conj(w)))


def _log_plus(z):
    return np.log(np.maximum(np.abs(z), 1.0))


def green_halfplane(z, w):
    """Free-boundary half-plane Green function with the |.|_+ normalization.

    Accepts ``w = inf`` (or ``z = inf``), where the value is 2 log|z|_+.
    """
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    z, w = np.broadcast_arrays(z, w)
    zinf = np.isinf(z.real) | np.isinf(z.imag)
    winf = np.isinf(w.real) | np.isinf(w.imag)
    out = np.empty(z.shape, dtype=float)
    both = zinf & winf
    if np.any(both):
        raise DivergenceError("green_halfplane diverges at z = w = inf")
    out[zinf] = 2.0 * _log_plus(w[zinf])
    out[winf] = 2.0 * _log_plus(z[winf])
    fin = ~(zinf | winf)
    if np.any(fin):
        zf, wf = z[fin], w[fin]
        d = np.abs(zf - wf)
        if np.any(d == 0):
            raise DivergenceError("green_halfplane diverges on the diagonal")
        out[fin] = (
            -np.log(d)
            - np.log(np.abs(zf - np.conj(wf)))
            + 2.0 * _log_plus(zf)
            + 2.0 * _log_plus(wf)
        )
    if out.shape == ():
        return float(out)
    return out


@dataclass
class GridSpec:
    """Sample locations for one field realization.

    ``nodes`` are the interior sample points and ``boundary_nodes`` the
    ordered (counterclockwise) boundary points; consecutive boundary nodes
    delimit the arcs of the boundary partition.  ``eps`` is the circle-average
    regularization radius.  Polar product grids carry their structure
    (``radii``/``angles``) so samplers can exploit the angular symmetry and
    interpolation can work in (r, theta).
    """

    domain: str  # "disk" | "half-plane-rectangle" | "cylinder"
    nodes: np.ndarray
    boundary_nodes: np.ndarray
    eps: float
    radii: np.ndarray | None = None
    angles: np.ndarray | None = None
    cell_areas: np.ndarray | None = None
    arc_lengths: np.ndarray | None = None
    x_levels: np.ndarray | None = None  # cylinder only
    metadata: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def n_boundary(self) -> int:
        return self.boundary_nodes.size


def polar_disk_grid(n_r: int, n_theta: int, eps: float, boundary_margin: float = 2.5) -> GridSpec:
    """Polar product grid on the unit disk with a staggered angular offset.

    Interior rings stay ``boundary_margin * eps`` away from the boundary so
    circle averages of radius ``eps`` fit inside the domain; the outermost
    cell is stretched to the unit circle so the cells partition the disk.
    No node sits at angle 0, keeping sample locations away from the standard
    boundary insertion point 1.
    """
    if eps <= 0 or n_r < 2 or n_theta < 4:
        raise ValueError("invalid polar grid parameters")
    r_max = 1.0 - boundary_margin * eps
    dr = r_max / n_r
    radii = (np.arange(n_r) + 0.5) * dr
    angles = (np.arange(n_theta) + 0.5) * (2 * math.pi / n_theta)
    zz = radii[:, None] * np.exp(1j * angles[None, :])
    r_in = radii - dr / 2
    r_out = np.minimum(radii + dr / 2, r_max)
    r_out[-1] = 1.0  # stretch the outer cells to cover the rim
    areas = 0.5 * (r_out**2 - r_in**2) * (2 * math.pi / n_theta)
    cell_areas = np.repeat(areas[:, None], n_theta, axis=1)
    boundary = np.exp(1j * angles)
    arc_lengths = np.full(n_theta, 2 * math.pi / n_theta)
    return GridSpec(
        domain="disk",
        nodes=zz.ravel(),
        boundary_nodes=boundary,
        eps=eps,
        radii=radii,
        angles=angles,
        cell_areas=cell_areas.ravel(),
        arc_lengths=arc_lengths,
    )


def halfplane_rect_grid(nx: int, ny: int, eps: float, x_span=(-1.0, 1.0), y_span=(0.1, 2.0)) -> GridSpec:
    """Rectangular half-plane grid (scattered covariance path, test scale)."""
    xs = np.linspace(*x_span, nx)
    ys = np.linspace(*y_span, ny)
    zz = (xs[None, :] + 1j * ys[:, None]).ravel()
    dx = xs[1] - xs[0] if nx > 1 else 1.0
    dy = ys[1] - ys[0] if ny > 1 else 1.0
    return GridSpec(
        domain="half-plane-rectangle",
        nodes=zz,
        boundary_nodes=np.asarray(xs, dtype=complex),
        eps=eps,
        cell_areas=np.full(zz.size, dx * dy),
        arc_lengths=np.full(nx, dx),
    )


def _overlap_deficit_table(n: int = 2049) -> tuple:
    """Table of Delta(x) = (2/pi) [u log x - int_0^u log(2 sin)], u = asin(x/2).

    Delta is the exact short-distance deficit of the two-circle average of
    the plane log kernel: avg avg -log|z' - w'| = -log(eps) - Delta(d / eps)
    for center distance d < 2 eps, joining -log d continuously at d = 2 eps.
    """
    x = np.linspace(0.0, 2.0, n)
    u = np.arcsin(np.clip(x / 2.0, 0.0, 1.0))
    # int_0^u log(2 sin t) dt = u log(2u) - u + int_0^u log(sin t / t) dt,
    # last term by cumulative Simpson on a shared fine grid.
    m = 16385
    ts = np.linspace(0.0, math.pi / 2.0, m)
    f = np.zeros(m)
    f[1:] = np.log(np.sin(ts[1:]) / ts[1:])
    h = ts[1] - ts[0]
    cum = np.zeros(m)
    cum[2::2] = np.cumsum((h / 3.0) * (f[0:-2:2] + 4.0 * f[1:-1:2] + f[2::2]))
    cum[1::2] = cum[0:-1:2] + (h / 12.0) * (
        5.0 * f[0:-1:2] + 8.0 * f[1::2] - np.concatenate([f[2::2], [f[-1]]])[: f[1::2].size]
    )
    smooth = np.interp(u, ts, cum)
    integral = np.where(u > 0, u * np.log(np.maximum(2 * u, 1e-300)) - u + smooth, 0.0)
    delta = (2.0 / math.pi) * (u * np.log(np.maximum(x, 1e-300)) - integral)
    delta[0] = 0.0
    return x, delta


_OVERLAP_X, _OVERLAP_DELTA = _overlap_deficit_table()


def _s_blend(d, eps):
    """Exact circle-average regularization of -log distance.

    Equals -log d for d >= 2 eps and the two-circle overlap average below,
    which is a genuine covariance (hence positive semidefinite on any node
    set) with short-distance value -log(eps) at d = 0.
    """
    d = np.asarray(d, dtype=float)
    lo = 2.0 * eps
    deficit = np.interp(np.minimum(d, lo) / eps, _OVERLAP_X, _OVERLAP_DELTA)
    return np.where(d >= lo, -np.log(np.maximum(d, 1e-300)), -math.log(eps) - deficit)


def disk_cov_kernel(z, w, eps):
    """Regularized circle-average covariance on the closed disk."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    return _s_blend(np.abs(z - w), eps) + _s_blend(np.abs(1 - z * np.conj(w)), eps)


def halfplane_cov_kernel(z, w, eps):
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    return (
        _s_blend(np.abs(z - w), eps)
        + _s_blend(np.abs(z - np.conj(w)), eps)
        + 2.0 * _log_plus(z)
        + 2.0 * _log_plus(w)
    )


class CovarianceFactorization:
    """Factor of the regularized node covariance, sampling-ready.

    Polar disk grids use the block-circulant mode decomposition; other grids
    fall back to one dense Cholesky.  In both cases the represented matrix
    reproduces the kernel exactly (up to the stated diagonal jitter), which
    ``reconstruct`` exposes for verification.
    """

    def __init__(self, grid: GridSpec, jitter_scale: float = 1e-12):
        self.grid = grid
        self.jitter_scale = jitter_scale
        if grid.domain == "disk" and grid.radii is not None:
            self._build_circulant()
        else:
            self._build_dense()

    # -- polar/circulant path ------------------------------------------------

    def _build_circulant(self) -> None:
        g = self.grid
        self.mode = "circulant"
        rho = np.concatenate([g.radii, [1.0]])  # radial levels incl. boundary
        P = rho.size
        M = g.angles.size
        lag = g.angles - g.angles[0]
        # K[p, q, d] = kernel between (rho_p, theta_j) and (rho_q, theta_{j-d})
        dist = np.sqrt(
            np.maximum(
                rho[:, None, None] ** 2
                + rho[None, :, None] ** 2
                - 2 * rho[:, None, None] * rho[None, :, None] * np.cos(lag)[None, None, :],
                0.0,
            )
        )
        prod = rho[:, None, None] * rho[None, :, None]
        dist2 = np.sqrt(np.maximum(1 + prod**2 - 2 * prod * np.cos(lag)[None, None, :], 0.0))
        K = _s_blend(dist, g.eps) + _s_blend(dist2, g.eps)
        modes = np.fft.rfft(K, axis=2).real  # (P, P, M//2 + 1)
        # Project the boundary-mean direction out of mode zero.
        A = np.eye(P)
        A[:, -1] -= 1.0
        modes[:, :, 0] = A @ modes[:, :, 0] @ A.T
        self._chol = np.empty_like(modes)
        tr = float(np.trace(modes[:, :, 0]) + 1.0)
        for m in range(modes.shape[2]):
            C = 0.5 * (modes[:, :, m] + modes[:, :, m].T)
            self._chol[:, :, m] = self._robust_cholesky(C)
        self._P, self._M = P, M

    def _robust_cholesky(self, C: np.ndarray) -> np.ndarray:
        n = C.shape[0]
        base = max(abs(np.trace(C)) / max(n, 1), 1.0)
        for mult in (1.0, 1e2, 1e4, 1e6):
            try:
                return np.linalg.cholesky(C + self.jitter_scale * mult * base * np.eye(n))
            except np.linalg.LinAlgError:
                continue
        # Eigenvalue clip as a last resort; recorded for diagnostics.
        w, V = np.linalg.eigh(C)
        clipped = np.maximum(w, self.jitter_scale * base)
        self._clipped = True
        return V @ np.diag(np.sqrt(clipped))

    def _build_dense(self) -> None:
        g = self.grid
        self.mode = "dense"
        pts = np.concatenate([g.nodes, g.boundary_nodes])
        if g.domain == "half-plane-rectangle":
            C = halfplane_cov_kernel(pts[:, None], pts[None, :], g.eps)
        elif g.domain == "disk":
            C = disk_cov_kernel(pts[:, None], pts[None, :], g.eps)
        else:
            raise ValueError(f"no dense covariance for domain {g.domain}")
        n = pts.size
        nb = g.n_boundary
        A = np.eye(n)
        A[:, n - nb :] -= 1.0 / nb
        C = A @ C @ A.T
        self._dense_chol = self._robust_cholesky(0.5 * (C + C.T))
        self._n = n

    # -- public API ------------------------------------------------------------

    def center_average_model(self):
        """Kriging weights for the eps-circle average at the origin.

        The scale-delta circle average at 0 has covariance -log max(|z|, delta)
        with every node -- independent of delta once delta < |z| -- so the
        grid determines the average at the regularization scale up to an
        independent Gaussian residual, and all deeper scales extend it as an
        independent Brownian motion in log scale.  Returns (row_weights,
        residual_sd); the estimate is row_weights . (per-ring angular means).
        """
        if self.mode != "circulant":
            raise ValueError("center-average model requires a polar grid")
        g = self.grid
        rho = np.concatenate([g.radii, [1.0]])
        eps = g.eps
        b = -np.log(np.maximum(rho, eps))
        C0 = self._chol[:, :, 0] @ self._chol[:, :, 0].T
        M = g.angles.size
        sol = np.linalg.solve(C0, b)
        weights = M * sol
        explained = M * float(b @ sol)
        resid_var = max(-math.log(eps) - explained, 1e-12)
        return weights, math.sqrt(resid_var)

    def sample(self, rng: np.random.Generator):
        """One field realization; returns (interior_values, boundary_values)."""
        g = self.grid
        if self.mode == "dense":
            xi = rng.standard_normal(self._n)
            vals = self._dense_chol @ xi
        else:
            P, M = self._P, self._M
            H = M // 2
            Y = np.zeros((P, H + 1), dtype=complex)
            for m in range(H + 1):
                L = self._chol[:, :, m]
                if m == 0 or (M % 2 == 0 and m == H):
                    Y[:, m] = math.sqrt(M) * (L @ rng.standard_normal(P))
                else:
                    xi = rng.standard_normal(P) + 1j * rng.standard_normal(P)
                    Y[:, m] = math.sqrt(M / 2.0) * (L @ xi)
            field_rows = np.fft.irfft(Y, n=M, axis=1)  # (P, M)
            vals = np.concatenate([field_rows[:-1].ravel(), field_rows[-1]])
        nb = g.n_boundary
        interior, boundary = vals[:-nb], vals[-nb:]
        correction = boundary.mean()
        return interior - correction, boundary - correction

    def reconstruct(self, i: int, j: int) -> float:
        """Represented covariance between flat node indices (interior then
        boundary), before the boundary-mean projection."""
        g = self.grid
        pts = np.concatenate([g.nodes, g.boundary_nodes])
        if g.domain == "disk":
            return float(disk_cov_kernel(pts[i], pts[j], g.eps))
        return float(halfplane_cov_kernel(pts[i], pts[j], g.eps))

    def node_variance(self) -> np.ndarray:
        """Kernel diagonal over interior nodes (pre-projection)."""
        g = self.grid
        if g.domain == "disk":
            return disk_cov_kernel(g.nodes, g.nodes.copy(), g.eps)
        return halfplane_cov_kernel(g.nodes, g.nodes.copy(), g.eps)

    def boundary_variance(self) -> np.ndarray:
        g = self.grid
        if g.domain == "disk":
            return disk_cov_kernel(g.boundary_nodes, g.boundary_nodes.copy(), g.eps)
        return halfplane_cov_kernel(g.boundary_nodes, g.boundary_nodes.copy(), g.eps)


@dataclass
class Insertion:
    alpha: float
    location: complex
    boundary: bool = False


@dataclass
class FieldSample:
    """One field realization: Gaussian part, log singularities, zero mode.

    The evaluation at any point decomposes exactly as

        gaussian + sum_k coeff_k * G(., w_k) + constant,

    where interior insertions contribute alpha * G and boundary insertions
    beta/2 * G.  ``weight`` is the importance weight of the sample within its
    ensemble.
    """

    grid: GridSpec
    gaussian: np.ndarray
    gaussian_boundary: np.ndarray
    insertions: list
    constant: float
    weight: float
    params: LqgParams | None = None
    metadata: dict = field(default_factory=dict)

    # -- evaluation -----------------------------------------------------------

    def _green(self, z, w):
        if self.grid.domain in ("disk",):
            return green_disk(z, w)
        if self.grid.domain == "half-plane-rectangle":
            return green_halfplane(z, w)
        raise ValueError(f"no insertion Green function on {self.grid.domain}")

    def singular_part(self, z, cap_eps: float | None = None, skip: int | None = None):
        """Sum of insertion contributions at points ``z``.

        With ``cap_eps`` the log distances are floored at ``cap_eps`` (the
        profile cap used by chaos measures); ``skip`` omits one insertion.
        """
        z = np.asarray(z, dtype=complex)
        out = np.zeros(z.shape, dtype=float)
        for k, ins in enumerate(self.insertions):
            if skip is not None and k == skip:
                continue
            coeff = ins.alpha if not ins.boundary else ins.alpha / 2.0
            if cap_eps is None:
                out = out + coeff * self._green(z, ins.location)
            else:
                d1 = np.maximum(np.abs(z - ins.location), cap_eps)
                d2 = np.maximum(np.abs(1 - z * np.conj(ins.location)), cap_eps)
                out = out - coeff * (np.log(d1) + np.log(d2))
        return out

    def interior_values(self, cap_eps: float | None = None) -> np.ndarray:
        return self.gaussian + self.singular_part(self.grid.nodes, cap_eps) + self.constant

    def boundary_values(self, cap_eps: float | None = None) -> np.ndarray:
        return (
            self.gaussian_boundary
            + self.singular_part(self.grid.boundary_nodes, cap_eps)
            + self.constant
        )

    def interp_gaussian(self, z) -> np.ndarray:
        """Bilinear interpolation of the Gaussian part in (r, theta).

        The boundary row participates as the outermost radial level, so
        points up to |z| = 1 are interpolable.
        """
        g = self.grid
        if g.radii is None:
            raise ValueError("interpolation requires a polar grid")
        z = np.asarray(z, dtype=complex)
        r = np.abs(z)
        th = np.mod(np.angle(z), 2 * math.pi)
        levels = np.concatenate([g.radii, [1.0]])
        rows = np.vstack([self.gaussian.reshape(g.radii.size, g.angles.size), self.gaussian_boundary])
        if np.any(r > 1 + 1e-9):
            raise ValueError("point outside the closed disk")
        r = np.minimum(r, 1.0)
        ip = np.clip(np.searchsorted(levels, r) - 1, 0, levels.size - 2)
        r0, r1 = levels[ip], levels[ip + 1]
        tr = np.clip((r - r0) / (r1 - r0), 0.0, 1.0)
        M = g.angles.size
        dth = 2 * math.pi / M
        # staggered angles: theta_j = (j + 0.5) dth
        jf = th / dth - 0.5
        j0 = np.floor(jf).astype(int) % M
        j1 = (j0 + 1) % M
        tt = np.mod(jf, 1.0)
        v00 = rows[ip, j0]
        v01 = rows[ip, j1]
        v10 = rows[ip + 1, j0]
        v11 = rows[ip + 1, j1]
        return (1 - tr) * ((1 - tt) * v00 + tt * v01) + tr * ((1 - tt) * v10 + tt * v11)

    def interp_variance(self, z) -> np.ndarray:
        """Exact variance of the bilinear-interpolated Gaussian part at ``z``.

        Uses the grid covariance kernel over the four stencil nodes, so
        chaos normalizations can match the sampled field scale pointwise.
        """
        g = self.grid
        if g.radii is None:
            raise ValueError("interpolation requires a polar grid")
        z = np.asarray(z, dtype=complex)
        r = np.minimum(np.abs(z), 1.0)
        th = np.mod(np.angle(z), 2 * math.pi)
        levels = np.concatenate([g.radii, [1.0]])
        ip = np.clip(np.searchsorted(levels, r) - 1, 0, levels.size - 2)
        r0, r1 = levels[ip], levels[ip + 1]
        tr = np.clip((r - r0) / (r1 - r0), 0.0, 1.0)
        M = g.angles.size
        dth = 2 * math.pi / M
        jf = th / dth - 0.5
        j0 = np.floor(jf).astype(int) % M
        j1 = (j0 + 1) % M
        tt = np.mod(jf, 1.0)
        nodes = np.stack(
            [
                r0 * np.exp(1j * g.angles[j0]),
                r0 * np.exp(1j * g.angles[j1]),
                r1 * np.exp(1j * g.angles[j0]),
                r1 * np.exp(1j * g.angles[j1]),
            ]
        )  # (4, n)
        wts = np.stack([(1 - tr) * (1 - tt), (1 - tr) * tt, tr * (1 - tt), tr * tt])
        var = np.zeros(z.shape, dtype=float)
        for a in range(4):
            for b in range(4):
                var += wts[a] * wts[b] * disk_cov_kernel(nodes[a], nodes[b], g.eps)
        return var

    def interp_gaussian_cylinder(self, x, theta) -> np.ndarray:
        g = self.grid
        if g.x_levels is None:
            raise ValueError("cylinder interpolation requires x_levels")
        xs = g.x_levels
        M = g.angles.size
        rows = self.gaussian.reshape(xs.size, M)
        x = np.clip(np.asarray(x, dtype=float), xs[0], xs[-1])
        ip = np.clip(np.searchsorted(xs, x) - 1, 0, xs.size - 2)
        tr = np.clip((x - xs[ip]) / (xs[ip + 1] - xs[ip]), 0.0, 1.0)
        dth = 2 * math.pi / M
        jf = np.mod(np.asarray(theta, dtype=float), 2 * math.pi) / dth - 0.5
        j0 = np.floor(jf).astype(int) % M
        j1 = (j0 + 1) % M
        tt = np.mod(jf, 1.0)
        return (1 - tr) * ((1 - tt) * rows[ip, j0] + tt * rows[ip, j1]) + tr * (
            (1 - tt) * rows[ip + 1, j0] + tt * rows[ip + 1, j1]
        )

    # -- serialization ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<4sI", b"FLD1", self.grid.n_nodes)]
        nodes = np.ascontiguousarray(self.grid.nodes, dtype=np.complex128)
        parts.append(struct.pack("<I", self.grid.n_boundary))
        parts.append(nodes.astype("<c16").tobytes())
        parts.append(np.ascontiguousarray(self.grid.boundary_nodes, "<c16").tobytes())
        parts.append(np.ascontiguousarray(self.gaussian, "<f8").tobytes())
        parts.append(np.ascontiguousarray(self.gaussian_boundary, "<f8").tobytes())
        parts.append(struct.pack("<I", len(self.insertions)))
        for ins in self.insertions:
            parts.append(
                struct.pack("<dddB", ins.alpha, ins.location.real, ins.location.imag, ins.boundary)
            )
        parts.append(struct.pack("<dd", self.constant, self.weight))
        return b"".join(parts)

    def sidecar(self) -> dict:
        return {
            "domain": self.grid.domain,
            "eps": self.grid.eps,
            "n_nodes": int(self.grid.n_nodes),
            "n_boundary": int(self.grid.n_boundary),
            "params": self.params.as_dict() if self.params else None,
            "metadata": {k: v for k, v in self.metadata.items() if isinstance(v, (int, float, str))},
        }

    def save(self, path_prefix: str) -> None:
        with open(path_prefix + ".bin", "wb") as f:
            f.write(self.to_bytes())
        with open(path_prefix + ".json", "w") as f:
            json.dump(self.sidecar(), f, indent=1, sort_keys=True)

    @classmethod
    def from_bytes(cls, raw: bytes, grid: GridSpec, params: LqgParams | None = None) -> "FieldSample":
        magic, n = struct.unpack_from("<4sI", raw, 0)
        if magic != b"FLD1":
            raise ValueError("bad field container header")
        off = 8
        (nb,) = struct.unpack_from("<I", raw, off)
        off += 4
        off += 16 * n + 16 * nb  # node coordinates (grid supplied separately)
        gaussian = np.frombuffer(raw, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        gb = np.frombuffer(raw, dtype="<f8", count=nb, offset=off).copy()
        off += 8 * nb
        (n_ins,) = struct.unpack_from("<I", raw, off)
        off += 4
        insertions = []
        for _ in range(n_ins):
            a, re, im, bflag = struct.unpack_from("<dddB", raw, off)
            off += 25
            insertions.append(Insertion(a, complex(re, im), bool(bflag)))
        constant, weight = struct.unpack_from("<dd", raw, off)
        return cls(grid, gaussian, gb, insertions, constant, weight, params=params)


def sample_gff(grid: GridSpec, fact: CovarianceFactorization, seed: int) -> FieldSample:
    """Centered Gaussian field with the factorized covariance, boundary
    average projected to zero."""
    if fact.grid is not grid and fact.grid.n_nodes != grid.n_nodes:
        raise ValueError("factorization does not match grid")
    rng = sample_rng(seed)
    interior, boundary = fact.sample(rng)
    return FieldSample(
        grid=grid,
        gaussian=interior,
        gaussian_boundary=boundary,
        insertions=[],
        constant=0.0,
        weight=1.0,
    )


def sample_lf_disk_fixed_length(
    params: LqgParams,
    alpha: float,
    beta: float,
    ell: float,
    grid: GridSpec,
    fact: CovarianceFactorization,
    seed: int,
) -> FieldSample:
    """Liouville field on the disk pinned to boundary length ``ell``.

    The raw field is GFF + alpha G(., 0) + (beta/2) G(., 1); its boundary
    chaos length L fixes the zero mode (2/gamma) log(ell / L) and the sample
    weight (2/gamma) ell^{(2 alpha + beta - 2Q)/gamma - 1} / L^{(2 alpha +
    beta - 2Q)/gamma}.  The output boundary length equals ``ell`` exactly by
    the e^{gamma c / 2} scaling of boundary chaos.
    """
    from .gmc import boundary_measure

    if beta >= params.Q:
        raise ValueError(f"boundary insertion beta={beta} must lie below Q={params.Q}")
    if alpha >= params.Q:
        raise ValueError(f"interior insertion alpha={alpha} must lie below Q={params.Q}")
    if ell <= 0:
        raise ValueError("target boundary length must be positive")
    base = sample_gff(grid, fact, seed)
    base.params = params
    base.insertions = [Insertion(alpha, 0.0 + 0.0j, False), Insertion(beta, 1.0 + 0.0j, True)]
    attach_center_ladder(base, fact, sample_rng(seed, 0, tag=4))
    L = boundary_measure(base).total
    if not np.isfinite(L) or L <= 0:
        raise DiagnosticError(f"degenerate boundary chaos length L={L}")
    gamma = params.gamma
    expo = (2 * alpha + beta - 2 * params.Q) / gamma
    base.constant = (2.0 / gamma) * math.log(ell / L)
    base.weight = (2.0 / gamma) * ell ** (expo - 1.0) / L**expo
    base.metadata["raw_boundary_length"] = L
    return base


def attach_center_ladder(
    fieldsample: FieldSample,
    fact: CovarianceFactorization,
    rng: np.random.Generator,
    depth: float = 60.0,
    ds: float = 0.5,
) -> None:
    """Sample the circle averages at the origin down to sub-grid scales.

    The chaos mass near an interior insertion is carried by the Brownian
    scale walk of the center averages; a fixed-eps field truncates its
    supremum and with it the power tail of the total quantum area.  The
    ladder restores the walk: X(log 1/eps) is kriged from the grid (plus its
    independent residual), and deeper scales add independent increments.
    Stored as (s_grid, x_values) in the sample metadata.
    """
    g = fieldsample.grid
    weights, resid_sd = fact.center_average_model()
    M = g.angles.size
    rows = fieldsample.gaussian.reshape(g.radii.size, M)
    row_means = np.concatenate([rows.mean(axis=1), [fieldsample.gaussian_boundary.mean()]])
    x0 = float(weights @ row_means) + resid_sd * rng.standard_normal()
    s0 = -math.log(g.eps)
    n = int(math.ceil(depth / ds))
    s_edges = s0 + ds * np.arange(n + 1)
    # values at annulus mid-scales, so the local normalization is mean-exact
    x_mid = np.empty(n)
    x_mid[0] = x0 + math.sqrt(ds / 2.0) * rng.standard_normal()
    x_mid[1:] = np.cumsum(math.sqrt(ds) * rng.standard_normal(n - 1))
    x_mid[1:] += x_mid[0]
    fieldsample.metadata["center_ladder_s"] = s_edges
    fieldsample.metadata["center_ladder_x"] = x_mid


# -- coordinate change ---------------------------------------------------------


@dataclass
class DiskMobius:
    """Automorphism z -> e^{i phi} (z - a) / (1 - conj(a) z) of the disk."""

    a: complex = 0.0 + 0.0j
    phi: float = 0.0

    def forward(self, z):
        z = np.asarray(z, dtype=complex)
        return np.exp(1j * self.phi) * (z - self.a) / (1 - np.conj(self.a) * z)

    def inverse(self, w):
        w = np.asarray(w, dtype=complex)
        v = w * np.exp(-1j * self.phi)
        return (v + self.a) / (1 + np.conj(self.a) * v)

    def inverse_deriv(self, w):
        w = np.asarray(w, dtype=complex)
        v = w * np.exp(-1j * self.phi)
        return np.exp(-1j * self.phi) * (1 - np.abs(self.a) ** 2) / (1 + np.conj(self.a) * v) ** 2


def image_grid(mapping, source: GridSpec) -> GridSpec:
    """Image of a polar grid under a conformal disk automorphism.

    Node positions are mapped forward and cell areas rescaled by |f'|^2, so a
    field pushed onto this grid needs no resampling of its Gaussian part.
    """
    fwd_nodes = mapping.forward(source.nodes)
    fwd_bdry = mapping.forward(source.boundary_nodes)
    # |f'(z)| from the inverse derivative at the image.
    dinv = np.abs(mapping.inverse_deriv(fwd_nodes))
    areas = source.cell_areas / dinv**2 if source.cell_areas is not None else None
    dinvb = np.abs(mapping.inverse_deriv(fwd_bdry))
    arcs = source.arc_lengths / dinvb if source.arc_lengths is not None else None
    return GridSpec(
        domain=source.domain,
        nodes=fwd_nodes,
        boundary_nodes=fwd_bdry,
        eps=source.eps,
        cell_areas=areas,
        arc_lengths=arcs,
        metadata={"image_of_polar": True},
    )


def coordinate_change(fieldsample: FieldSample, mapping, target_grid: GridSpec) -> FieldSample:
    """Push a field forward: new = old o inverse + Q log|(inverse)'|.

    The Gaussian part is evaluated at the preimages of the target nodes
    (exactly, when the target grid is the forward image of the source grid;
    by bilinear interpolation otherwise).  Insertions relabel exactly under
    disk automorphisms since the Green function is invariant; the Q-term is
    folded into the stored node values.
    """
    if fieldsample.params is None:
        raise ValueError("coordinate change needs params for Q")
    Q = fieldsample.params.Q
    src = fieldsample.grid
    exact = bool(target_grid.metadata.get("image_of_polar")) and target_grid.n_nodes == src.n_nodes
    if exact:
        gaussian = fieldsample.gaussian.copy()
        gaussian_b = fieldsample.gaussian_boundary.copy()
    else:
        z = mapping.inverse(target_grid.nodes)
        gaussian = fieldsample.interp_gaussian(z)
        zb = mapping.inverse(target_grid.boundary_nodes)
        gaussian_b = fieldsample.interp_gaussian(zb)
    gaussian = gaussian + Q * np.log(np.abs(mapping.inverse_deriv(target_grid.nodes)))
    gaussian_b = gaussian_b + Q * np.log(np.abs(mapping.inverse_deriv(target_grid.boundary_nodes)))
    insertions = [
        Insertion(ins.alpha, complex(mapping.forward(ins.location)), ins.boundary)
        for ins in fieldsample.insertions
    ]
    return FieldSample(
        grid=target_grid,
        gaussian=np.asarray(gaussian, dtype=float),
        gaussian_boundary=np.asarray(gaussian_b, dtype=float),
        insertions=insertions,
        constant=fieldsample.constant,
        weight=fieldsample.weight,
        params=fieldsample.params,
        metadata=dict(fieldsample.metadata),
    )


def girsanov_reweight(samples: Sequence[FieldSample], alpha1: float, alpha2: float, eps: float):
    """Tilt an ensemble from an alpha1 to an alpha2 interior insertion at 0.

    Each weight is multiplied by eps^{(alpha2^2 - alpha1^2)/2} *
    exp((alpha2 - alpha1) <phi, ring>), where the ring pairing averages the
    full field over the grid nodes nearest the circle |z| = eps.  Outside
    that circle the reweighted ensemble follows the alpha2 law; this is an
    exact finite-dimensional Gaussian identity on the grid.
    """
    out = []
    for s in samples:
        g = s.grid
        if g.radii is None:
            raise ValueError("ring pairing requires a polar grid")
        ring = int(np.argmin(np.abs(g.radii - eps)))
        if not (0.5 * eps < g.radii[ring] < 1.5 * eps):
            raise ValueError(f"eps={eps} not representable: nearest ring at r={g.radii[ring]}")
        M = g.angles.size
        vals = (
            s.gaussian.reshape(g.radii.size, M)[ring]
            + s.singular_part(g.radii[ring] * np.exp(1j * g.angles))
            + s.constant
        )
        pairing = float(np.mean(vals))
        factor = eps ** (0.5 * (alpha2**2 - alpha1**2)) * math.exp((alpha2 - alpha1) * pairing)
        s2 = FieldSample(
            grid=s.grid,
            gaussian=s.gaussian,
            gaussian_boundary=s.gaussian_boundary,
            insertions=list(s.insertions),
            constant=s.constant,
            weight=s.weight * factor,
            params=s.params,
            metadata=dict(s.metadata),
        )
        out.append(s2)
    return out


# -- cylinder / sphere field -----------------------------------------------------


def cylinder_grid(horizon: float, n_x: int, n_theta: int) -> GridSpec:
    """Uniform grid on the finite cylinder [-horizon, horizon] x [0, 2 pi).

    Nodes are encoded as x + i theta.  The effective regularization scale of
    the truncated lateral expansion (modes up to (n_theta - 1) // 2) is
    eps = exp(-sum 1/n), which the chaos normalization uses directly.
    """
    xs = np.linspace(-horizon, horizon, n_x)
    angles = (np.arange(n_theta) + 0.5) * (2 * math.pi / n_theta)
    n_modes = max((n_theta - 1) // 2, 1)
    var_lat = float(np.sum(1.0 / np.arange(1, n_modes + 1)))
    nodes = (xs[:, None] + 1j * angles[None, :]).ravel()
    dx = xs[1] - xs[0]
    dth = 2 * math.pi / n_theta
    return GridSpec(
        domain="cylinder",
        nodes=nodes,
        boundary_nodes=np.zeros(0, dtype=complex),
        eps=math.exp(-var_lat),
        angles=angles,
        cell_areas=np.full(nodes.size, dx * dth),
        x_levels=xs,
        metadata={"n_modes": n_modes, "var_lat": var_lat},
    )


def _conditioned_drifted_bm(a: float, xs: np.ndarray, rng, delta: float = 1e-3, n_sub: int = 8):
    """B_t - a t conditioned to stay negative, via the Doob transform drift
    -a coth(a |x|), started at -delta and sampled on the grid ``xs >= 0``."""
    out = np.empty(xs.size)
    x = -delta
    t = 0.0
    for i, target in enumerate(xs):
        while t < target - 1e-12:
            h = min((target - t) / math.ceil((target - t) / 0.02), target - t)
            for _ in range(n_sub):
                hh = h / n_sub
                drift = -a / math.tanh(max(a * (-x), 1e-12))
                x_new = x + drift * hh + math.sqrt(hh) * rng.standard_normal()
                if x_new >= 0.0:
                    x_new = -abs(x_new) - 1e-12  # reflect: conditioned path stays negative
                x = x_new
            t += h
        out[i] = x
    return out


def sample_sphere_field(
    params: LqgParams,
    alpha: float,
    grid: GridSpec,
    horizon: float,
    seed: int,
    condition_area: bool = True,
) -> FieldSample:
    """Two-ended sphere field on the cylinder.

    Radial part: two independent drifted Brownian motions conditioned
    negative (Doob transform with h(x) = 1 - e^{2 (Q - alpha) x}, entrance
    regularized at -1e-3), one per cylinder end.  Lateral part: mean-zero-
    per-circle Gaussian field with covariance sum_n (1/n) e^{-n |dx|}
    cos(n dtheta).  With ``condition_area`` the improper zero mode is
    restricted to total area >= 1: the weight gains the restriction mass
    (gamma / (4 (Q - alpha))) * A^{2 (Q - alpha) / gamma} and the constant is
    c0 + Exponential(rate 2 (Q - alpha)) with c0 = -log(A) / gamma.
    """
    from .gmc import area_measure

    if alpha >= params.Q:
        raise ValueError(f"alpha={alpha} must lie below Q={params.Q}")
    if grid.domain != "cylinder" or grid.x_levels is None:
        raise ValueError("sphere sampling needs a cylinder grid")
    a = params.Q - alpha
    xs = grid.x_levels
    if xs[-1] < horizon - 1e-9:
        raise ValueError("grid does not reach the requested horizon")
    rng = sample_rng(seed)
    pos = xs[xs >= 0]
    neg = -xs[xs < 0][::-1]
    right = _conditioned_drifted_bm(a, pos, rng)
    left = _conditioned_drifted_bm(a, neg, rng)
    radial = np.concatenate([left[::-1], right])
    if radial[0] > -4.0 / params.gamma or radial[-1] > -4.0 / params.gamma:
        raise DiagnosticError(
            f"horizon too short: radial ends at ({radial[0]:.2f}, {radial[-1]:.2f})"
        )
    M = grid.angles.size
    n_modes = grid.metadata["n_modes"]
    K = xs.size
    dx = np.diff(xs)
    lateral = np.zeros((K, M))
    ns = np.arange(1, n_modes + 1)
    acoef = np.empty((K, n_modes))
    bcoef = np.empty((K, n_modes))
    acoef[0] = rng.standard_normal(n_modes) / np.sqrt(ns)
    bcoef[0] = rng.standard_normal(n_modes) / np.sqrt(ns)
    for i in range(1, K):
        decay = np.exp(-ns * dx[i - 1])
        innov = np.sqrt((1 - decay**2) / ns)
        acoef[i] = decay * acoef[i - 1] + innov * rng.standard_normal(n_modes)
        bcoef[i] = decay * bcoef[i - 1] + innov * rng.standard_normal(n_modes)
    phases = np.outer(ns, grid.angles)  # (n_modes, M)
    lateral = acoef @ np.cos(phases) + bcoef @ np.sin(phases)
    gaussian = (radial[:, None] + lateral).ravel()
    fs = FieldSample(
        grid=grid,
        gaussian=gaussian,
        gaussian_boundary=np.zeros(0),
        insertions=[],
        constant=0.0,
        weight=1.0,
        params=params,
        metadata={"radial": radial},
    )
    if condition_area:
        A = area_measure(fs).total
        c0 = -math.log(A) / params.gamma
        rate = 2.0 * a
        fs.constant = c0 + rng.exponential(1.0 / rate)
        fs.weight = (params.gamma / (4.0 * a)) * A ** (2.0 * a / params.gamma)
        fs.metadata["c0"] = c0
        fs.metadata["area_at_zero_mode"] = A
    return fs
