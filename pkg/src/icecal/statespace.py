"""State-space wrapper around the flowline dynamics.

Defines the data model used by every inference engine: the observation
operator mapping a latent state to (surface elevation, velocity), the
observation and process noise rules, missingness handling, synthetic
observation generation, model-discrepancy estimation, and 1D nearest-k
regridding.

Missing entries carry a sentinel value of 0 in the stored arrays; the
boolean masks are authoritative and every estimator in the package consumes
masks, never sentinels.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import make_smoothing_spline

from icecal.fields import FieldParams, _chol_with_jitter, reconstruct_fields
from icecal.ssa import (
    BedProfile,
    FrictionProfile,
    Grid,
    IceState,
    PhysicalConstants,
    VELOCITY_DELTA_SLACK,
    grounded_mask,
    grounding_line_index,
    solve_velocity,
    surface_elevation,
)


@dataclass(frozen=True)
class NoiseConfig:
    """Observation, process, and initial-ensemble noise rules."""

    elevation_sd: float = 10.0          # m
    velocity_fraction: float = 0.25     # of true speed
    velocity_cap: float = 20.0          # m/yr
    process_corr_range: float = 50e3    # m
    process_fraction: float = 0.02      # of thickness
    process_cap: float = 20.0           # m
    init_sd_grounded: float = 50.0      # m
    init_sd_floating: float = 20.0      # m

    def __post_init__(self):
        if min(self.elevation_sd, self.velocity_fraction, self.process_fraction) < 0:
            raise ValueError("noise SDs and fractions must be non-negative")
        if min(self.velocity_cap, self.process_cap, self.process_corr_range) <= 0:
            raise ValueError("caps and ranges must be positive")


@dataclass(frozen=True)
class ObservationSet:
    """Annual surface-elevation and velocity observations with missingness.

    All arrays have shape (T, J+1). Values and variances are 0 at masked
    (missing) slots; the masks say what was actually observed.
    """

    years: np.ndarray
    elevation: np.ndarray
    velocity: np.ndarray
    mask_elevation: np.ndarray
    mask_velocity: np.ndarray
    var_elevation: np.ndarray
    var_velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "years", np.asarray(self.years, dtype=float))
        for name in ("elevation", "velocity", "var_elevation", "var_velocity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("mask_elevation", "mask_velocity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=bool))
        shape = self.elevation.shape
        for name in ("velocity", "mask_elevation", "mask_velocity",
                     "var_elevation", "var_velocity"):
            if getattr(self, name).shape != shape:
                raise ValueError("observation arrays must share one (T, J+1) shape")
        if self.years.shape != (shape[0],):
            raise ValueError("years must have one entry per observation time")
        for mask, var in ((self.mask_elevation, self.var_elevation),
                          (self.mask_velocity, self.var_velocity)):
            if np.any(var[mask] < 0) or np.any(~np.isfinite(var[mask])):
                raise ValueError("observed entries need finite non-negative variances")

    @property
    def n_years(self) -> int:
        return self.elevation.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.elevation.shape[1]


def _resolve_fields(fields, grid: Grid):
    """Accept FieldParams or an explicit (BedProfile, FrictionProfile) pair."""
    if isinstance(fields, FieldParams):
        return reconstruct_fields(fields, grid)
    bed, friction = fields
    return bed, friction


def observation_operator(state: IceState, fields, consts: PhysicalConstants,
                         grid: Grid, tol: float = 1e-6, max_iter: int = 200):
    """Map a latent state to noise-free (elevation, velocity) observables.

    ``fields`` is a FieldParams or a (BedProfile, FrictionProfile) pair.
    Elevation comes from the flotation-aware surface; velocity re-solves the
    momentum balance on the state's thickness, warm-started from the state's
    velocity. Raises if the velocity solve fails beyond the steppers' slack.
    """
    bed, friction = _resolve_fields(fields, grid)
    z = surface_elevation(state.thickness, bed.elevation, consts)
    gl = grounding_line_index(state.thickness, bed.elevation, consts)
    u, info = solve_velocity(state.thickness, z, friction.coefficient, gl,
                             consts, grid, u_init=state.velocity,
                             tol=tol, max_iter=max_iter)
    if not info.converged and info.last_delta > VELOCITY_DELTA_SLACK:
        raise RuntimeError(
            f"observation operator velocity solve failed "
            f"(moved {info.last_delta:.2e} m/yr on the final sweep)")
    return z, u


def velocity_error_sd(u, fraction: float = 0.25, cap: float = 20.0) -> np.ndarray:
    """Velocity observation error SD: a fraction of speed, capped."""
    return np.minimum(fraction * np.abs(u), cap)


def velocity_mask_pattern(n_years: int, n_nodes: int,
                          velocity_stride: int = 4,
                          sparse_years: int = 12) -> np.ndarray:
    """Velocity availability: every ``velocity_stride``-th node for the first
    ``sparse_years`` observation times, every node afterwards. (T, J+1)."""
    mask = np.ones((n_years, n_nodes), dtype=bool)
    stride_mask = (np.arange(n_nodes) % velocity_stride) == 0
    mask[:min(sparse_years, n_years)] = stride_mask
    return mask


def default_missingness(trajectory, bed: BedProfile, consts: PhysicalConstants,
                        velocity_stride: int = 4, sparse_years: int = 12):
    """Observation masks mimicking the satellite-era data availability.

    Elevation is missing wherever the ice is floating that year. Velocity
    follows ``velocity_mask_pattern``. Returns (mask_elevation,
    mask_velocity), each (T, J+1).
    """
    n = len(trajectory)
    n_nodes = trajectory[0].thickness.size
    mask_z = np.zeros((n, n_nodes), dtype=bool)
    for t, state in enumerate(trajectory):
        mask_z[t] = grounded_mask(state.thickness, bed.elevation, consts)
    mask_u = velocity_mask_pattern(n, n_nodes, velocity_stride, sparse_years)
    return mask_z, mask_u


def simulate_observations(trajectory, fields, noise: NoiseConfig,
                          mask_elevation, mask_velocity, rng,
                          consts: PhysicalConstants, grid: Grid) -> ObservationSet:
    """Noisy annual observations of a trajectory under the data model.

    Applies the observation operator to every state, adds independent
    Gaussian errors (elevation SD fixed, velocity SD from the true speed),
    then masks. Noise is drawn for every node regardless of the masks, so
    the same seed yields identical observed values under any missingness.
    """
    rng = np.random.default_rng(rng)
    mask_z = np.asarray(mask_elevation, dtype=bool)
    mask_u = np.asarray(mask_velocity, dtype=bool)
    n = len(trajectory)
    if mask_z.shape[0] != n or mask_u.shape[0] != n:
        raise ValueError("need one mask row per trajectory state")

    bed, friction = _resolve_fields(fields, grid)
    years = np.empty(n)
    z_all = np.empty((n, grid.n_nodes))
    u_all = np.empty((n, grid.n_nodes))
    var_z = np.empty_like(z_all)
    var_u = np.empty_like(u_all)
    for t, state in enumerate(trajectory):
        z, u = observation_operator(state, (bed, friction), consts, grid)
        sd_u = velocity_error_sd(u, noise.velocity_fraction, noise.velocity_cap)
        z_all[t] = z + rng.normal(0.0, noise.elevation_sd, grid.n_nodes)
        u_all[t] = u + rng.standard_normal(grid.n_nodes) * sd_u
        var_z[t] = noise.elevation_sd ** 2
        var_u[t] = sd_u ** 2
        years[t] = state.year

    z_all[~mask_z] = 0.0
    u_all[~mask_u] = 0.0
    var_z[~mask_z] = 0.0
    var_u[~mask_u] = 0.0
    return ObservationSet(years, z_all, u_all, mask_z, mask_u, var_z, var_u)


# ---------------------------------------------------------------------------
# process noise
# ---------------------------------------------------------------------------

class ProcessNoiseModel:
    """State-dependent thickness process noise V(h) = D(h)·K·D(h).

    D is diagonal with entries min(fraction·h, cap); K is the fixed
    exponential correlation over the grid (correlation exp(-3) at one
    range). The correlation Cholesky factor is computed once per grid.
    """

    def __init__(self, grid: Grid, noise: NoiseConfig):
        self.grid = grid
        self.noise = noise
        d = np.abs(grid.s[:, None] - grid.s[None, :])
        self.correlation = np.exp(-3.0 * d / noise.process_corr_range)
        self.correlation_cholesky = _chol_with_jitter(self.correlation, 1.0)

    def diagonal_scale(self, thickness) -> np.ndarray:
        h = np.asarray(thickness, dtype=float)
        return np.minimum(self.noise.process_fraction * h, self.noise.process_cap)

    def dense(self, thickness) -> np.ndarray:
        d = self.diagonal_scale(thickness)
        return d[:, None] * self.correlation * d[None, :]

    def sample(self, thickness, rng, size: int | None = None) -> np.ndarray:
        """Draw correlated noise scaled per-node by the thickness rule.

        thickness may be (J+1,) with ``size`` draws, or a stack (B, J+1)
        giving one draw per row.
        """
        rng = np.random.default_rng(rng)
        h = np.asarray(thickness, dtype=float)
        L = self.correlation_cholesky
        if h.ndim == 1:
            m = 1 if size is None else size
            xi = rng.standard_normal((m, h.size))
            out = self.diagonal_scale(h) * (xi @ L.T)
            return out[0] if size is None else out
        if size is not None:
            raise ValueError("size applies only to a single thickness vector")
        xi = rng.standard_normal(h.shape)
        return self.diagonal_scale(h) * (xi @ L.T)


def process_noise_covariance(thickness, noise: NoiseConfig, grid: Grid):
    """(diagonal scale vector, correlation Cholesky factor) of V(h)."""
    model = ProcessNoiseModel(grid, noise)
    return model.diagonal_scale(thickness), model.correlation_cholesky


# ---------------------------------------------------------------------------
# model discrepancy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Discrepancy:
    """Time-constant additive data-model mismatch, one value per node."""

    elevation: np.ndarray
    velocity: np.ndarray
    smoothed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "elevation", np.asarray(self.elevation, dtype=float))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))
        if self.elevation.shape != self.velocity.shape:
            raise ValueError("discrepancy channels must share one shape")
        if not (np.isfinite(self.elevation).all() and np.isfinite(self.velocity).all()):
            raise ValueError("discrepancy must be finite")


def _masked_mean_per_node(obs_values, model_values, mask):
    """Mean of (obs - model) per node over observed years and simulations.

    obs_values, mask: (T, n). model_values: (n_sim, T, n). Nodes never
    observed come back NaN.
    """
    diff = np.where(mask[None, :, :], obs_values[None, :, :] - model_values, 0.0)
    num = diff.sum(axis=(0, 1))
    den = model_values.shape[0] * mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.maximum(den, 1), np.nan)


def _smooth_channel(s, raw, smooth: bool) -> np.ndarray:
    """Spline-smooth a per-node curve, interpolating through NaN nodes."""
    valid = np.isfinite(raw)
    if not valid.any():
        raise ValueError("discrepancy channel has no observed node at all")
    if valid.sum() < 4 or not smooth:
        return np.interp(s, s[valid], raw[valid])
    spline = make_smoothing_spline(s[valid], raw[valid])
    return spline(s)


def estimate_discrepancy(obs: ObservationSet, prior_sampler, n_sim: int,
                         rng, grid: Grid, smooth: bool = True) -> Discrepancy:
    """Monte Carlo estimate of the time-constant data-model discrepancy.

    ``prior_sampler(rng, n)`` must return noise-free model observables
    (elevation, velocity), each of shape (n, T, J+1), for n independent
    parameter draws from the prior pushed through the forward model. The
    per-node average of (observation - model output) over observed slots
    and simulations is smoothed along the flow line with a cubic smoothing
    spline (regularization chosen by generalized cross-validation), which
    also fills nodes that were never observed.
    """
    if n_sim < 1:
        raise ValueError("need at least one simulation")
    rng = np.random.default_rng(rng)
    z_model, u_model = prior_sampler(rng, n_sim)
    z_model = np.asarray(z_model, dtype=float)
    u_model = np.asarray(u_model, dtype=float)
    expected = (n_sim, obs.n_years, obs.n_nodes)
    if z_model.shape != expected or u_model.shape != expected:
        raise ValueError(f"prior_sampler must return arrays of shape {expected}")

    raw_z = _masked_mean_per_node(obs.elevation, z_model, obs.mask_elevation)
    raw_u = _masked_mean_per_node(obs.velocity, u_model, obs.mask_velocity)
    return Discrepancy(
        elevation=_smooth_channel(grid.s, raw_z, smooth),
        velocity=_smooth_channel(grid.s, raw_u, smooth),
        smoothed=smooth,
    )


def adjust_observations(obs: ObservationSet, disc: Discrepancy) -> ObservationSet:
    """Subtract the discrepancy from observed values; masks untouched."""
    z = np.where(obs.mask_elevation, obs.elevation - disc.elevation[None, :], 0.0)
    u = np.where(obs.mask_velocity, obs.velocity - disc.velocity[None, :], 0.0)
    return replace(obs, elevation=z, velocity=u)


# ---------------------------------------------------------------------------
# regridding
# ---------------------------------------------------------------------------

def regrid_nearest_k(points, values, targets, k: int = 4, radius: float = None):
    """Average of the nearest k in-radius points at each target position.

    Returns (regridded values, missing mask); a target with no point within
    ``radius`` is flagged missing (value 0). Distance ties prefer the
    leftmost point. 1D positions only.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if radius is None or not radius > 0:
        raise ValueError("a positive radius is required")
    p = np.asarray(points, dtype=float)
    v = np.asarray(values, dtype=float)
    t = np.asarray(targets, dtype=float)
    out = np.zeros(t.size)
    missing = np.ones(t.size, dtype=bool)
    if p.size == 0:
        return out, missing
    order = np.argsort(p, kind="stable")
    ps, vs = p[order], v[order]

    insert = np.searchsorted(ps, t)
    for i, (ti, pos) in enumerate(zip(t, insert)):
        left = pos - 1
        right = pos
        total = 0.0
        count = 0
        while count < k:
            d_left = ti - ps[left] if left >= 0 else np.inf
            d_right = ps[right] - ti if right < ps.size else np.inf
            if d_left <= d_right:
                if d_left > radius:
                    break
                total += vs[left]
                left -= 1
            else:
                if d_right > radius:
                    break
                total += vs[right]
                right += 1
            count += 1
        if count:
            out[i] = total / count
            missing[i] = False
    return out, missing
