"""Random fields and field compression for the flowline setting.

Three concerns live here:
  * Gaussian-process machinery (covariances, unconditional and conditional
    sampling, local polynomial trends) used to draw bedrock and friction
    scenarios.
  * The synthetic truth: deterministic trend profiles plus a fractal
    roughness component for the bed, and the fixed oscillatory friction
    field, matching the simulation study setup.
  * Compact basis representations: compactly supported bumps on evenly
    spaced centroids, with least-squares projection and reconstruction.

Correlation ranges follow the convention that correlation decays to exp(-3)
at one range: squared-exponential kernels use exp(-3 (d/range)^2) and
exponential kernels exp(-3 d/range).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icecal.ssa import BedProfile, FrictionProfile, Grid, IceState

# relative jitter ladder for Cholesky factorizations of dense covariances
_JITTER_START = 1e-10
_JITTER_DOUBLINGS = 6


@dataclass(frozen=True)
class CovarianceSpec:
    """Stationary 1D covariance: kind, sill variance, range, optional nugget."""

    kind: str                # 'squared_exponential' or 'exponential'
    variance: float
    corr_range: float        # m; correlation = exp(-3) at this distance
    nugget: float = 0.0      # extra variance at exactly coincident points

    def __post_init__(self):
        if self.kind not in ("squared_exponential", "exponential"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.variance < 0 or self.nugget < 0 or self.corr_range <= 0:
            raise ValueError("covariance needs non-negative variance/nugget and positive range")


def covariance_matrix(spec: CovarianceSpec, locations, locations2=None) -> np.ndarray:
    """Covariance between two location sets (defaults to one set with itself).

    The nugget contributes only where the distance is exactly zero.
    """
    a = np.asarray(locations, dtype=float)
    b = a if locations2 is None else np.asarray(locations2, dtype=float)
    d = np.abs(a[:, None] - b[None, :])
    if spec.kind == "squared_exponential":
        K = spec.variance * np.exp(-3.0 * (d / spec.corr_range) ** 2)
    else:
        K = spec.variance * np.exp(-3.0 * d / spec.corr_range)
    if spec.nugget:
        K = K + spec.nugget * (d == 0.0)
    return K


def _chol_with_jitter(K: np.ndarray, scale: float) -> np.ndarray:
    """Lower Cholesky factor, adding escalating diagonal jitter on failure."""
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        pass
    jitter = _JITTER_START * max(scale, 1e-300)
    eye = np.eye(K.shape[0])
    for _ in range(_JITTER_DOUBLINGS + 1):
        try:
            return np.linalg.cholesky(K + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise np.linalg.LinAlgError(
        f"covariance not positive definite even with jitter {jitter:.3e}")


def sample_gp_unconditional(mean, spec: CovarianceSpec, locations,
                            rng, size: int | None = None):
    """Draw fields from GP(mean, spec) at the given locations.

    mean may be a scalar or a vector over locations; rng is a Generator or
    a seed. With ``size=None`` a single 1D field is returned, otherwise an
    array (size, n).
    """
    rng = np.random.default_rng(rng)
    locations = np.asarray(locations, dtype=float)
    n = locations.size
    mu = np.broadcast_to(np.asarray(mean, dtype=float), (n,))
    if spec.variance == 0.0 and spec.nugget == 0.0:
        out = np.tile(mu, (size or 1, 1))
        return out[0] if size is None else out
    K = covariance_matrix(spec, locations)
    L = _chol_with_jitter(K, spec.variance + spec.nugget)
    draws = mu + (L @ rng.standard_normal((n, size or 1))).T
    return draws[0] if size is None else draws


def sample_gp_conditional(obs_locations, obs_values, obs_noise_sd,
                          trend, spec: CovarianceSpec, target_locations,
                          rng, size: int | None = None):
    """Draw from the GP posterior given noisy point observations.

    ``trend`` is the prior mean as a vector over target_locations; its value
    at the observation sites is taken by linear interpolation. Observation
    noise is independent with standard deviation ``obs_noise_sd`` (scalar or
    per-observation vector). With no observations this reduces to
    unconditional sampling around the trend.

    Residual-kriging construction: one unconditional draw over the union of
    target and observation locations, corrected through the noise-perturbed
    observations. Only the observation Gram matrix is factorised, and a
    noiseless observation sitting exactly on a target node is honoured
    exactly in every draw.
    """
    rng = np.random.default_rng(rng)
    t_locs = np.asarray(target_locations, dtype=float)
    o_locs = np.asarray(obs_locations, dtype=float)
    mu_t = np.broadcast_to(np.asarray(trend, dtype=float), t_locs.shape).astype(float)
    if o_locs.size == 0:
        return sample_gp_unconditional(mu_t, spec, t_locs, rng, size)
    y = np.asarray(obs_values, dtype=float)
    noise_var = np.broadcast_to(np.asarray(obs_noise_sd, dtype=float) ** 2, o_locs.shape)
    mu_o = np.interp(o_locs, t_locs, mu_t)
    m = 1 if size is None else size

    # joint zero-mean draw; coincident points share one value by construction
    uniq, inverse = np.unique(np.concatenate([t_locs, o_locs]), return_inverse=True)
    K_uu = covariance_matrix(spec, uniq)
    L = _chol_with_jitter(K_uu, spec.variance + spec.nugget)
    x = (L @ rng.standard_normal((uniq.size, m))).T
    x_t = x[:, inverse[:t_locs.size]]
    x_o = x[:, inverse[t_locs.size:]]
    eps = rng.standard_normal((m, o_locs.size)) * np.sqrt(noise_var)

    K_oo = covariance_matrix(spec, o_locs) + np.diag(noise_var)
    K_to = covariance_matrix(spec, t_locs, o_locs)
    resid = (y - mu_o)[None, :] - x_o - eps
    gain = np.linalg.solve(K_oo, resid.T).T
    draws = mu_t[None, :] + x_t + gain @ K_to.T
    return draws[0] if size is None else draws


def gp_posterior_moments(obs_locations, obs_values, obs_noise_sd,
                         trend, spec: CovarianceSpec, target_locations):
    """Posterior mean and covariance of the GP regression in
    ``sample_gp_conditional`` (useful for oracles and diagnostics)."""
    t_locs = np.asarray(target_locations, dtype=float)
    o_locs = np.asarray(obs_locations, dtype=float)
    mu_t = np.broadcast_to(np.asarray(trend, dtype=float), t_locs.shape).astype(float)
    y = np.asarray(obs_values, dtype=float)
    noise_var = np.broadcast_to(np.asarray(obs_noise_sd, dtype=float) ** 2, o_locs.shape)
    mu_o = np.interp(o_locs, t_locs, mu_t)
    K_oo = covariance_matrix(spec, o_locs) + np.diag(noise_var)
    K_to = covariance_matrix(spec, t_locs, o_locs)
    K_tt = covariance_matrix(spec, t_locs)
    sol = np.linalg.solve(K_oo, np.column_stack([y - mu_o, K_to.T]))
    return mu_t + K_to @ sol[:, 0], K_tt - K_to @ sol[:, 1:]


def local_polynomial_trend(locations, values, bandwidth, targets,
                           degree: int = 2) -> np.ndarray:
    """Local weighted polynomial regression (tricube kernel).

    Fits a degree-``degree`` polynomial around each target using points
    within ``bandwidth``; windows too thin to determine the fit are widened
    to the nearest degree+2 points. Reproduces polynomial inputs of degree
    <= ``degree`` exactly.
    """
    x = np.asarray(locations, dtype=float)
    y = np.asarray(values, dtype=float)
    t = np.atleast_1d(np.asarray(targets, dtype=float))
    if x.size < degree + 2:
        raise ValueError(f"need at least {degree + 2} points for a degree-{degree} local fit")
    out = np.empty(t.size)
    for i, ti in enumerate(t):
        d = np.abs(x - ti)
        bw = bandwidth
        if (d < bw).sum() < degree + 2:
            # widen past the nearest degree+2 points; the factor keeps their
            # tricube weights bounded away from zero
            bw = np.partition(d, degree + 1)[degree + 1] * 1.5 + 1e-12
        w = np.clip(1.0 - (d / bw) ** 3, 0.0, None) ** 3
        sel = w > 0
        dx = (x[sel] - ti) / bw  # scaled offsets keep the design well conditioned
        A = np.vander(dx, degree + 1, increasing=True) * np.sqrt(w[sel])[:, None]
        coef, *_ = np.linalg.lstsq(A, y[sel] * np.sqrt(w[sel]), rcond=None)
        out[i] = coef[0]
    return out if np.ndim(targets) else out[0]


# ---------------------------------------------------------------------------
# synthetic truth
# ---------------------------------------------------------------------------

def midpoint_displacement(n_recursions: int, initial_sd: float,
                          decay_exponent: float, rng) -> np.ndarray:
    """Fractal roughness by recursive midpoint displacement.

    Returns 2^n_recursions + 1 points with the endpoints pinned at zero.
    Recursion k displaces the midpoints of the current segments by centered
    Gaussian noise with standard deviation initial_sd / 2^(decay_exponent*(k-1)).
    """
    if n_recursions < 1:
        raise ValueError("need at least one recursion")
    rng = np.random.default_rng(rng)
    n = 2 ** n_recursions
    pts = np.zeros(n + 1)
    seg = n
    sd = float(initial_sd)
    for _ in range(n_recursions):
        half = seg // 2
        idx = np.arange(half, n, seg)
        pts[idx] = 0.5 * (pts[idx - half] + pts[idx + half]) + rng.normal(0.0, sd, idx.size)
        sd /= 2.0 ** decay_exponent
        seg = half
    return pts


def synthetic_bed_trend(s) -> np.ndarray:
    """Deterministic bed trend: gentle rise to km 450, then a steep drop."""
    s = np.asarray(s, dtype=float)
    km = s / 1000.0
    return np.where(s <= 450e3, -600.0 + km, -150.0 - 5.0 * (km - 450.0))


def synthetic_bed(grid: Grid, rng,
                  roughness_sd: float = 500.0, decay_exponent: float = 0.7,
                  n_recursions: int = 12) -> BedProfile:
    """Synthetic true bed: trend plus midpoint-displacement roughness.

    The roughness is generated at 2^n_recursions intervals spanning the whole
    domain (about 200 m resolution for the full-size setup) and linearly
    interpolated onto the grid nodes.
    """
    rough = midpoint_displacement(n_recursions, roughness_sd, decay_exponent, rng)
    x = np.linspace(0.0, grid.length, rough.size)
    return BedProfile(synthetic_bed_trend(grid.s) + np.interp(grid.s, x, rough))


def synthetic_friction(grid: Grid) -> FrictionProfile:
    """Synthetic true friction: slow and fast sinusoids around 0.02."""
    s, L = grid.s, grid.length
    c = 0.02 + 0.015 * np.sin(5 * 2 * np.pi * s / L) * np.sin(100 * 2 * np.pi * s / L)
    return FrictionProfile(c)


def synthetic_initial_state(grid: Grid) -> IceState:
    """Pre-spin-up wedge: linear thickness taper and a weak linear velocity."""
    s, L = grid.s, grid.length
    return IceState(thickness=2000.0 * (1.0 - s / L), velocity=0.001 * s, year=0.0)


# ---------------------------------------------------------------------------
# compact basis representation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BasisSystem:
    """Evenly spaced compactly supported bump functions on the flow line.

    ``form`` selects the bump shape inside radius R: 'sharp' is the
    piecewise-linear tent 1 - d/R (the default used throughout), 'smooth'
    the classical quartic bump (1 - (d/R)^2)^2.
    """

    centroids: np.ndarray
    radius: float
    form: str = "sharp"

    def __post_init__(self):
        object.__setattr__(self, "centroids", np.asarray(self.centroids, dtype=float))
        if self.form not in ("sharp", "smooth"):
            raise ValueError(f"unknown basis form {self.form!r}")
        if not self.radius > 0:
            raise ValueError("basis radius must be positive")

    @property
    def n_functions(self) -> int:
        return self.centroids.size

    @classmethod
    def even(cls, n_functions: int, length: float, radius: float,
             form: str = "sharp") -> "BasisSystem":
        if n_functions < 2:
            raise ValueError("need at least two basis functions")
        return cls(np.linspace(0.0, length, n_functions), radius, form)


def basis_matrix(basis: BasisSystem, locations) -> np.ndarray:
    """Evaluate all basis functions at the locations: (n_locations, p)."""
    s = np.asarray(locations, dtype=float)
    d = np.abs(s[:, None] - basis.centroids[None, :])
    inside = d < basis.radius
    if basis.form == "sharp":
        return np.where(inside, 1.0 - d / basis.radius, 0.0)
    return np.where(inside, (1.0 - (d / basis.radius) ** 2) ** 2, 0.0)


def project_to_basis(values, Phi: np.ndarray, cond_limit: float = 1e12,
                     ridge: float = 1e-8) -> np.ndarray:
    """Least-squares coefficients of values in the basis.

    Falls back to a tiny ridge penalty when the design is numerically
    rank-deficient (condition number beyond ``cond_limit``).
    """
    y = np.asarray(values, dtype=float)
    if np.linalg.cond(Phi) > cond_limit:
        p = Phi.shape[1]
        return np.linalg.solve(Phi.T @ Phi + ridge * np.eye(p), Phi.T @ y)
    coeffs, *_ = np.linalg.lstsq(Phi, y, rcond=None)
    return coeffs


@dataclass(frozen=True)
class FieldParams:
    """Compressed representation of one bed/friction scenario.

    Bed is stored as coefficients of fluctuations around ``bed_trend``;
    friction as coefficients of the log coefficient field (mean included).
    """

    bed_coeffs: np.ndarray
    friction_coeffs: np.ndarray
    bed_trend: np.ndarray
    basis_bed: BasisSystem
    basis_friction: BasisSystem

    def __post_init__(self):
        object.__setattr__(self, "bed_coeffs", np.asarray(self.bed_coeffs, dtype=float))
        object.__setattr__(self, "friction_coeffs", np.asarray(self.friction_coeffs, dtype=float))
        object.__setattr__(self, "bed_trend", np.asarray(self.bed_trend, dtype=float))

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.bed_coeffs, self.friction_coeffs])


def reconstruct_fields(params: FieldParams, grid: Grid) -> tuple[BedProfile, FrictionProfile]:
    """Rebuild bed and friction profiles on the grid from basis coefficients."""
    Phi_b = basis_matrix(params.basis_bed, grid.s)
    Phi_c = basis_matrix(params.basis_friction, grid.s)
    bed = params.bed_trend + Phi_b @ params.bed_coeffs
    friction = np.exp(Phi_c @ params.friction_coeffs)
    return BedProfile(bed), FrictionProfile(friction)
