"""Ensemble Kalman filtering for the flowline model.

Three layers: a generic stochastic (perturbed-observation) measurement
update on an ensemble matrix; the thickness-only filter conditional on
known bed and friction fields; and the state-augmented variant that
carries bed and log-friction blocks under a persistence model. A pooled
driver runs the conditional filter once per posterior parameter draw and
concatenates the results.

All covariance estimates normalize anomalies by 1/(N_e - 1); ensemble
means use 1/N_e. Observation-space solves factorize (A2 + R) on the
observed entries only.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from icecal.fields import FieldParams, reconstruct_fields
from icecal.ssa import (
    BedProfile,
    FrictionProfile,
    Grid,
    PhysicalConstants,
    _gl_index_batch,
    _grounded_mask_batch,
    _solve_velocity_batch,
    _step_year_batch,
    _surface_batch,
    grounded_mask,
    thickness_from_surface,
)
from icecal.statespace import NoiseConfig, ObservationSet, ProcessNoiseModel


@dataclass(frozen=True)
class FilterConfig:
    """Knobs shared by every filter run."""

    n_ensemble: int = 500
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 200
    init_poly_degree: int = 10
    inflation: float = 1.0                  # multiplicative, 1.0 = off
    localization_radius: float | None = None  # metres, None = off
    max_failed_fraction: float = 0.10
    keep_forecasts: bool = False

    def __post_init__(self):
        if self.n_ensemble < 2:
            raise ValueError("need at least 2 ensemble members")
        if self.inflation < 1.0:
            raise ValueError("inflation below 1 deflates the ensemble")


@dataclass
class Ensemble:
    """Thickness ensemble at one time; velocity rows are solver warm starts."""

    thickness: np.ndarray  # (N_e, J+1), m
    velocity: np.ndarray   # (N_e, J+1), m/yr
    year: float = 0.0

    def __post_init__(self):
        self.thickness = np.asarray(self.thickness, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.thickness.ndim != 2 or self.thickness.shape[0] < 2:
            raise ValueError("ensemble needs at least 2 member rows")
        if self.thickness.shape != self.velocity.shape:
            raise ValueError("thickness and velocity must share one shape")

    @property
    def size(self) -> int:
        return self.thickness.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.thickness.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.thickness.std(axis=0, ddof=1)


@dataclass
class AugmentedEnsemble:
    """Joint (thickness, bed, log-friction) ensemble at one time."""

    thickness: np.ndarray
    bed: np.ndarray
    log_friction: np.ndarray
    velocity: np.ndarray
    year: float = 0.0

    def __post_init__(self):
        self.thickness = np.asarray(self.thickness, dtype=float)
        self.bed = np.asarray(self.bed, dtype=float)
        self.log_friction = np.asarray(self.log_friction, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.thickness.ndim != 2 or self.thickness.shape[0] < 2:
            raise ValueError("ensemble needs at least 2 member rows")
        for block in (self.bed, self.log_friction, self.velocity):
            if block.shape != self.thickness.shape:
                raise ValueError("all blocks must share the thickness shape")

    @property
    def size(self) -> int:
        return self.thickness.shape[0]


def ensemble_summary(members: np.ndarray) -> dict:
    """Columnwise mean, SD, and central 95% band of a member matrix."""
    members = np.asarray(members, dtype=float)
    lo, hi = np.percentile(members, [2.5, 97.5], axis=0)
    return {
        "mean": members.mean(axis=0),
        "sd": members.std(axis=0, ddof=1),
        "q025": lo,
        "q975": hi,
    }


# ---------------------------------------------------------------------------
# generic measurement update
# ---------------------------------------------------------------------------

def _gaspari_cohn(dist, radius):
    """Compactly supported 5th-order taper; 1 at 0, 0 beyond 2*radius."""
    r = np.abs(dist) / radius
    near = np.clip(r, 0.0, 1.0)
    far = np.clip(r, 1.0, 2.0)
    taper_near = (-0.25 * near ** 5 + 0.5 * near ** 4 + 0.625 * near ** 3
                  - (5.0 / 3.0) * near ** 2 + 1.0)
    taper_far = ((1.0 / 12.0) * far ** 5 - 0.5 * far ** 4 + 0.625 * far ** 3
                 + (5.0 / 3.0) * far ** 2 - 5.0 * far + 4.0 - (2.0 / 3.0) / far)
    out = np.where(r <= 1.0, taper_near, np.where(r <= 2.0, taper_far, 0.0))
    return out


def analysis_update(members, predicted_obs, observed, obs_variance, rng,
                    inflation: float = 1.0,
                    state_positions=None, obs_positions=None,
                    localization_radius: float | None = None) -> np.ndarray:
    """Stochastic ensemble measurement update on a generic member matrix.

    members: (N_e, d) forecast ensemble; predicted_obs: (N_e, n) noise-free
    operator outputs per member; observed: (n,) data; obs_variance: (n,)
    diagonal of R. Each member is nudged by the sampled gain applied to its
    own perturbed innovation. Entries with zero variance are dropped (the
    gain there is degenerate by construction). Returns the updated matrix.
    """
    members = np.asarray(members, dtype=float)
    predicted_obs = np.asarray(predicted_obs, dtype=float)
    observed = np.asarray(observed, dtype=float)
    r = np.asarray(obs_variance, dtype=float)
    n_e = members.shape[0]
    if predicted_obs.shape[0] != n_e:
        raise ValueError("predicted_obs needs one row per member")
    if observed.shape != (predicted_obs.shape[1],) or r.shape != observed.shape:
        raise ValueError("observed and obs_variance must match predicted_obs columns")

    live = r > 0
    if not live.any():
        return members.copy()
    y = observed[live]
    r = r[live]
    pred = predicted_obs[:, live]

    if inflation != 1.0:
        center = members.mean(axis=0, keepdims=True)
        members = center + inflation * (members - center)
        pred_center = pred.mean(axis=0, keepdims=True)
        pred = pred_center + inflation * (pred - pred_center)

    x_anom = members - members.mean(axis=0, keepdims=True)
    y_anom = pred - pred.mean(axis=0, keepdims=True)
    a1 = x_anom.T @ y_anom / (n_e - 1)
    a2 = y_anom.T @ y_anom / (n_e - 1)

    if localization_radius is not None:
        if state_positions is None or obs_positions is None:
            raise ValueError("localization needs state and observation positions")
        sp = np.asarray(state_positions, dtype=float)
        op = np.asarray(obs_positions, dtype=float)[live]
        a1 *= _gaspari_cohn(sp[:, None] - op[None, :], localization_radius)
        a2 *= _gaspari_cohn(op[:, None] - op[None, :], localization_radius)

    s = a2 + np.diag(r)
    factor = cho_factor(s, lower=True)
    perturbed = pred + rng.standard_normal(pred.shape) * np.sqrt(r)
    innovations = y[None, :] - perturbed
    return members + (a1 @ cho_solve(factor, innovations.T)).T


# ---------------------------------------------------------------------------
# flowline-specific pieces
# ---------------------------------------------------------------------------

def _smooth_polynomial(s, values, mask, degree):
    """Least-squares polynomial through the observed nodes, on a scaled axis."""
    mid = 0.5 * (s[0] + s[-1])
    half = 0.5 * (s[-1] - s[0])
    x = (s - mid) / half
    n_pts = int(mask.sum())
    deg = min(degree, max(n_pts - 1, 0))
    coeffs = np.polynomial.polynomial.polyfit(x[mask], values[mask], deg)
    return np.polynomial.polynomial.polyval(x, coeffs)


def init_state_ensemble(z_obs, bed: BedProfile, consts: PhysicalConstants,
                        noise: NoiseConfig, n_ensemble: int, rng,
                        grid: Grid, mask=None, poly_degree: int = 10) -> Ensemble:
    """Initial thickness ensemble from year-1 surface elevation observations.

    Thickness is recovered through the flotation-aware surface inversion,
    smoothed with a global polynomial fit over the observed nodes (which
    also fills gaps), then perturbed with correlated noise whose SD is the
    grounded / floating initial value from the config. Members are clamped
    nonnegative. The shared velocity rows start at zero; the first forecast
    solves them from the geometry.
    """
    rng = np.random.default_rng(rng)
    z_obs = np.asarray(z_obs, dtype=float)
    mask = np.ones(z_obs.size, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("initialization needs at least one observed elevation")

    h_pts = thickness_from_surface(z_obs, bed.elevation, consts)
    trend = np.maximum(_smooth_polynomial(grid.s, h_pts, mask, poly_degree), 0.0)
    grounded = grounded_mask(trend, bed.elevation, consts)
    sd = np.where(grounded, noise.init_sd_grounded, noise.init_sd_floating)
    corr_chol = ProcessNoiseModel(grid, noise).correlation_cholesky
    draws = sd * (rng.standard_normal((n_ensemble, grid.n_nodes)) @ corr_chol.T)
    members = np.maximum(trend + draws, 0.0)
    return Ensemble(members, np.zeros_like(members), year=0.0)


def _resample_members(blocks, hard, rng, max_failed_fraction):
    """Overwrite hard-failed rows in every block with surviving rows."""
    n_e = hard.size
    n_bad = int(hard.sum())
    if n_bad == 0:
        return 0
    if n_bad > max_failed_fraction * n_e or n_bad == n_e:
        raise RuntimeError(
            f"{n_bad}/{n_e} ensemble members failed in one step")
    survivors = np.flatnonzero(~hard)
    donors = rng.choice(survivors, size=n_bad)
    bad = np.flatnonzero(hard)
    for block in blocks:
        block[bad] = block[donors]
    return n_bad


def forecast(ens: Ensemble, fields, consts: PhysicalConstants, grid: Grid,
             noise_model: ProcessNoiseModel, rng, cfg: FilterConfig):
    """Advance every member one year and add state-dependent process noise.

    Members whose velocity solve goes singular are resampled from the
    survivors (then perturbed like everyone else); the step aborts if more
    than the configured fraction fail at once. Returns (Ensemble, n_resampled).
    """
    bed, friction = _resolve_fields(fields, grid)
    H, U, _, _, hard, _ = _step_year_batch(
        ens.thickness, ens.velocity,
        bed.elevation[None, :], friction.coefficient[None, :],
        consts, grid.spacing, cfg.tol, cfg.max_iter)
    hard |= ~np.isfinite(H).all(axis=1) | ~np.isfinite(U).all(axis=1)
    n_bad = _resample_members([H, U], hard, rng, cfg.max_failed_fraction)
    H = np.maximum(H + noise_model.sample(H, rng), 0.0)
    return Ensemble(H, U, year=ens.year + 1.0), n_bad


def _resolve_fields(fields, grid):
    if isinstance(fields, FieldParams):
        return reconstruct_fields(fields, grid)
    return fields


def _predict_observations(H, U, bed_rows, c_rows, consts, grid, tol, max_iter):
    """Batched observation operator: (surface, velocity) per member row."""
    Z = _surface_batch(H, bed_rows, consts)
    gl = _gl_index_batch(_grounded_mask_batch(H, bed_rows, consts))
    cols = np.arange(H.shape[1])
    c_eff = np.where(cols[None, :] <= gl[:, None], c_rows, 0.0)
    U_new, _, _, delta, _ = _solve_velocity_batch(
        H, Z, c_eff, consts, grid.spacing, U.copy(), tol, max_iter)
    if not np.isfinite(delta).all():
        raise RuntimeError("velocity solve went singular while predicting "
                           "observations")
    return Z, U_new


def _stack_observed(obs: ObservationSet, t: int):
    """Flatten time-t observed entries: values, variances, masks, positions."""
    mz = obs.mask_elevation[t]
    mu = obs.mask_velocity[t]
    y = np.concatenate([obs.elevation[t][mz], obs.velocity[t][mu]])
    r = np.concatenate([obs.var_elevation[t][mz], obs.var_velocity[t][mu]])
    return y, r, mz, mu


def analysis(ens: Ensemble, obs: ObservationSet, t: int, fields,
             consts: PhysicalConstants, grid: Grid, rng,
             cfg: FilterConfig) -> Ensemble:
    """Measurement update of a thickness ensemble with the year-t data."""
    y, r, mz, mu = _stack_observed(obs, t)
    if y.size == 0:
        return Ensemble(ens.thickness.copy(), ens.velocity.copy(), ens.year)
    bed, friction = _resolve_fields(fields, grid)
    Z, U = _predict_observations(ens.thickness, ens.velocity,
                                 bed.elevation[None, :],
                                 friction.coefficient[None, :],
                                 consts, grid, cfg.tol, cfg.max_iter)
    pred = np.hstack([Z[:, mz], U[:, mu]])
    obs_pos = np.concatenate([grid.s[mz], grid.s[mu]])
    updated = analysis_update(
        ens.thickness, pred, y, r, rng, inflation=cfg.inflation,
        state_positions=grid.s, obs_positions=obs_pos,
        localization_radius=cfg.localization_radius)
    return Ensemble(np.maximum(updated, 0.0), U, year=ens.year)


@dataclass
class FilterRun:
    """Per-year filtered ensembles plus bookkeeping."""

    analyses: list
    forecasts: list | None
    n_resampled: int
    metadata: dict


def run_enkf(fields, obs: ObservationSet, cfg: FilterConfig,
             consts: PhysicalConstants, grid: Grid) -> FilterRun:
    """Full filter pass conditional on known bed and friction fields.

    The year-1 observations enter only through the initial ensemble; each
    later year gets a forecast and (if anything was observed) an analysis.
    Deterministic for a fixed (config, observations) pair.
    """
    rng = np.random.default_rng(cfg.seed)
    bed, friction = _resolve_fields(fields, grid)
    noise_model = ProcessNoiseModel(grid, cfg.noise)
    ens = init_state_ensemble(obs.elevation[0], bed, consts, cfg.noise,
                              cfg.n_ensemble, rng, grid,
                              mask=obs.mask_elevation[0],
                              poly_degree=cfg.init_poly_degree)
    ens.year = float(obs.years[0])
    analyses = [ens]
    forecasts = [] if cfg.keep_forecasts else None
    n_resampled = 0
    for t in range(1, obs.n_years):
        ens, n_bad = forecast(ens, (bed, friction), consts, grid,
                              noise_model, rng, cfg)
        n_resampled += n_bad
        ens.year = float(obs.years[t])
        if forecasts is not None:
            forecasts.append(ens)
        ens = analysis(ens, obs, t, (bed, friction), consts, grid, rng, cfg)
        analyses.append(ens)
    metadata = {
        "n_ensemble": cfg.n_ensemble,
        "seed": cfg.seed,
        "inflation": cfg.inflation,
        "localization_radius": cfg.localization_radius,
        "n_resampled": n_resampled,
    }
    return FilterRun(analyses, forecasts, n_resampled, metadata)


# ---------------------------------------------------------------------------
# state-augmented filter
# ---------------------------------------------------------------------------

def _augmented_matrix(ens: AugmentedEnsemble) -> np.ndarray:
    return np.hstack([ens.thickness, ens.bed, ens.log_friction])


def _split_augmented(matrix, n_nodes):
    return (matrix[:, :n_nodes], matrix[:, n_nodes:2 * n_nodes],
            matrix[:, 2 * n_nodes:])


def init_augmented_ensemble(z_obs, bed_prior_sampler, friction_prior_sampler,
                            consts: PhysicalConstants, noise: NoiseConfig,
                            n_ensemble: int, rng, grid: Grid, mask=None,
                            poly_degree: int = 10) -> AugmentedEnsemble:
    """Joint initial ensemble: sampled beds, log of sampled frictions, and
    per-member thicknesses inverted from the year-1 surface with that
    member's own bed. Bed and friction blocks start independent."""
    rng = np.random.default_rng(rng)
    z_obs = np.asarray(z_obs, dtype=float)
    mask = np.ones(z_obs.size, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("initialization needs at least one observed elevation")

    beds = np.asarray(bed_prior_sampler(rng, n_ensemble), dtype=float)
    frictions = np.asarray(friction_prior_sampler(rng, n_ensemble), dtype=float)
    if beds.shape != (n_ensemble, grid.n_nodes) or frictions.shape != beds.shape:
        raise ValueError("prior samplers must return (N_e, J+1) matrices")
    if np.any(frictions <= 0):
        raise ValueError("friction draws must be positive (log block)")

    mid = 0.5 * (grid.s[0] + grid.s[-1])
    half = 0.5 * (grid.s[-1] - grid.s[0])
    x = (grid.s - mid) / half
    h_pts = np.empty((n_ensemble, grid.n_nodes))
    for i in range(n_ensemble):
        h_pts[i] = thickness_from_surface(z_obs, beds[i], consts)
    deg = min(poly_degree, max(int(mask.sum()) - 1, 0))
    coeffs = np.polynomial.polynomial.polyfit(x[mask], h_pts[:, mask].T, deg)
    trends = np.maximum(np.polynomial.polynomial.polyval(x, coeffs), 0.0)

    grounded = _grounded_mask_batch(trends, beds, consts)
    sd = np.where(grounded, noise.init_sd_grounded, noise.init_sd_floating)
    corr_chol = ProcessNoiseModel(grid, noise).correlation_cholesky
    draws = sd * (rng.standard_normal((n_ensemble, grid.n_nodes)) @ corr_chol.T)
    members = np.maximum(trends + draws, 0.0)
    return AugmentedEnsemble(members, beds, np.log(frictions),
                             np.zeros_like(members), year=0.0)


def run_augmented_enkf(obs: ObservationSet, bed_prior_sampler,
                       friction_prior_sampler, cfg: FilterConfig,
                       consts: PhysicalConstants, grid: Grid) -> FilterRun:
    """Joint state-and-parameter filter under a persistence model.

    Thickness blocks evolve through the dynamics with each member's own bed
    and friction; bed and log-friction persist between years and change
    only through the measurement update's cross-covariances.
    """
    rng = np.random.default_rng(cfg.seed)
    noise_model = ProcessNoiseModel(grid, cfg.noise)
    ens = init_augmented_ensemble(obs.elevation[0], bed_prior_sampler,
                                  friction_prior_sampler, consts, cfg.noise,
                                  cfg.n_ensemble, rng, grid,
                                  mask=obs.mask_elevation[0],
                                  poly_degree=cfg.init_poly_degree)
    ens.year = float(obs.years[0])
    analyses = [ens]
    forecasts = [] if cfg.keep_forecasts else None
    n_resampled = 0
    aug_positions = np.tile(grid.s, 3)
    for t in range(1, obs.n_years):
        c_rows = np.exp(ens.log_friction)
        H, U, _, _, hard, _ = _step_year_batch(
            ens.thickness, ens.velocity, ens.bed, c_rows,
            consts, grid.spacing, cfg.tol, cfg.max_iter)
        hard |= ~np.isfinite(H).all(axis=1) | ~np.isfinite(U).all(axis=1)
        bed_rows = ens.bed.copy()
        logc_rows = ens.log_friction.copy()
        n_resampled += _resample_members([H, U, bed_rows, logc_rows], hard,
                                         rng, cfg.max_failed_fraction)
        H = np.maximum(H + noise_model.sample(H, rng), 0.0)
        ens = AugmentedEnsemble(H, bed_rows, logc_rows, U,
                                year=float(obs.years[t]))
        if forecasts is not None:
            forecasts.append(ens)

        y, r, mz, mu = _stack_observed(obs, t)
        if y.size:
            Z, U_pred = _predict_observations(
                ens.thickness, ens.velocity, ens.bed, np.exp(ens.log_friction),
                consts, grid, cfg.tol, cfg.max_iter)
            pred = np.hstack([Z[:, mz], U_pred[:, mu]])
            obs_pos = np.concatenate([grid.s[mz], grid.s[mu]])
            updated = analysis_update(
                _augmented_matrix(ens), pred, y, r, rng,
                inflation=cfg.inflation, state_positions=aug_positions,
                obs_positions=obs_pos,
                localization_radius=cfg.localization_radius)
            h_new, bed_new, logc_new = _split_augmented(updated, grid.n_nodes)
            ens = AugmentedEnsemble(np.maximum(h_new, 0.0), bed_new, logc_new,
                                    U_pred, year=ens.year)
        analyses.append(ens)
    metadata = {
        "n_ensemble": cfg.n_ensemble,
        "seed": cfg.seed,
        "inflation": cfg.inflation,
        "localization_radius": cfg.localization_radius,
        "n_resampled": n_resampled,
    }
    return FilterRun(analyses, forecasts, n_resampled, metadata)


# ---------------------------------------------------------------------------
# pooled two-stage filtering
# ---------------------------------------------------------------------------

@dataclass
class PooledFilterResult:
    """Concatenated per-year ensembles over L conditional filter runs."""

    pooled: list            # per year: (L*N_e, J+1) thickness matrix
    years: np.ndarray
    run_means: np.ndarray   # (L, T, J+1)
    run_variances: np.ndarray
    n_retries: int
    metadata: dict
    field_draws: list = field(default_factory=list)  # parameter draw per run

    def pooled_mean(self, t: int) -> np.ndarray:
        return self.pooled[t].mean(axis=0)

    def pooled_variance(self, t: int) -> np.ndarray:
        return self.pooled[t].var(axis=0, ddof=1)


def pooled_posterior_filtering(sample_params, obs: ObservationSet,
                               cfg: FilterConfig, n_draws: int,
                               consts: PhysicalConstants, grid: Grid,
                               max_retries: int | None = None) -> PooledFilterResult:
    """Run the conditional filter once per parameter draw and pool the years.

    ``sample_params(rng)`` draws one parameter set (FieldParams or a
    (bed, friction) pair) from the stage-one posterior. Each run gets an
    independent child seed; a run that aborts is retried with a fresh draw.
    """
    if n_draws < 1:
        raise ValueError("need at least one parameter draw")
    if max_retries is None:
        max_retries = 2 * n_draws
    seed_seq = np.random.SeedSequence(cfg.seed)
    param_rng = np.random.default_rng(seed_seq.spawn(1)[0])

    runs = []
    draws_used = []
    n_retries = 0
    while len(runs) < n_draws:
        fields = sample_params(param_rng)
        run_seed = int(seed_seq.spawn(1)[0].generate_state(1)[0])
        run_cfg = replace(cfg, seed=run_seed)
        try:
            runs.append(run_enkf(fields, obs, run_cfg, consts, grid))
            draws_used.append(fields)
        except RuntimeError:
            n_retries += 1
            if n_retries > max_retries:
                raise
    n_years = obs.n_years
    pooled = [np.vstack([run.analyses[t].thickness for run in runs])
              for t in range(n_years)]
    run_means = np.stack([[run.analyses[t].mean for t in range(n_years)]
                          for run in runs])
    run_vars = np.stack([[run.analyses[t].sd ** 2 for t in range(n_years)]
                         for run in runs])
    metadata = {
        "n_draws": n_draws,
        "n_ensemble": cfg.n_ensemble,
        "pooled_size": n_draws * cfg.n_ensemble,
        "seed": cfg.seed,
        "n_retries": n_retries,
    }
    return PooledFilterResult(pooled, obs.years.copy(), run_means, run_vars,
                              n_retries, metadata, field_draws=draws_used)
