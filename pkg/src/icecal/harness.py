"""Twin-experiment orchestration: synthetic truth, priors, the full
generate/train/evaluate pipeline, flotation-area trajectories, and report
emission.

The pipeline runs in named stages (spin_up, prior, generate, train,
evaluate, report); a failure anywhere is re-raised as a StageError naming
the stage, and every artifact written before the failure stays on disk.
All randomness is derived from the seeds on the ExperimentConfig.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .arrays import ArrayRecord, save_array
from .config import ExperimentConfig
from .enkf import (FilterConfig, PooledFilterResult,
                   pooled_posterior_filtering, run_augmented_enkf)
from .fields import (BasisSystem, CovarianceSpec, FieldParams, basis_matrix,
                     local_polynomial_trend, project_to_basis,
                     reconstruct_fields, sample_gp_conditional,
                     sample_gp_unconditional, synthetic_bed,
                     synthetic_friction, synthetic_initial_state)
from .metrics import coverage95, crps_ensemble, empirical_interval95, rmse
from .npi import (PosteriorParams, StandardizationStats, TrainingScenario,
                  assemble_cholesky, destandardize_coefficients,
                  generate_training_data, infer_posterior, regenerate_sample,
                  sample_posterior, save_checkpoint, train)
from .ssa import (Grid, IceState, PhysicalConstants, area_above_flotation,
                  grounding_line_index, spin_up)
from .statespace import ObservationSet

__all__ = [
    "StageError",
    "TruthSetup",
    "PriorSetup",
    "build_truth",
    "build_prior",
    "build_scenario",
    "posterior_field_sampler",
    "prior_field_samplers",
    "AafTrajectory",
    "aaf_trajectory",
    "MetricsReport",
    "run_osse",
    "emit_report",
    "parse_report",
    "save_observation_set",
    "load_observation_set",
]

QUANTITIES = ("bed", "friction", "thickness")
METHODS = ("npi", "augmented_enkf")
METRIC_NAMES = ("rmse", "crps_mean_per_node", "crps_sum_per_node", "coverage95")


class StageError(RuntimeError):
    """A pipeline stage failed; artifacts written so far are kept."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _child_seed(*parts) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts))
               .generate_state(1)[0])


# ---------------------------------------------------------------------------
# stage 1: synthetic truth
# ---------------------------------------------------------------------------

@dataclass
class TruthSetup:
    """The synthetic world: grid, constants, true fields, steady state."""

    grid: Grid
    consts: PhysicalConstants       # spin-up hardness
    bed: np.ndarray                 # (J+1,) true bed elevation
    friction: np.ndarray            # (J+1,) true basal friction
    steady_state: IceState
    spinup_years: int
    spinup_converged: bool


def build_truth(cfg: ExperimentConfig, progress=None) -> TruthSetup:
    """Draw the true fields and run the model to steady state."""
    grid = Grid.from_length(cfg.length, cfg.n_intervals)
    consts = PhysicalConstants()
    bed = synthetic_bed(grid, np.random.default_rng(cfg.truth_seed))
    friction = synthetic_friction(grid)
    if progress:
        progress(f"spinning up on {grid.n_nodes} nodes "
                 f"(threshold {cfg.spin_up_threshold} m/yr)")
    result = spin_up(synthetic_initial_state(grid), bed, friction, consts,
                     grid, threshold=cfg.spin_up_threshold,
                     max_years=cfg.spin_up_max_years)
    if not result.converged:
        raise RuntimeError(
            f"spin-up did not reach steady state in {result.years} years "
            f"(last yearly change {result.yearly_change[-1]:.3f} m)")
    if progress:
        progress(f"steady state after {result.years} years")
    state = IceState(result.state.thickness, result.state.velocity, year=0.0)
    return TruthSetup(grid, consts, bed.elevation, friction.coefficient,
                      state, result.years, result.converged)


# ---------------------------------------------------------------------------
# stage 2: priors
# ---------------------------------------------------------------------------

@dataclass
class PriorSetup:
    """Bed and friction priors in basis-coefficient form.

    The bed prior conditions a GP on noisy point observations of the true
    bed around a locally fitted polynomial trend; the friction prior is an
    unconditional GP on the log scale. ``sample_params`` maps a Generator
    to one FieldParams draw (field draws projected onto the tent bases).
    """

    obs_locations: np.ndarray
    obs_values: np.ndarray
    trend: np.ndarray
    basis_bed: BasisSystem
    basis_friction: BasisSystem
    bed_spec: CovarianceSpec
    friction_spec: CovarianceSpec
    sample_params: object = field(repr=False)


def build_prior(cfg: ExperimentConfig, truth: TruthSetup) -> PriorSetup:
    grid = truth.grid
    rng = np.random.default_rng(np.random.SeedSequence((cfg.truth_seed, 1)))
    locs = np.sort(rng.uniform(0.0, grid.length, cfg.n_bed_obs))
    vals = np.interp(locs, grid.s, truth.bed) \
        + rng.normal(0.0, cfg.bed_obs_noise_sd, cfg.n_bed_obs)
    trend = local_polynomial_trend(locs, vals, cfg.bed_trend_bandwidth,
                                   grid.s, degree=cfg.bed_trend_degree)

    bed_spec = CovarianceSpec("exponential", cfg.bed_gp_variance,
                              cfg.bed_gp_range, nugget=cfg.bed_gp_nugget)
    fric_spec = CovarianceSpec("squared_exponential", cfg.friction_gp_variance,
                               cfg.friction_gp_range)
    basis_b = BasisSystem.even(cfg.n_basis_bed, grid.length,
                               cfg.basis_radius_bed)
    basis_c = BasisSystem.even(cfg.n_basis_friction, grid.length,
                               cfg.basis_radius_friction)
    Phi_b = basis_matrix(basis_b, grid.s)
    Phi_c = basis_matrix(basis_c, grid.s)
    noise_sd = cfg.bed_obs_noise_sd
    floor = cfg.friction_floor
    mean_c = cfg.friction_gp_mean

    def sample_params(r):
        bed_draw = sample_gp_conditional(locs, vals, noise_sd, trend,
                                         bed_spec, grid.s, r)
        fric_draw = sample_gp_unconditional(mean_c, fric_spec, grid.s, r)
        theta_b = project_to_basis(bed_draw - trend, Phi_b)
        theta_c = project_to_basis(np.log(np.maximum(fric_draw, floor)), Phi_c)
        return FieldParams(theta_b, theta_c, trend, basis_b, basis_c)

    return PriorSetup(locs, vals, trend, basis_b, basis_c, bed_spec,
                      fric_spec, sample_params)


def build_scenario(cfg: ExperimentConfig, truth: TruthSetup,
                   prior: PriorSetup) -> TrainingScenario:
    return TrainingScenario(
        grid=truth.grid, consts=truth.consts,
        steady_state=truth.steady_state, sample_params=prior.sample_params,
        n_years=cfg.n_years, noise=cfg.noise,
        velocity_stride=cfg.velocity_stride,
        sparse_years=cfg.sparse_velocity_years,
        split_sizes=(cfg.n_train, cfg.n_val, cfg.n_test),
        batch_size=cfg.simulation_batch)


# ---------------------------------------------------------------------------
# parameter samplers for the two filtering routes
# ---------------------------------------------------------------------------

def posterior_field_sampler(params: PosteriorParams,
                            stats: StandardizationStats, prior: PriorSetup):
    """One-draw-per-call sampler over the fitted coefficient posterior.

    Matches sample_posterior's arithmetic draw for draw: solve L^T x = xi,
    destandardize blockwise, wrap as FieldParams for the filter.
    """
    L = assemble_cholesky(params)
    mean = params.mean
    p1 = params.p_bed

    def draw(rng):
        xi = np.random.default_rng(rng).standard_normal(mean.size)
        std = mean + solve_triangular(L.T, xi, lower=False)
        theta = destandardize_coefficients(std, stats, p1)
        return FieldParams(theta[:p1], theta[p1:], prior.trend,
                           prior.basis_bed, prior.basis_friction)

    return draw


def prior_field_samplers(prior: PriorSetup, grid: Grid):
    """(bed, friction) field samplers over the basis-projected prior,
    shaped for the augmented filter's initialization."""
    def beds(rng, n):
        out = np.empty((n, grid.n_nodes))
        for i in range(n):
            bed, _ = reconstruct_fields(prior.sample_params(rng), grid)
            out[i] = bed.elevation
        return out

    def frictions(rng, n):
        out = np.empty((n, grid.n_nodes))
        for i in range(n):
            _, fric = reconstruct_fields(prior.sample_params(rng), grid)
            out[i] = fric.coefficient
        return out

    return beds, frictions


# ---------------------------------------------------------------------------
# area above flotation trajectories
# ---------------------------------------------------------------------------

@dataclass
class AafTrajectory:
    """Flotation-area samples per year with box-plot-ready quantiles."""

    samples: np.ndarray   # (T, M) m^2
    years: np.ndarray

    def quantiles(self, q=(0.025, 0.25, 0.5, 0.75, 0.975)) -> np.ndarray:
        return np.quantile(self.samples, q, axis=1).T  # (T, len(q))


def aaf_trajectory(thickness_by_year, beds, consts: PhysicalConstants,
                   grid: Grid, years=None) -> AafTrajectory:
    """Area above flotation for every draw at every year.

    ``thickness_by_year`` is a sequence of (M, J+1) matrices (or (J+1,)
    vectors for single draws); ``beds`` is one bed per draw, or a single
    shared bed. A single draw reproduces area_above_flotation exactly.
    """
    ratio = consts.water_density / consts.ice_density
    rows = [np.atleast_2d(np.asarray(h, dtype=float)) for h in thickness_by_year]
    m = rows[0].shape[0]
    beds = np.asarray(beds, dtype=float)
    beds2 = np.broadcast_to(np.atleast_2d(beds), (m, rows[0].shape[1]))
    submerged = np.minimum(0.0, beds2 - consts.sea_level) * ratio
    out = np.empty((len(rows), m))
    for t, H in enumerate(rows):
        if H.shape != beds2.shape:
            raise ValueError(f"year {t}: thickness {H.shape} does not match "
                             f"{beds2.shape} bed draws")
        out[t] = np.maximum(H + submerged, 0.0).sum(axis=1) * grid.spacing
    if years is None:
        years = np.arange(len(rows), dtype=float)
    return AafTrajectory(out, np.asarray(years, dtype=float))


# ---------------------------------------------------------------------------
# metrics report
# ---------------------------------------------------------------------------

def _check_metric_block(block: dict):
    for quantity, metrics in block.items():
        for name, value in metrics.items():
            if name == "coverage95" and not 0.0 <= value <= 1.0:
                raise ValueError(f"{quantity} coverage {value} outside [0, 1]")
            if name.startswith(("rmse", "crps")) and value < 0.0:
                raise ValueError(f"{quantity} {name} is negative: {value}")


@dataclass
class MetricsReport:
    """Twin-experiment scorecard: averaged metrics per method and quantity,
    per-sample values, the variance-decomposition series, a config echo,
    and the seed manifest. Everything is JSON-native so a report round
    trips through disk exactly."""

    config: dict
    seeds: dict
    n_test: int
    metrics: dict        # {method: {quantity: {metric: float}}}
    per_sample: dict     # {"indices": [...], method: {...}, "variance_law": {...}}
    runtime_seconds: dict

    def __post_init__(self):
        if self.n_test < 1:
            raise ValueError("report needs at least one scored sample")
        for method, block in self.metrics.items():
            if method not in METHODS:
                raise ValueError(f"unknown method {method!r}")
            _check_metric_block(block)

    def without_runtimes(self) -> "MetricsReport":
        return MetricsReport(self.config, self.seeds, self.n_test,
                             self.metrics, self.per_sample, {})


def emit_report(report: MetricsReport, out_dir, formats=("csv", "json")) -> dict:
    """Write the report; returns {format: path}.

    The JSON file is the full report and is what parse_report reads back.
    The CSV is a flat view with the stable column set
    (method, quantity, metric, value).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    if "json" in formats:
        path = out_dir / "report.json"
        with open(path, "w") as f:
            json.dump(asdict(report), f, indent=2)
            f.write("\n")
        paths["json"] = path
    if "csv" in formats:
        path = out_dir / "report.csv"
        with open(path, "w") as f:
            f.write("method,quantity,metric,value\n")
            for method in sorted(report.metrics):
                for quantity in sorted(report.metrics[method]):
                    for name in sorted(report.metrics[method][quantity]):
                        value = report.metrics[method][quantity][name]
                        f.write(f"{method},{quantity},{name},{value!r}\n")
        paths["csv"] = path
    return paths


def parse_report(path) -> MetricsReport:
    """Inverse of emit_report's JSON emission."""
    with open(path) as f:
        payload = json.load(f)
    return MetricsReport(**payload)


# ---------------------------------------------------------------------------
# observation-set containers (CLI round trip)
# ---------------------------------------------------------------------------

_OBS_FIELDS = ("elevation", "velocity", "mask_elevation", "mask_velocity",
               "var_elevation", "var_velocity")
_OBS_UNITS = {"elevation": "m", "velocity": "m yr^-1",
              "mask_elevation": "bool", "mask_velocity": "bool",
              "var_elevation": "m^2", "var_velocity": "m^2 yr^-2"}


def save_observation_set(obs: ObservationSet, out_dir, prefix="obs",
                         seed=None) -> list:
    """One CSV+sidecar per channel, nodes x years, year labels on columns."""
    labels = [f"{y:g}" for y in obs.years]
    paths = []
    for name in _OBS_FIELDS:
        values = np.asarray(getattr(obs, name), dtype=float).T  # (J+1, T)
        rec = ArrayRecord(name=f"{prefix}_{name}", values=values,
                          units=_OBS_UNITS[name], column_axis="year",
                          column_labels=labels, seed=seed)
        paths.append(save_array(rec, out_dir))
    return paths


def load_observation_set(out_dir, prefix="obs") -> ObservationSet:
    from .arrays import load_array
    parts = {}
    years = None
    for name in _OBS_FIELDS:
        rec = load_array(Path(out_dir) / f"{prefix}_{name}.csv")
        parts[name] = rec.values.T
        years = np.array([float(l) for l in rec.column_labels])
    return ObservationSet(
        years, parts["elevation"], parts["velocity"],
        parts["mask_elevation"].astype(bool),
        parts["mask_velocity"].astype(bool),
        parts["var_elevation"], parts["var_velocity"])


# ---------------------------------------------------------------------------
# per-sample evaluation
# ---------------------------------------------------------------------------

def _ensemble_scores(members: np.ndarray, truth: np.ndarray) -> dict:
    lo, hi = empirical_interval95(members)
    return {
        "rmse": rmse(members.mean(axis=0), truth),
        "crps_mean_per_node": crps_ensemble(members, truth),
        "crps_sum_per_node": crps_ensemble(members, truth, mode="sum-per-node"),
        "coverage95": coverage95(lo, hi, truth),
    }


def _evaluate_sample(cfg: ExperimentConfig, truth: TruthSetup,
                     prior: PriorSetup, scenario: TrainingScenario,
                     network, stats: StandardizationStats, index: int):
    """Score one held-out sample with both routes.

    Returns (scores, variance_law, aaf, summaries): metric dicts per
    method/quantity, the per-year pooled/within variance pair, the pooled
    flotation-area trajectory, and per-node summary matrices.
    """
    grid = truth.grid
    consts_dyn = scenario.dynamics_constants()
    record = regenerate_sample(scenario, cfg.data_seed, index)
    bed_prof, fric_prof = reconstruct_fields(record.params, grid)
    bed_true = bed_prof.elevation
    fric_true = fric_prof.coefficient
    h_final = record.thickness[-1]
    gl = grounding_line_index(h_final, bed_true, consts_dyn)
    grounded = np.arange(grid.n_nodes) <= gl

    # stage one: coefficient posterior from the network
    post = infer_posterior(network, record.observations, stats)
    eval_rng = np.random.default_rng(
        np.random.SeedSequence((cfg.eval_seed, index)))
    draws = sample_posterior(post, cfg.n_posterior_draws, stats, prior.trend,
                             prior.basis_bed, prior.basis_friction, grid,
                             eval_rng)

    # stage two: state filtering under the parameter posterior
    pooled = pooled_posterior_filtering(
        posterior_field_sampler(post, stats, prior), record.observations,
        FilterConfig(n_ensemble=cfg.n_ensemble, noise=cfg.noise,
                     seed=_child_seed(cfg.filter_seed, index, 0)),
        cfg.n_filter_draws, consts_dyn, grid)

    # baseline: joint state-and-parameter filter from the prior
    bed_sampler, fric_sampler = prior_field_samplers(prior, grid)
    aug = run_augmented_enkf(
        record.observations, bed_sampler, fric_sampler,
        FilterConfig(n_ensemble=cfg.n_ensemble, noise=cfg.noise,
                     seed=_child_seed(cfg.filter_seed, index, 1)),
        consts_dyn, grid)
    aug_final = aug.analyses[-1]

    npi_members = {
        "bed": draws.bed,
        "friction": draws.friction[:, grounded],
        "thickness": pooled.pooled[-1],
    }
    aug_members = {
        "bed": aug_final.bed,
        "friction": np.exp(aug_final.log_friction)[:, grounded],
        "thickness": aug_final.thickness,
    }
    truths = {"bed": bed_true, "friction": fric_true[grounded],
              "thickness": h_final}
    scores = {
        "npi": {q: _ensemble_scores(npi_members[q], truths[q])
                for q in QUANTITIES},
        "augmented_enkf": {q: _ensemble_scores(aug_members[q], truths[q])
                           for q in QUANTITIES},
    }

    # pooled-vs-within variance decomposition, population form, per year
    n_e = cfg.n_ensemble
    pooled_var = [float(p.var(axis=0).mean()) for p in pooled.pooled]
    within_var = [float((pooled.run_variances[:, t, :] * (n_e - 1) / n_e)
                        .mean()) for t in range(len(pooled.pooled))]

    run_beds = np.stack([reconstruct_fields(f, grid)[0].elevation
                         for f in pooled.field_draws])
    member_beds = np.repeat(run_beds, n_e, axis=0)
    aaf = aaf_trajectory(pooled.pooled, member_beds, consts_dyn, grid,
                         years=pooled.years)

    summaries = {}
    for q in QUANTITIES:
        region = grounded if q == "friction" else np.ones(grid.n_nodes, bool)
        full = np.full(grid.n_nodes, np.nan)
        cols = {}
        for tag, members in (("npi", npi_members[q]),
                             ("augmented_enkf", aug_members[q])):
            lo, hi = empirical_interval95(members)
            for stat_name, vec in (("mean", members.mean(axis=0)),
                                   ("lower", lo), ("upper", hi)):
                col = full.copy()
                col[region] = vec
                cols[f"{tag}_{stat_name}"] = col
        col = full.copy()
        col[region] = truths[q]
        summaries[q] = {"truth": col, **cols}
    return scores, (pooled_var, within_var), aaf, summaries


# ---------------------------------------------------------------------------
# the full pipeline
# ---------------------------------------------------------------------------

def _stage(name: str, out_dir: Path, status: dict):
    """Context manager tagging failures with the stage name."""
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            status.setdefault("runtime_seconds", {})[name] = \
                time.perf_counter() - self.t0
            status["stage"] = name
            with open(out_dir / "stage_status.json", "w") as f:
                json.dump({"last_stage": name,
                           "failed": exc is not None,
                           "runtime_seconds": status["runtime_seconds"]},
                          f, indent=2)
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, str(exc)) from exc
            return False
    return _Ctx()


def run_osse(cfg: ExperimentConfig, progress=None,
             truth: TruthSetup | None = None,
             training_data=None, network=None, stats=None) -> MetricsReport:
    """Run the whole twin experiment and return the scorecard.

    Precomputed pieces (truth, training_data, network+stats) can be
    injected to resume or share expensive stages; anything not supplied is
    built from the config. The same config and seeds give an identical
    report apart from the wall-clock entries.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    status: dict = {}
    say = progress or (lambda msg: None)

    with _stage("spin_up", out_dir, status):
        if truth is None:
            truth = build_truth(cfg, progress)
        grid = truth.grid
        steady = np.column_stack([truth.bed, truth.friction,
                                  truth.steady_state.thickness,
                                  truth.steady_state.velocity])
        save_array(ArrayRecord(
            name="truth_fields", values=steady, units="m, MPa m^-1/3 yr^1/3, m, m yr^-1",
            column_axis="field",
            column_labels=["bed", "friction", "steady_thickness",
                           "steady_velocity"],
            seed=cfg.truth_seed), out_dir)

    with _stage("prior", out_dir, status):
        prior = build_prior(cfg, truth)
        save_array(ArrayRecord(
            name="bed_observations",
            values=np.column_stack([prior.obs_locations, prior.obs_values]),
            units="m", row_axis="observation", column_axis="field",
            column_labels=["location", "elevation"],
            seed=_child_seed(cfg.truth_seed, 1)), out_dir)
        scenario = build_scenario(cfg, truth, prior)

    with _stage("generate", out_dir, status):
        if training_data is None:
            say(f"simulating {cfg.n_simulations} training samples")
            training_data = generate_training_data(
                cfg.n_simulations, scenario, cfg.data_seed)
        with open(out_dir / "training_meta.json", "w") as f:
            json.dump({"n_samples": int(training_data.n_samples),
                       "n_redrawn": training_data.meta.get("n_redrawn"),
                       "p_bed": training_data.p_bed,
                       "p_friction": training_data.p_friction}, f, indent=2)

    with _stage("train", out_dir, status):
        if network is None:
            say(f"training for {cfg.network.epochs} epochs")
            network, train_report = train(training_data, cfg.network,
                                          seed=cfg.train_seed)
            stats = training_data.stats
            save_checkpoint(out_dir / "network.pt", network, stats,
                            report=train_report)
        elif stats is None:
            raise ValueError("a supplied network needs its stats")

    with _stage("evaluate", out_dir, status):
        test_indices = [int(i) for i in training_data.indices("test")]
        per_sample: dict = {
            "indices": test_indices,
            "npi": {q: {m: [] for m in METRIC_NAMES} for q in QUANTITIES},
            "augmented_enkf": {q: {m: [] for m in METRIC_NAMES}
                               for q in QUANTITIES},
            "variance_law": {"pooled": [], "within": []},
        }
        sample_dir = out_dir / "samples"
        for pos, index in enumerate(test_indices):
            say(f"evaluating test sample {pos + 1}/{len(test_indices)} "
                f"(index {index})")
            scores, (pooled_var, within_var), aaf, summaries = \
                _evaluate_sample(cfg, truth, prior, scenario, network,
                                 stats, index)
            for method in METHODS:
                for q in QUANTITIES:
                    for m in METRIC_NAMES:
                        per_sample[method][q][m].append(scores[method][q][m])
            per_sample["variance_law"]["pooled"].append(pooled_var)
            per_sample["variance_law"]["within"].append(within_var)
            for q in QUANTITIES:
                cols = summaries[q]
                save_array(ArrayRecord(
                    name=f"sample_{index}_{q}",
                    values=np.column_stack(list(cols.values())),
                    units="m" if q != "friction" else "MPa m^-1/3 yr^1/3",
                    column_axis="summary", column_labels=list(cols.keys()),
                    seed=cfg.data_seed), sample_dir)
            save_array(ArrayRecord(
                name=f"sample_{index}_aaf_quantiles",
                values=aaf.quantiles(), units="m^2", row_axis="year",
                column_axis="quantile",
                column_labels=["q025", "q25", "q50", "q75", "q975"],
                seed=cfg.data_seed), sample_dir)
            with open(out_dir / "evaluation_partial.json", "w") as f:
                json.dump(per_sample, f, indent=2)

    with _stage("report", out_dir, status):
        averaged = {
            method: {q: {m: float(np.mean(per_sample[method][q][m]))
                         for m in METRIC_NAMES} for q in QUANTITIES}
            for method in METHODS}
        report = MetricsReport(
            config=json.loads(json.dumps(asdict(cfg))),
            seeds={"truth": cfg.truth_seed, "data": cfg.data_seed,
                   "train": cfg.train_seed, "filter": cfg.filter_seed,
                   "eval": cfg.eval_seed},
            n_test=len(test_indices),
            metrics=averaged,
            per_sample=per_sample,
            runtime_seconds=dict(status["runtime_seconds"]))
        emit_report(report, out_dir)
    return report
