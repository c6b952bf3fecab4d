"""Tests for the state-space layer: observation operator, noise rules,
missingness, discrepancy estimation, and regridding."""
import numpy as np
import pytest

from icecal.fields import BasisSystem, FieldParams, synthetic_bed_trend
from icecal.ssa import (
    BedProfile,
    FrictionProfile,
    Grid,
    IceState,
    PhysicalConstants,
    grounded_mask,
    grounding_line_index,
    solve_velocity,
    surface_elevation,
)
from icecal.statespace import (
    Discrepancy,
    NoiseConfig,
    ObservationSet,
    ProcessNoiseModel,
    adjust_observations,
    default_missingness,
    estimate_discrepancy,
    observation_operator,
    process_noise_covariance,
    regrid_nearest_k,
    simulate_observations,
    velocity_error_sd,
)


@pytest.fixture(scope="module")
def desk_grid():
    return Grid.from_length(800e3, 200)


@pytest.fixture(scope="module")
def consts():
    return PhysicalConstants()


@pytest.fixture(scope="module")
def wedge_setup(desk_grid, consts):
    """A solvable grounded-to-floating geometry with a nontrivial velocity."""
    s = desk_grid.s
    bed = BedProfile(synthetic_bed_trend(s))
    friction = FrictionProfile(np.full(s.size, 0.02))
    h = 2000.0 * (1.0 - s / desk_grid.length) + 1.0
    state = IceState(h, 0.001 * s, year=0.0)
    return bed, friction, state


# ---------------------------------------------------------------------------
# noise rules
# ---------------------------------------------------------------------------

def test_velocity_error_sd_frozen_values():
    u = np.array([0.0, 40.0, 80.0, 1000.0, -40.0])
    np.testing.assert_allclose(velocity_error_sd(u),
                               [0.0, 10.0, 20.0, 20.0, 10.0])


def test_noise_config_defaults():
    cfg = NoiseConfig()
    assert cfg.elevation_sd == 10.0
    assert cfg.velocity_fraction == 0.25
    assert cfg.velocity_cap == 20.0
    assert cfg.process_corr_range == 50e3
    assert cfg.process_fraction == 0.02
    assert cfg.process_cap == 20.0
    assert (cfg.init_sd_grounded, cfg.init_sd_floating) == (50.0, 20.0)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(elevation_sd=-1.0)
    with pytest.raises(ValueError):
        NoiseConfig(velocity_cap=0.0)


def test_observation_set_validation():
    good = dict(years=[0.0], elevation=np.zeros((1, 3)), velocity=np.zeros((1, 3)),
                mask_elevation=np.ones((1, 3), bool), mask_velocity=np.ones((1, 3), bool),
                var_elevation=np.ones((1, 3)), var_velocity=np.ones((1, 3)))
    obs = ObservationSet(**good)
    assert obs.n_years == 1 and obs.n_nodes == 3
    with pytest.raises(ValueError):
        ObservationSet(**{**good, "velocity": np.zeros((1, 4))})
    with pytest.raises(ValueError):
        ObservationSet(**{**good, "years": [0.0, 1.0]})
    with pytest.raises(ValueError):
        ObservationSet(**{**good, "var_velocity": -np.ones((1, 3))})
    # negative variance at a masked slot is ignorable garbage
    masked = {**good, "mask_velocity": np.zeros((1, 3), bool),
              "var_velocity": -np.ones((1, 3))}
    ObservationSet(**masked)


# ---------------------------------------------------------------------------
# observation operator
# ---------------------------------------------------------------------------

def test_operator_matches_pipeline_bitwise(desk_grid, consts, wedge_setup):
    bed, friction, state = wedge_setup
    z, u = observation_operator(state, (bed, friction), consts, desk_grid)

    z_direct = surface_elevation(state.thickness, bed.elevation, consts)
    gl = grounding_line_index(state.thickness, bed.elevation, consts)
    u_direct, info = solve_velocity(state.thickness, z_direct, friction.coefficient,
                                    gl, consts, desk_grid, u_init=state.velocity)
    assert info.converged or info.last_delta <= 1e-3
    assert np.array_equal(z, z_direct)
    assert np.array_equal(u, u_direct)
    assert u.max() > 10.0  # the test geometry actually flows


def test_operator_accepts_field_params(desk_grid, consts, wedge_setup):
    _, _, state = wedge_setup
    basis = BasisSystem.even(5, desk_grid.length, 300e3)
    params = FieldParams(bed_coeffs=np.full(5, -50.0),
                         friction_coeffs=np.full(5, np.log(0.02)),
                         bed_trend=synthetic_bed_trend(desk_grid.s),
                         basis_bed=basis, basis_friction=basis)
    from icecal.fields import reconstruct_fields
    bed, friction = reconstruct_fields(params, desk_grid)
    z1, u1 = observation_operator(state, params, consts, desk_grid)
    z2, u2 = observation_operator(state, (bed, friction), consts, desk_grid)
    assert np.array_equal(z1, z2)
    assert np.array_equal(u1, u2)


def test_operator_raises_on_hopeless_budget(desk_grid, consts, wedge_setup):
    bed, friction, state = wedge_setup
    cold = IceState(state.thickness, np.zeros_like(state.velocity))
    with pytest.raises(RuntimeError):
        observation_operator(cold, (bed, friction), consts, desk_grid, max_iter=1)


# ---------------------------------------------------------------------------
# missingness
# ---------------------------------------------------------------------------

def test_default_missingness_pattern(desk_grid, consts, wedge_setup):
    bed, _, state = wedge_setup
    trajectory = [IceState(state.thickness, state.velocity, year=float(t))
                  for t in range(15)]
    mask_z, mask_u = default_missingness(trajectory, bed, consts)
    grounded = grounded_mask(state.thickness, bed.elevation, consts)
    assert not grounded.all()  # the wedge tip floats, so the mask is nontrivial
    assert np.array_equal(mask_z[0], grounded)
    assert np.array_equal(mask_z[14], grounded)
    stride = (np.arange(desk_grid.n_nodes) % 4) == 0
    for t in range(12):
        assert np.array_equal(mask_u[t], stride)
    for t in range(12, 15):
        assert mask_u[t].all()


# ---------------------------------------------------------------------------
# simulated observations
# ---------------------------------------------------------------------------

def _repeat_trajectory(state, n):
    return [IceState(state.thickness, state.velocity, year=float(t)) for t in range(n)]


def test_zero_noise_reproduces_operator_bitwise(desk_grid, consts, wedge_setup):
    bed, friction, state = wedge_setup
    trajectory = _repeat_trajectory(state, 3)
    full = np.ones((3, desk_grid.n_nodes), bool)
    silent = NoiseConfig(elevation_sd=0.0, velocity_fraction=0.0)
    obs = simulate_observations(trajectory, (bed, friction), silent,
                                full, full, rng=0, consts=consts, grid=desk_grid)
    z_true, u_true = observation_operator(state, (bed, friction), consts, desk_grid)
    for t in range(3):
        assert np.array_equal(obs.elevation[t], z_true)
        assert np.array_equal(obs.velocity[t], u_true)
    np.testing.assert_array_equal(obs.years, [0.0, 1.0, 2.0])


def test_simulated_observations_variances_and_masks(desk_grid, consts, wedge_setup):
    bed, friction, state = wedge_setup
    trajectory = _repeat_trajectory(state, 2)
    mask_z, mask_u = default_missingness(trajectory, bed, consts)
    obs = simulate_observations(trajectory, (bed, friction), NoiseConfig(),
                                mask_z, mask_u, rng=7, consts=consts, grid=desk_grid)
    _, u_true = observation_operator(state, (bed, friction), consts, desk_grid)
    assert np.all(obs.elevation[~mask_z] == 0.0)
    assert np.all(obs.velocity[~mask_u] == 0.0)
    assert np.all(obs.var_elevation[~mask_z] == 0.0)
    assert np.all(obs.var_elevation[mask_z] == 100.0)
    expected_var = velocity_error_sd(u_true) ** 2
    for t in range(2):
        np.testing.assert_allclose(obs.var_velocity[t][mask_u[t]],
                                   expected_var[mask_u[t]])


def test_observation_noise_is_mean_zero(desk_grid, consts, wedge_setup):
    # ~50*201 > 1e4 independent errors per channel in one call
    bed, friction, state = wedge_setup
    trajectory = _repeat_trajectory(state, 50)
    n = 50 * desk_grid.n_nodes
    full = np.ones((50, desk_grid.n_nodes), bool)
    obs = simulate_observations(trajectory, (bed, friction), NoiseConfig(),
                                full, full, rng=11, consts=consts, grid=desk_grid)
    z_true, u_true = observation_operator(state, (bed, friction), consts, desk_grid)
    z_err = obs.elevation - z_true[None, :]
    assert abs(z_err.mean()) < 4.0 * 10.0 / np.sqrt(n)
    assert abs(z_err.std() - 10.0) < 0.05 * 10.0
    sd_u = velocity_error_sd(u_true)
    live = sd_u > 0
    standardized = (obs.velocity[:, live] - u_true[None, live]) / sd_u[None, live]
    assert abs(standardized.mean()) < 4.0 / np.sqrt(standardized.size)
    assert abs(standardized.std() - 1.0) < 0.05


def test_same_seed_ignores_missingness_pattern(desk_grid, consts, wedge_setup):
    # the noise stream must not depend on which slots end up masked
    bed, friction, state = wedge_setup
    trajectory = _repeat_trajectory(state, 3)
    full = np.ones((3, desk_grid.n_nodes), bool)
    sparse_z, sparse_u = default_missingness(trajectory, bed, consts)
    a = simulate_observations(trajectory, (bed, friction), NoiseConfig(),
                              full, full, rng=3, consts=consts, grid=desk_grid)
    b = simulate_observations(trajectory, (bed, friction), NoiseConfig(),
                              sparse_z, sparse_u, rng=3, consts=consts, grid=desk_grid)
    assert np.array_equal(a.elevation[sparse_z], b.elevation[sparse_z])
    assert np.array_equal(a.velocity[sparse_u], b.velocity[sparse_u])
    c = simulate_observations(trajectory, (bed, friction), NoiseConfig(),
                              sparse_z, sparse_u, rng=3, consts=consts, grid=desk_grid)
    assert np.array_equal(b.elevation, c.elevation)
    assert np.array_equal(b.velocity, c.velocity)


# ---------------------------------------------------------------------------
# process noise
# ---------------------------------------------------------------------------

def test_process_noise_diagonal_frozen_values(desk_grid):
    model = ProcessNoiseModel(desk_grid, NoiseConfig())
    np.testing.assert_allclose(model.diagonal_scale([0.0, 500.0, 750.0, 2000.0]),
                               [0.0, 10.0, 15.0, 20.0])


def test_process_noise_dense_structure(consts):
    grid = Grid(n_nodes=21, spacing=5e3)
    model = ProcessNoiseModel(grid, NoiseConfig())
    h = np.full(21, 1000.0)  # SD 20 everywhere
    V = model.dense(h)
    np.testing.assert_allclose(np.diag(V), 400.0)
    # ten nodes apart = one correlation range
    np.testing.assert_allclose(V[0, 10], 400.0 * np.exp(-3.0), rtol=1e-12)
    np.testing.assert_allclose(V, V.T)
    assert np.all(np.linalg.eigvalsh(V) > 0)


def test_process_noise_sample_moments():
    grid = Grid(n_nodes=21, spacing=5e3)
    model = ProcessNoiseModel(grid, NoiseConfig())
    h = np.full(21, 1000.0)
    draws = model.sample(h, rng=5, size=40000)
    assert draws.shape == (40000, 21)
    assert abs(draws.mean()) < 4.0 * 20.0 / np.sqrt(draws.size / 3)
    np.testing.assert_allclose(draws.std(axis=0), 20.0, rtol=0.03)
    corr = np.corrcoef(draws[:, 0], draws[:, 10])[0, 1]
    assert abs(corr - np.exp(-3.0)) < 0.02


def test_process_noise_zero_thickness_is_silent():
    grid = Grid(n_nodes=5, spacing=1e3)
    model = ProcessNoiseModel(grid, NoiseConfig())
    assert np.all(model.sample(np.zeros(5), rng=0, size=3) == 0.0)
    h = np.array([0.0, 100.0, 100.0, 100.0, 0.0])
    draws = model.sample(h, rng=1, size=100)
    assert np.all(draws[:, [0, 4]] == 0.0)
    assert np.all(draws[:, 1:4] != 0.0)


def test_process_noise_batched_rows():
    grid = Grid(n_nodes=8, spacing=2e3)
    model = ProcessNoiseModel(grid, NoiseConfig())
    H = np.vstack([np.full(8, 500.0), np.zeros(8), np.full(8, 3000.0)])
    draws = model.sample(H, rng=2)
    assert draws.shape == (3, 8)
    assert np.all(draws[1] == 0.0)
    with pytest.raises(ValueError):
        model.sample(H, rng=2, size=4)


def test_process_noise_covariance_wrapper(desk_grid):
    h = np.linspace(0.0, 2500.0, desk_grid.n_nodes)
    d, L = process_noise_covariance(h, NoiseConfig(), desk_grid)
    model = ProcessNoiseModel(desk_grid, NoiseConfig())
    np.testing.assert_array_equal(d, model.diagonal_scale(h))
    np.testing.assert_array_equal(L, model.correlation_cholesky)
    np.testing.assert_allclose(L @ L.T, model.correlation, atol=1e-10)


# ---------------------------------------------------------------------------
# discrepancy
# ---------------------------------------------------------------------------

def _toy_obs(rng, n_years=6, n_nodes=41, offset_z=0.0, offset_u=0.0,
             mask_z=None, mask_u=None):
    """Observations equal to a smooth 'model output' plus a planted offset."""
    grid = Grid(n_nodes=n_nodes, spacing=2e3)
    s = grid.s
    z_model = 100.0 + 50.0 * np.sin(2 * np.pi * s / s[-1])[None, :] * np.ones((n_years, 1))
    u_model = 10.0 + 0.5 * (s / 1e3)[None, :] * np.ones((n_years, 1))
    if mask_z is None:
        mask_z = np.ones((n_years, n_nodes), bool)
    if mask_u is None:
        mask_u = np.ones((n_years, n_nodes), bool)
    z_obs = np.where(mask_z, z_model + offset_z, 0.0)
    u_obs = np.where(mask_u, u_model + offset_u, 0.0)
    obs = ObservationSet(np.arange(n_years, dtype=float), z_obs, u_obs,
                         mask_z, mask_u,
                         np.where(mask_z, 1.0, 0.0), np.where(mask_u, 1.0, 0.0))
    return grid, obs, z_model, u_model


def _exact_sampler(z_model, u_model):
    def sampler(rng, n):
        return (np.repeat(z_model[None], n, axis=0),
                np.repeat(u_model[None], n, axis=0))
    return sampler


def test_discrepancy_recovers_planted_offset_exactly():
    grid, obs, z_model, u_model = _toy_obs(None, offset_z=4.5, offset_u=-2.25)
    disc = estimate_discrepancy(obs, _exact_sampler(z_model, u_model),
                                n_sim=3, rng=0, grid=grid)
    np.testing.assert_allclose(disc.elevation, 4.5, atol=1e-8)
    np.testing.assert_allclose(disc.velocity, -2.25, atol=1e-8)
    assert disc.smoothed


def test_discrepancy_is_linear_in_planted_offset():
    grid, obs0, z_model, u_model = _toy_obs(None)
    grid, obs7, _, _ = _toy_obs(None, offset_z=7.0, offset_u=3.0)
    sampler = _exact_sampler(z_model, u_model)
    d0 = estimate_discrepancy(obs0, sampler, n_sim=2, rng=0, grid=grid)
    d7 = estimate_discrepancy(obs7, sampler, n_sim=2, rng=0, grid=grid)
    np.testing.assert_allclose(d7.elevation - d0.elevation, 7.0, atol=1e-8)
    np.testing.assert_allclose(d7.velocity - d0.velocity, 3.0, atol=1e-8)


def test_discrepancy_under_monte_carlo_noise():
    grid, obs, z_model, u_model = _toy_obs(None, offset_z=5.0, offset_u=5.0)
    sigma_sim = 3.0
    n_sim = 200

    def noisy_sampler(rng, n):
        z = z_model[None] + sigma_sim * rng.standard_normal((n,) + z_model.shape)
        u = u_model[None] + sigma_sim * rng.standard_normal((n,) + u_model.shape)
        return z, u

    disc = estimate_discrepancy(obs, noisy_sampler, n_sim=n_sim, rng=42, grid=grid)
    se_node = sigma_sim / np.sqrt(n_sim * obs.n_years)
    # smoothing pools nodes, so the per-node bound is loose on purpose
    assert np.abs(disc.elevation - 5.0).max() < 4.0 * se_node
    assert np.abs(disc.velocity - 5.0).max() < 4.0 * se_node


def test_discrepancy_fills_never_observed_nodes():
    n_years, n_nodes = 6, 41
    mask_z = np.ones((n_years, n_nodes), bool)
    mask_z[:, 13] = False  # node 13 never observed
    grid, obs, z_model, u_model = _toy_obs(None, offset_z=2.0, mask_z=mask_z)
    disc = estimate_discrepancy(obs, _exact_sampler(z_model, u_model),
                                n_sim=2, rng=0, grid=grid)
    assert np.isfinite(disc.elevation).all()
    np.testing.assert_allclose(disc.elevation[13], 2.0, atol=1e-6)


def test_discrepancy_ignores_masked_garbage():
    n_years, n_nodes = 6, 41
    rng = np.random.default_rng(8)
    mask_z = rng.random((n_years, n_nodes)) < 0.6
    mask_z[:, 0] = True
    mask_u = rng.random((n_years, n_nodes)) < 0.6
    mask_u[:, 0] = True
    grid, obs, z_model, u_model = _toy_obs(None, offset_z=1.0, offset_u=-1.0,
                                           mask_z=mask_z, mask_u=mask_u)
    garbage_z = np.where(mask_z, obs.elevation, np.nan)
    garbage_u = np.where(mask_u, obs.velocity, 1e12)
    dirty = ObservationSet(obs.years, garbage_z, garbage_u, mask_z, mask_u,
                           obs.var_elevation, obs.var_velocity)
    sampler = _exact_sampler(z_model, u_model)
    clean_disc = estimate_discrepancy(obs, sampler, n_sim=2, rng=0, grid=grid)
    dirty_disc = estimate_discrepancy(dirty, sampler, n_sim=2, rng=0, grid=grid)
    np.testing.assert_array_equal(clean_disc.elevation, dirty_disc.elevation)
    np.testing.assert_array_equal(clean_disc.velocity, dirty_disc.velocity)


def test_discrepancy_validates_sampler_shape():
    grid, obs, z_model, u_model = _toy_obs(None)

    def bad_sampler(rng, n):
        return np.zeros((n, 2, 2)), np.zeros((n, 2, 2))

    with pytest.raises(ValueError):
        estimate_discrepancy(obs, bad_sampler, n_sim=2, rng=0, grid=grid)
    with pytest.raises(ValueError):
        estimate_discrepancy(obs, _exact_sampler(z_model, u_model),
                             n_sim=0, rng=0, grid=grid)


def test_adjust_observations_round_trip():
    grid, obs, z_model, u_model = _toy_obs(None, offset_z=3.0, offset_u=-1.5)
    disc = Discrepancy(elevation=np.full(41, 3.0), velocity=np.full(41, -1.5))
    adjusted = adjust_observations(obs, disc)
    np.testing.assert_allclose(adjusted.elevation[obs.mask_elevation],
                               np.broadcast_to(z_model, obs.elevation.shape)[obs.mask_elevation],
                               atol=1e-12)
    undone = adjust_observations(adjusted, Discrepancy(-disc.elevation, -disc.velocity))
    np.testing.assert_allclose(undone.elevation, obs.elevation, atol=1e-12)
    np.testing.assert_allclose(undone.velocity, obs.velocity, atol=1e-12)
    assert np.array_equal(undone.mask_elevation, obs.mask_elevation)
    # masked slots keep the sentinel
    assert np.all(adjusted.elevation[~obs.mask_elevation] == 0.0)


# ---------------------------------------------------------------------------
# regridding
# ---------------------------------------------------------------------------

def _brute_force_regrid(points, values, targets, k, radius):
    out = np.zeros(len(targets))
    missing = np.ones(len(targets), bool)
    for i, t in enumerate(targets):
        d = np.abs(points - t)
        order = np.lexsort((points, d))
        picked = [j for j in order if d[j] <= radius][:k]
        if picked:
            out[i] = values[picked].mean() if len(picked) > 1 else values[picked[0]]
            missing[i] = False
    return out, missing


def test_regrid_matches_brute_force_oracle():
    rng = np.random.default_rng(17)
    points = rng.uniform(0.0, 800e3, 500)
    values = rng.standard_normal(500) * 100.0
    targets = np.linspace(0.0, 800e3, 201)
    got, miss = regrid_nearest_k(points, values, targets, k=4, radius=6e3)
    want, want_miss = _brute_force_regrid(points, values, targets, 4, 6e3)
    np.testing.assert_array_equal(miss, want_miss)
    np.testing.assert_allclose(got[~miss], want[~miss], rtol=0, atol=1e-9)


def test_regrid_various_k_and_radii_vs_oracle():
    rng = np.random.default_rng(23)
    points = rng.uniform(-10.0, 10.0, 80)
    values = rng.standard_normal(80)
    targets = rng.uniform(-12.0, 12.0, 60)
    for k, radius in [(1, 0.5), (2, 0.1), (7, 3.0)]:
        got, miss = regrid_nearest_k(points, values, targets, k=k, radius=radius)
        want, want_miss = _brute_force_regrid(points, values, targets, k, radius)
        np.testing.assert_array_equal(miss, want_miss)
        np.testing.assert_allclose(got[~miss], want[~miss], atol=1e-12)


def test_regrid_small_cases():
    points = np.array([0.0, 10.0, 11.0, 30.0])
    values = np.array([1.0, 2.0, 4.0, 8.0])
    got, miss = regrid_nearest_k(points, values, np.array([10.4]), k=2, radius=5.0)
    assert not miss[0] and got[0] == 3.0
    # only one point in radius although k=2
    got, miss = regrid_nearest_k(points, values, np.array([0.5]), k=2, radius=2.0)
    assert not miss[0] and got[0] == 1.0
    # nothing in radius
    got, miss = regrid_nearest_k(points, values, np.array([20.0]), k=2, radius=1.0)
    assert miss[0] and got[0] == 0.0
    # empty source
    got, miss = regrid_nearest_k(np.array([]), np.array([]), np.array([1.0, 2.0]),
                                 k=3, radius=1.0)
    assert miss.all()


def test_regrid_validation():
    with pytest.raises(ValueError):
        regrid_nearest_k([0.0], [1.0], [0.0], k=0, radius=1.0)
    with pytest.raises(ValueError):
        regrid_nearest_k([0.0], [1.0], [0.0], k=1, radius=None)
